import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exceptions import ClipWarning, RangeTooNarrow
from lut import (LatencyBudget, LatencyStage, build_lut, default_latency_budget, error_bound, exact_theta,
                 export_table_csv, is_monotone, latency_report, lut_eval, lut_eval_array, max_angle_error,
                 quantize_input)

GAMMA = 0.52


@pytest.fixture(scope='module')
def table():
    return build_lut(GAMMA)


def test_table_layout(table):
    assert table.entries.shape == (1024,)
    assert table.min_input_code == -512
    assert table.max_input_code == 511
    assert table.input_step == pytest.approx(6.0 / 512)
    assert np.all(np.abs(table.entries * table.output_step) < np.pi / 2)


def test_exhaustive_error_within_bound(table):
    assert max_angle_error(table) <= error_bound(table)


@given(q=st.floats(-5.99, 5.99))
@settings(max_examples=200, deadline=None)
def test_single_lookup_within_bound(table, q):
    theta, (code_in, code_out) = lut_eval(q, table)
    assert abs(theta - float(exact_theta(q, GAMMA))) <= error_bound(table) + 1e-12
    assert table.min_input_code <= code_in <= table.max_input_code
    assert abs(code_out) <= table.max_output_code


@pytest.mark.parametrize('bits', [(8, 8), (10, 10), (12, 10)])
def test_monotone_for_several_widths(bits):
    t = build_lut(GAMMA, input_bits=bits[0], output_bits=bits[1])
    assert is_monotone(t)
    assert max_angle_error(t) <= error_bound(t)


def test_clipping_warns_and_saturates(table):
    with pytest.warns(ClipWarning):
        theta, codes, _ = lut_eval_array(np.array([0.0, 10.0, -10.0]), table)
    assert codes[1] == table.max_input_code
    assert codes[2] == table.min_input_code
    assert theta[0] == 0.0


def test_in_range_lookup_is_silent(table):
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        lut_eval_array(np.linspace(-5.9, 5.9, 101), table)


def test_quantize_counts_clipped(table):
    codes, clipped = quantize_input(np.array([-7.0, 0.0, 5.99, 7.0]), table)
    assert clipped == 2
    assert codes[1] == 0


def test_range_too_narrow():
    reference = np.random.default_rng(3).normal(0.0, 1.0, 20000)
    with pytest.raises(RangeTooNarrow):
        build_lut(GAMMA, full_scale=2.0, reference_q=reference)
    assert build_lut(GAMMA, full_scale=6.0, reference_q=reference).entries is not None


def test_bad_widths():
    with pytest.raises(ValueError):
        build_lut(GAMMA, input_bits=1)
    with pytest.raises(ValueError):
        build_lut(GAMMA, full_scale=0.0)


def test_modulator_voltage(table):
    assert table.modulator_voltage(np.pi) == pytest.approx(table.half_wave_voltage)


def test_export_table(table, tmp_path):
    path = tmp_path / 'lut.csv'
    export_table_csv(table, path)
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['input_code', 'q_center', 'output_code', 'theta']
    assert len(rows) == 1 + 1024
    assert int(rows[1][0]) == -512


def test_default_latency_budget():
    report = latency_report(default_latency_budget())
    assert report['total_ns'] == pytest.approx(26.8, abs=1e-6)
    assert report['optical_delay_m'] == pytest.approx(8.03, abs=0.01)
    assert [s['name'] for s in report['stages']][1] == 'lut'
    assert '8 m' in report['note']


def test_latency_stage_validation():
    with pytest.raises(ValueError):
        LatencyBudget((LatencyStage('broken', 0.0),))
    assert LatencyStage.from_cycles('x', 3, 2.0).duration_ns == 6.0
