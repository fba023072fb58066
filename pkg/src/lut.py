"""
LUT Module
Fixed-point emulation of the feedforward path: signed ADC input codes,
a precomputed arctangent table, DAC output codes, and the latency budget
of the processing board.
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from exceptions import ClipWarning, RangeTooNarrow

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299792458.0  # m/s
SAMPLING_PERIOD_NS = 1.0 / 3.0  # 3 GHz converters
PROCESSING_PERIOD_NS = 2.67  # 375 MHz fabric clock
# Share of a reference sample that may fall outside the input range
MAX_CLIP_FRACTION = 1e-3


@dataclass(frozen=True)
class LutTable:
    """
    Quantized theta(q) = arctan(sqrt(2) gamma q)

    Input codes are signed, i in [-2^(b-1), 2^(b-1) - 1], centered at
    q = i * input_step. Output codes are signed and symmetric,
    |k| <= 2^(b-1) - 1, with theta = k * output_step and output_step =
    (pi/2) / 2^(b-1), so every table angle stays inside (-pi/2, pi/2).
    """
    gamma: float
    input_bits: int = 10
    output_bits: int = 10
    full_scale: float = 6.0
    half_wave_voltage: float = 1.0
    entries: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def input_step(self) -> float:
        return self.full_scale / 2 ** (self.input_bits - 1)

    @property
    def output_step(self) -> float:
        return 0.5 * np.pi / 2 ** (self.output_bits - 1)

    @property
    def min_input_code(self) -> int:
        return -2 ** (self.input_bits - 1)

    @property
    def max_input_code(self) -> int:
        return 2 ** (self.input_bits - 1) - 1

    @property
    def max_output_code(self) -> int:
        return 2 ** (self.output_bits - 1) - 1

    def input_codes(self) -> np.ndarray:
        return np.arange(self.min_input_code, self.max_input_code + 1)

    def code_centers(self) -> np.ndarray:
        return self.input_codes() * self.input_step

    def modulator_voltage(self, theta: np.ndarray) -> np.ndarray:
        """Phase-modulator drive for an angle, pi per half-wave voltage"""
        return np.asarray(theta) / np.pi * self.half_wave_voltage


def exact_theta(q, gamma: float):
    return np.arctan(np.sqrt(2.0) * gamma * np.asarray(q, dtype=float))


def build_lut(gamma: float, input_bits: int = 10, output_bits: int = 10, full_scale: float = 6.0,
              half_wave_voltage: float = 1.0, reference_q: Optional[np.ndarray] = None) -> LutTable:
    """
    Precompute the output code for every input code center

    Args:
        gamma: nonlinear coupling
        input_bits: ADC resolution
        output_bits: DAC resolution
        full_scale: input range is [-full_scale, full_scale) in quadrature units
        half_wave_voltage: modulator scaling for the voltage export
        reference_q: optional sample of q values the table must cover

    Returns:
        LutTable

    Raises:
        RangeTooNarrow: more than 0.1% of reference_q clips
    """
    if input_bits < 2 or output_bits < 2:
        raise ValueError("bit widths must be at least 2")
    if full_scale <= 0:
        raise ValueError(f"full_scale must be positive, got {full_scale}")
    table = LutTable(gamma, input_bits, output_bits, full_scale, half_wave_voltage)
    if reference_q is not None and len(reference_q):
        clipped = float(np.mean(_clip_mask(np.asarray(reference_q, dtype=float), table)))
        if clipped > MAX_CLIP_FRACTION:
            raise RangeTooNarrow(
                f"{100 * clipped:.3f}% of the reference sample lies outside +-{full_scale}"
            )
    theta = exact_theta(table.code_centers(), gamma)
    codes = np.clip(np.rint(theta / table.output_step), -table.max_output_code, table.max_output_code)
    entries = codes.astype(np.int32)
    entries.setflags(write=False)
    object.__setattr__(table, 'entries', entries)
    logger.info(f"Built LUT: {input_bits}-bit in, {output_bits}-bit out, range +-{full_scale}, gamma={gamma}")
    return table


def _raw_input_codes(q: np.ndarray, table: LutTable) -> np.ndarray:
    return np.floor(q / table.input_step + 0.5)


def _clip_mask(q: np.ndarray, table: LutTable) -> np.ndarray:
    raw = _raw_input_codes(q, table)
    return (raw < table.min_input_code) | (raw > table.max_input_code)


def quantize_input(q, table: LutTable) -> Tuple[np.ndarray, int]:
    """Round-to-nearest input codes and the number of saturated samples"""
    raw = _raw_input_codes(np.asarray(q, dtype=float), table)
    clipped = int(np.count_nonzero((raw < table.min_input_code) | (raw > table.max_input_code)))
    codes = np.clip(raw, table.min_input_code, table.max_input_code).astype(np.int64)
    return codes, clipped


def lut_eval_array(q, table: LutTable) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized table lookup

    Returns:
        (theta, input codes, output codes)
    """
    codes, clipped = quantize_input(q, table)
    if clipped:
        warnings.warn(f"{clipped} input value(s) outside +-{table.full_scale} saturated", ClipWarning,
                      stacklevel=2)
    out = table.entries[codes - table.min_input_code]
    return out * table.output_step, codes, out


def lut_eval(q: float, table: LutTable) -> Tuple[float, Tuple[int, int]]:
    """Angle for a single q with its (input, output) code pair"""
    theta, codes, out = lut_eval_array(np.array([q]), table)
    return float(theta[0]), (int(codes[0]), int(out[0]))


def error_bound(table: LutTable) -> float:
    """Half an output step plus the arctan slope times half an input step"""
    return 0.5 * table.output_step + np.sqrt(2.0) * abs(table.gamma) * 0.5 * table.input_step


def max_angle_error(table: LutTable, oversample: int = 8) -> float:
    """Sweep every input code interval and compare with the exact angle"""
    offsets = (np.arange(oversample) / oversample - 0.5) * table.input_step
    worst = 0.0
    centers = table.code_centers()
    for off in offsets:
        q = centers + off
        theta = table.entries * table.output_step
        worst = max(worst, float(np.max(np.abs(theta - exact_theta(q, table.gamma)))))
    return worst


def is_monotone(table: LutTable) -> bool:
    return bool(np.all(np.diff(table.entries) >= 0))


def export_table_csv(table: LutTable, path: Union[str, Path]):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['input_code', 'q_center', 'output_code', 'theta'])
        for code, q, out in zip(table.input_codes(), table.code_centers(), table.entries):
            writer.writerow([int(code), repr(float(q)), int(out), repr(float(out * table.output_step))])


@dataclass(frozen=True)
class LatencyStage:
    name: str
    duration_ns: float
    cycles: Optional[float] = None
    period_ns: Optional[float] = None

    @classmethod
    def from_cycles(cls, name: str, cycles: float, period_ns: float) -> 'LatencyStage':
        return cls(name, cycles * period_ns, cycles, period_ns)


@dataclass(frozen=True)
class LatencyBudget:
    stages: Tuple[LatencyStage, ...]

    def __post_init__(self):
        for stage in self.stages:
            if stage.duration_ns <= 0:
                raise ValueError(f"stage '{stage.name}' must have a positive duration")


def default_latency_budget() -> LatencyBudget:
    """Board latency split: converters at 3 GHz, lookup in one fabric cycle"""
    return LatencyBudget((
        LatencyStage.from_cycles('adc_pipeline', 7.5, SAMPLING_PERIOD_NS),
        LatencyStage.from_cycles('lut', 1, PROCESSING_PERIOD_NS),
        LatencyStage.from_cycles('dac_pipeline', 4.5, SAMPLING_PERIOD_NS),
        LatencyStage('deserialization_and_fabric', 20.13),
    ))


def latency_report(budget: LatencyBudget) -> Dict:
    """Total latency, per-stage table and the equivalent free-space delay"""
    total = float(sum(stage.duration_ns for stage in budget.stages))
    stages: List[Dict] = []
    for stage in budget.stages:
        stages.append({
            'name': stage.name,
            'cycles': stage.cycles,
            'period_ns': stage.period_ns,
            'duration_ns': round(stage.duration_ns, 6),
        })
    delay_m = total * 1e-9 * SPEED_OF_LIGHT
    return {
        'total_ns': round(total, 6),
        'optical_delay_m': round(delay_m, 4),
        'stages': stages,
        'note': f"{total:.1f} ns of processing needs about {delay_m:.0f} m of optical delay",
    }
