"""
Run Store Module
Owns a run directory: writes JSON and CSV artifacts, checksums them and
writes the run manifest
"""

import csv
import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy

from version import __version__
from run_config import UNHASHED_KEYS, RunConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


class RunStore:
    """Artifact storage for one command run"""

    def __init__(self, out_dir: Path, replay: bool = False):
        self.out_dir = Path(out_dir)
        self.replay = replay
        self.artifacts: Dict[str, Dict[str, Any]] = {}
        self.timings: Dict[str, float] = {}
        self._ensure_out_dir()
        self._check_previous_manifest()

    def _ensure_out_dir(self):
        """Ensure the run directory exists"""
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _check_previous_manifest(self):
        """Move an unreadable manifest aside so the new run can write its own"""
        path = self.out_dir / MANIFEST_NAME
        if not path.exists():
            return
        try:
            with open(path, 'r', encoding='utf-8') as f:
                json.load(f)
        except json.JSONDecodeError as e:
            logger.warning(f"Previous manifest is unreadable ({e}), moving it to {MANIFEST_NAME}.bak")
            path.replace(path.with_suffix('.json.bak'))

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _register(self, name: str) -> Path:
        path = self.path(name)
        self.artifacts[name] = {'name': name, 'sha256': file_sha256(path), 'bytes': path.stat().st_size}
        logger.debug(f"Artifact {name}: {self.artifacts[name]['sha256'][:12]}")
        return path

    def write_json(self, name: str, data: Any) -> Path:
        with open(self.path(name), 'w', encoding='utf-8', newline='\n') as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write('\n')
        return self._register(name)

    def write_rows(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """CSV with floats written by repr so that values round-trip"""
        with open(self.path(name), 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        return self._register(name)

    def write_dict_rows(self, name: str, rows: List[Dict[str, Any]]) -> Path:
        header = list(rows[0].keys()) if rows else []
        return self.write_rows(name, header, ([r[k] for k in header] for r in rows))

    def add_file(self, name: str) -> Path:
        """Register a file some other writer put into the run directory"""
        return self._register(name)

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[stage] = round(time.perf_counter() - t0, 3)
            logger.info(f"Stage '{stage}' took {self.timings[stage]:.2f}s")

    def manifest(self, command: str, config: RunConfig) -> Dict[str, Any]:
        data = {
            'command': command,
            'config_hash': config.hash(),
            'config': {k: v for k, v in config.data.items() if k not in UNHASHED_KEYS},
            'artifacts': [self.artifacts[k] for k in sorted(self.artifacts)],
            'versions': {
                'package': __version__,
                'python': platform.python_version(),
                'numpy': np.__version__,
                'scipy': scipy.__version__,
            },
        }
        if not self.replay:
            data['timings'] = dict(sorted(self.timings.items()))
        return data

    def write_manifest(self, command: str, config: RunConfig) -> Path:
        """
        Write manifest.json listing every artifact with its checksum

        Returns:
            Path of the manifest
        """
        path = self.path(MANIFEST_NAME)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.manifest(command, config), f, indent=2, sort_keys=True)
            f.write('\n')
        logger.info(f"Wrote manifest with {len(self.artifacts)} artifact(s) to {path}")
        return path


def load_manifest(out_dir: Path) -> Optional[Dict[str, Any]]:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        return None
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
