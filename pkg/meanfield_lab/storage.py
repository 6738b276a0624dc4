"""
Artifact storage for experiment runs.
Writes snapshots as CSV, summaries as JSON and a manifest per run.
"""

import csv
import json
import logging
import platform
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import ot
import scipy

from meanfield_lab import __version__
from meanfield_lab.errors import ConfigError
from meanfield_lab.utils import format_timestamp

logger = logging.getLogger(__name__)


def format_float(value: float) -> str:
    """Shortest representation that parses back to the same double."""
    return repr(float(value))


def _coordinate_names(prefix: str, dim: int) -> List[str]:
    if dim == 1:
        return [prefix]
    return [f"{prefix}_{k + 1}" for k in range(dim)]


class SnapshotMetadata:
    """Metadata for one written artifact."""

    def __init__(self, kind: str, file_name: str, time: Optional[float] = None,
                 rows: int = 0, description: Optional[str] = None):
        """
        Initialize snapshot metadata.

        Args:
            kind: Artifact kind (particles, phase_density, moments, hydro, summary ...)
            file_name: Name relative to the output directory
            time: Snapshot time, None for time-independent files
            rows: Number of data rows
            description: Optional note
        """
        self.kind = kind
        self.file_name = file_name
        self.time = time
        self.rows = rows
        self.description = description

    def to_dict(self) -> Dict:
        return {
            'kind': self.kind,
            'file_name': self.file_name,
            'time': self.time,
            'rows': self.rows,
            'description': self.description,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SnapshotMetadata':
        return cls(
            kind=data['kind'],
            file_name=data['file_name'],
            time=data.get('time'),
            rows=data.get('rows', 0),
            description=data.get('description'),
        )


# ---------------------------------------------------------------------------
# CSV writers and readers
# ---------------------------------------------------------------------------


def _write_rows(path: Path, header: Sequence[str], rows) -> int:
    count = 0
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
                count += 1
    except OSError as e:
        raise ConfigError(f"cannot write {path}: {e}", "output") from e
    return count


def _read_rows(path: Path) -> Tuple[List[str], List[List[str]]]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]


def write_particle_snapshot(path, t: float, positions: np.ndarray, velocities: np.ndarray) -> int:
    """
    Write replica states at one time.

    Columns: t, replica, i, x..., v...

    Args:
        path: Target CSV path
        t: Snapshot time
        positions: (M, N, d) positions
        velocities: (M, N, d) velocities

    Returns:
        Number of rows written
    """
    m, n, d = positions.shape
    header = ['t', 'replica', 'i'] + _coordinate_names('x', d) + _coordinate_names('v', d)
    t_text = format_float(t)

    def rows():
        for r in range(m):
            for i in range(n):
                yield ([t_text, str(r), str(i)]
                       + [format_float(c) for c in positions[r, i]]
                       + [format_float(c) for c in velocities[r, i]])

    return _write_rows(Path(path), header, rows())


def read_particle_snapshot(path) -> Tuple[float, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_particle_snapshot`: (t, positions, velocities)."""
    header, rows = _read_rows(Path(path))
    d = (len(header) - 3) // 2
    if not rows:
        raise ValueError(f"{path} holds no particle rows")
    m = max(int(row[1]) for row in rows) + 1
    n = max(int(row[2]) for row in rows) + 1
    positions = np.empty((m, n, d))
    velocities = np.empty((m, n, d))
    for row in rows:
        r, i = int(row[1]), int(row[2])
        positions[r, i] = [float(c) for c in row[3:3 + d]]
        velocities[r, i] = [float(c) for c in row[3 + d:]]
    return float(rows[0][0]), positions, velocities


def write_field_snapshot(path, t: float, x: np.ndarray, columns: Dict[str, np.ndarray]) -> int:
    """
    Write gridded fields at one time.

    Columns: t, x, then one column per entry of ``columns`` in insertion order.
    """
    names = list(columns)
    arrays = [np.asarray(columns[name], dtype=float) for name in names]
    t_text = format_float(t)
    rows = ([t_text, format_float(x[k])] + [format_float(a[k]) for a in arrays]
            for k in range(len(x)))
    return _write_rows(Path(path), ['t', 'x'] + names, rows)


def read_field_snapshot(path) -> Tuple[float, np.ndarray, Dict[str, np.ndarray]]:
    """Inverse of :func:`write_field_snapshot`: (t, x, columns)."""
    header, rows = _read_rows(Path(path))
    data = np.array([[float(c) for c in row] for row in rows]).reshape(len(rows), len(header))
    columns = {name: data[:, k] for k, name in enumerate(header) if k >= 2}
    t = float(data[0, 0]) if len(rows) else 0.0
    return t, data[:, 1], columns


def write_phase_snapshot(path, t: float, x: np.ndarray, v: np.ndarray, values: np.ndarray) -> int:
    """Dense phase density: columns t, x, v, rho, x-major."""
    t_text = format_float(t)
    rows = ([t_text, format_float(x[i]), format_float(v[k]), format_float(values[i, k])]
            for i in range(len(x)) for k in range(len(v)))
    return _write_rows(Path(path), ['t', 'x', 'v', 'rho'], rows)


def read_phase_snapshot(path) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_phase_snapshot`: (t, x, v, values)."""
    _, rows = _read_rows(Path(path))
    data = np.array([[float(c) for c in row] for row in rows])
    x = np.unique(data[:, 1])
    v = np.unique(data[:, 2])
    values = data[:, 3].reshape(len(x), len(v))
    return float(data[0, 0]), x, v, values


def rewrite(path, target) -> None:
    """Re-read a snapshot of any kind and emit it again at ``target``."""
    header, _ = _read_rows(Path(path))
    if header[:3] == ['t', 'replica', 'i']:
        t, xs, vs = read_particle_snapshot(path)
        write_particle_snapshot(target, t, xs, vs)
    elif header == ['t', 'x', 'v', 'rho']:
        t, x, v, values = read_phase_snapshot(path)
        write_phase_snapshot(target, t, x, v, values)
    else:
        t, x, columns = read_field_snapshot(path)
        write_field_snapshot(target, t, x, columns)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(path, data: Dict) -> None:
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(_jsonable(data), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write('\n')
    except OSError as e:
        raise ConfigError(f"cannot write {path}: {e}", "output") from e


def read_json(path) -> Dict:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def read_manifest(path) -> Tuple[Dict, List[SnapshotMetadata]]:
    """
    Read a run manifest.

    Returns:
        Tuple (manifest dict, artifact entries)

    Raises:
        ConfigError: An artifact entry lacks its kind or file name
    """
    manifest = read_json(path)
    try:
        artifacts = [SnapshotMetadata.from_dict(entry) for entry in manifest.get('artifacts', [])]
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed artifact entry in {path}: {e}", "output") from e
    return manifest, artifacts


def library_versions() -> Dict[str, str]:
    """Versions recorded in every manifest."""
    return {
        'meanfield_lab': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pot': ot.__version__,
    }


class ArtifactStore:
    """Manages the files of one experiment run."""

    def __init__(self, output_dir):
        """
        Initialize artifact storage.

        Args:
            output_dir: Directory receiving all artifacts
        """
        self.output_dir = Path(output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create {self.output_dir}: {e}", "output") from e
        self.entries: List[SnapshotMetadata] = []
        logger.info(f"Artifact storage initialized at {self.output_dir}")

    def _record(self, kind: str, name: str, time: Optional[float], rows: int,
                description: Optional[str] = None) -> Path:
        self.entries.append(SnapshotMetadata(kind, name, time, rows, description))
        logger.debug(f"Wrote {kind} artifact {name} ({rows} rows)")
        return self.output_dir / name

    @staticmethod
    def snapshot_name(kind: str, index: int, t: float) -> str:
        return f"{kind}_{index:04d}_t{t:.6g}.csv"

    def particles(self, index: int, t: float, positions, velocities) -> Path:
        name = self.snapshot_name('particles', index, t)
        rows = write_particle_snapshot(self.output_dir / name, t, positions, velocities)
        return self._record('particles', name, t, rows)

    def fields(self, kind: str, index: int, t: float, x, columns: Dict[str, np.ndarray]) -> Path:
        name = self.snapshot_name(kind, index, t)
        rows = write_field_snapshot(self.output_dir / name, t, x, columns)
        return self._record(kind, name, t, rows)

    def phase(self, index: int, t: float, x, v, values) -> Path:
        name = self.snapshot_name('phase_density', index, t)
        rows = write_phase_snapshot(self.output_dir / name, t, x, v, values)
        return self._record('phase_density', name, t, rows)

    def json(self, name: str, data: Dict, kind: str = 'summary') -> Path:
        write_json(self.output_dir / name, data)
        return self._record(kind, name, None, 0)

    def write_manifest(self, config_hash: str, seed: int, experiment: str,
                       extra: Optional[Dict] = None) -> Path:
        """Manifest with config hash, seed, versions and the artifact list; only file with a timestamp."""
        manifest = {
            'config_sha256': config_hash,
            'seed': seed,
            'experiment': experiment,
            'versions': library_versions(),
            'created_at': format_timestamp(),
            'artifacts': [e.to_dict() for e in self.entries],
        }
        if extra:
            manifest.update(extra)
        path = self.output_dir / 'manifest.json'
        write_json(path, manifest)
        logger.info(f"Manifest written to {path} with {len(self.entries)} artifact(s)")
        return path
