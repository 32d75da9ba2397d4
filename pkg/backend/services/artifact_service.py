"""
Artifact Service
Atomic file writes (temp file + rename), CSV/JSON helpers and the named seed streams.
"""

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from models.errors import ConfigValidationError

PathLike = Union[str, Path]


def derive_seed(root: int, stage: str, *index: Any) -> int:
    """Seed for stream (root, stage, index...) via SHA-256, 63 bits."""
    key = "/".join([str(int(root)), stage, *(str(i) for i in index)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text())


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return atomic_write_text(path, buf.getvalue())


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_matrix_csv(path: PathLike, matrix: np.ndarray) -> Path:
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.12g")
    return atomic_write_text(path, buf.getvalue())


def read_matrix_csv(path: PathLike) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def write_npz(path: PathLike, **arrays: np.ndarray) -> Path:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return atomic_write_bytes(path, buf.getvalue())


def require(path: PathLike, stage: str) -> Path:
    """Upstream artifact check: raise naming the stage that produces it."""
    path = Path(path)
    if not path.exists():
        raise ConfigValidationError(f"missing artifact {path}; run `{stage}` first", stage=stage)
    return path
