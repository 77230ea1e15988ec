"""Field dumps: raw little-endian float64 arrays with a JSON sidecar."""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .logging_utils import get_logger

logger = get_logger(__name__)

FORMAT_VERSION = 1
DTYPE = "<f8"
ORDER = "lexicographic, last axis fastest"


@dataclass
class FieldDump:
    """A named stack of torus fields plus free-form metadata."""

    d: int
    N: int
    components: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)

    def sidecar(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "d": self.d,
            "N": self.N,
            "components": list(self.components),
            "dtype": "f64le",
            "order": ORDER,
            **self.metadata,
        }


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def raw_path(path: Path) -> Path:
    return path.with_suffix(".f64")


def write_field_dump(dump: FieldDump, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.f64`` and ``<path>.json``; return both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shape = (dump.N,) * dump.d
    arrays = []
    for name, values in dump.components.items():
        values = np.asarray(values)
        if values.shape != shape:
            raise ValueError(
                f"Component '{name}' has shape {values.shape}, expected {shape}"
            )
        arrays.append(values.astype(DTYPE, copy=False).ravel())

    raw = raw_path(path)
    side = sidecar_path(path)
    if arrays:
        np.concatenate(arrays).tofile(raw)
    else:
        raw.write_bytes(b"")
    side.write_text(json.dumps(dump.sidecar(), indent=2, sort_keys=True) + "\n")
    logger.debug(f"Wrote field dump {raw.name} ({len(arrays)} components)")
    return raw, side


def read_field_dump(path: str | Path) -> FieldDump:
    """Read a dump written by :func:`write_field_dump`."""
    path = Path(path)
    side = sidecar_path(path)
    raw = raw_path(path)
    if not side.exists():
        raise FileNotFoundError(f"Field dump sidecar not found: {side}")
    if not raw.exists():
        raise FileNotFoundError(f"Field dump data not found: {raw}")

    meta = json.loads(side.read_text())
    version = meta.pop("format_version", None)
    if version != FORMAT_VERSION:
        raise ValueError(
            f"Unsupported field dump format_version {version} in {side} "
            f"(expected {FORMAT_VERSION})"
        )
    if meta.pop("dtype", None) != "f64le":
        raise ValueError(f"Unsupported dtype in {side}")
    meta.pop("order", None)

    d = int(meta.pop("d"))
    N = int(meta.pop("N"))
    names = list(meta.pop("components"))
    data = np.fromfile(raw, dtype=DTYPE)
    size = N**d
    if data.size != size * len(names):
        raise ValueError(
            f"{raw} holds {data.size} values, expected {size * len(names)}"
        )

    components = {
        name: data[i * size : (i + 1) * size].astype(np.float64).reshape((N,) * d)
        for i, name in enumerate(names)
    }
    return FieldDump(d=d, N=N, components=components, metadata=meta)


def content_hash(*arrays: np.ndarray, extra: str = "") -> str:
    """sha256 over the little-endian bytes of ``arrays`` and an optional tag."""
    digest = hashlib.sha256(extra.encode())
    for array in arrays:
        digest.update(np.ascontiguousarray(array, dtype=DTYPE).tobytes())
    return digest.hexdigest()


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
