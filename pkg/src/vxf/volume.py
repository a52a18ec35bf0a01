"""Labelled 3D volumes and their header + raw payload file format.

A volume is stored as two files: a UTF-8 JSON header::

    {"extents": [D, H, W], "channels": C, "spacing": [sz, sy, sx],
     "dtype": "f32le", "data_file": "<name>.raw"}

and the payload, ``D*H*W*C`` little-endian float32 values in (z, y, x, c)
row-major order.  ``data_file`` is resolved relative to the header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Volume:
    data: np.ndarray  # [D, H, W, C]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be [D, H, W, C], got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def labels(self) -> np.ndarray:
        """First channel rounded to integer class indices, shape ``[D, H, W]``."""
        return np.rint(self.data[..., 0]).astype(np.int64)


def write_volume(path, volume: Volume) -> Path:
    """Write ``<path>`` (header) and ``<stem>.raw`` (payload); returns the header path."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    raw_name = path.with_suffix(".raw").name
    header = {
        "extents": list(volume.extents),
        "channels": volume.channels,
        "spacing": list(volume.spacing),
        "dtype": "f32le",
        "data_file": raw_name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    (path.parent / raw_name).write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    header = json.loads(path.read_text(encoding="utf-8"))
    if header.get("dtype") != "f32le":
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    extents = tuple(header["extents"])
    channels = int(header["channels"])
    payload = (path.parent / header["data_file"]).read_bytes()
    expected = int(np.prod(extents)) * channels * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(extents + (channels,)).astype(np.float32)
    return Volume(data, tuple(header["spacing"]))
