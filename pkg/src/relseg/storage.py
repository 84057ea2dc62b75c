"""On-disk formats: raw array files, dataset directories, manifests.

Array file layout (documented in docs/formats.md): an 8-byte header of
little-endian fields (uint8 dtype code, uint8 ndim, 3 x uint16 dims), then
the raw C-order payload. dtype codes: 0 = float32, 1 = uint8.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import FormatError
from .phantom import LabeledSample

_HEADER = struct.Struct("<BBHHH")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.uint8)}


def write_array(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 3:
        raise FormatError(f"unsupported ndim {arr.ndim}")
    dims = list(arr.shape) + [0] * (3 - arr.ndim)
    if max(dims) > 0xFFFF:
        raise FormatError("dimension exceeds uint16 range")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_DTYPE_CODES[arr.dtype], arr.ndim, *dims))
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        code, ndim, d0, d1, d2 = _HEADER.unpack(header)
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        if ndim < 1 or ndim > 3:
            raise FormatError(f"{path}: bad ndim {ndim}")
        shape = (d0, d1, d2)[:ndim]
        dtype = _CODE_DTYPES[code]
        payload = fh.read()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- dataset directories -------------------------------------------------------
# step directory:  manifest.json + samples/NNNNN.img.bin / NNNNN.msk.bin,
# grouped per split under the "splits" manifest key.

def write_split(step_dir, split: str, samples: Sequence[LabeledSample]) -> List[dict]:
    sample_dir = Path(step_dir) / split
    sample_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, s in enumerate(samples):
        img_name = f"{i:05d}.img.bin"
        msk_name = f"{i:05d}.msk.bin"
        write_array(sample_dir / img_name, s.image.astype(np.float32))
        write_array(sample_dir / msk_name, s.label.astype(np.uint8))
        index.append(
            {
                "image": f"{split}/{img_name}",
                "mask": f"{split}/{msk_name}",
                "class_id": s.class_id,
                "scale_id": s.scale_id,
                "scene_seed": s.scene_seed,
            }
        )
    return index


def read_split(step_dir, manifest: dict, split: str) -> List[LabeledSample]:
    step_dir = Path(step_dir)
    out = []
    for rec in manifest["splits"][split]:
        out.append(
            LabeledSample(
                image=read_array(step_dir / rec["image"]),
                label=read_array(step_dir / rec["mask"]),
                class_id=int(rec["class_id"]),
                scale_id=int(rec["scale_id"]),
                scene_seed=int(rec["scene_seed"]),
            )
        )
    return out


class StepData:
    """One step's datasets plus manifest metadata."""

    def __init__(self, step_id: int, classes: List[dict], splits: Dict[str, List[LabeledSample]],
                 manifest: dict):
        self.step_id = step_id
        self.classes = classes
        self.splits = splits
        self.manifest = manifest

    @property
    def class_ids(self) -> List[int]:
        return [c["id"] for c in self.classes]

    @classmethod
    def load(cls, step_dir) -> "StepData":
        step_dir = Path(step_dir)
        manifest = read_json(step_dir / "manifest.json")
        splits = {
            name: read_split(step_dir, manifest, name) for name in manifest["splits"]
        }
        return cls(
            step_id=int(manifest["step"]),
            classes=manifest["classes"],
            splits=splits,
            manifest=manifest,
        )


def load_dataset(root) -> List[StepData]:
    """Load every stepN/ directory under a dataset root, ordered by step."""
    root = Path(root)
    step_dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and p.name.startswith("step")),
        key=lambda p: int(p.name.replace("step", "")),
    )
    if not step_dirs:
        raise FormatError(f"{root}: no step directories found")
    return [StepData.load(p) for p in step_dirs]
