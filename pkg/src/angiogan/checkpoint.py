"""Name -> float32 array archives (zip of .npy members plus manifest.json).

Member timestamps are fixed so identical contents give identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST = "manifest.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path, arrays: Mapping[str, np.ndarray], manifest: Mapping | None = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr(_member(MANIFEST), json.dumps(dict(manifest or {}), sort_keys=True, indent=1))
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                zf.writestr(_member(name + ".npy"), buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write archive {path}: {exc}") from exc
    return path


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"archive not found: {path}")
    arrays: dict[str, np.ndarray] = {}
    manifest: dict = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                raw = zf.read(name)
                if name == MANIFEST:
                    manifest = json.loads(raw.decode("utf-8"))
                elif name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False)
    except zipfile.BadZipFile as exc:
        raise OSError(f"{path} is not a valid archive: {exc}") from exc
    return arrays, manifest


def module_arrays(module, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}.{name}": p.data for name, p in module.named_parameters()}
    out.update({f"{prefix}.{name}": b for name, b in module.named_buffers()})
    return out


def load_module_arrays(module, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
    """Restore parameters and buffers; names and shapes must match exactly."""
    for name, p in module.named_parameters():
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint is missing {key}")
        value = arrays[key]
        if value.shape != p.shape:
            raise ValueError(f"{key}: checkpoint shape {value.shape} != model shape {p.shape}")
        p.data = value.astype(np.float32)
    for name, _ in list(module.named_buffers()):
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint is missing {key}")
        module.load_buffer(name, arrays[key])
