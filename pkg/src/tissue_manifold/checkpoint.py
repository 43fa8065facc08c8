"""Checkpoint archive format.

A checkpoint is an uncompressed zip archive with four members, always in this order:

``HEADER``
    ASCII ``tissue-manifold-ckpt-v1`` followed by a newline.
``manifest.json``
    ``{"step", "run_id", "profile", "meta", "tensors": [{"key", "dtype", "shape",
    "offset", "nbytes"}, ...]}``. ``dtype`` is a little-endian numpy type string
    (``<f4``, ``<f8``, ``<i8``, ``|u1``); ``offset`` indexes into ``tensors.bin``.
``config.txt``
    Human-readable ``key = value`` snapshot of the training configuration.
``tensors.bin``
    All tensors, row-major, little-endian, concatenated in manifest order.

Tensor keys are module paths: ``mapping.*``, ``generator.*``, ``critic.*``,
``encoder.*`` for parameters and buffers, ``optim.<net>.<index>.<slot>`` for
optimizer moments, ``rng.*`` for generator states. Member timestamps are fixed so
identical state produces identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import GAN, ArchitectureProfile

HEADER = "tissue-manifold-ckpt-v1"
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)
NETWORKS = ("mapping", "generator", "critic", "encoder")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    step: int
    profile: ArchitectureProfile
    tensors: dict[str, np.ndarray]
    run_id: str = ""
    config_text: str = ""
    meta: dict = field(default_factory=dict)

    def network_state(self, name: str) -> dict[str, torch.Tensor]:
        prefix = name + "."
        return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if k.startswith(prefix)}

    def fingerprint(self, *names: str) -> str:
        return tensor_fingerprint({k: v for k, v in self.tensors.items()
                                   if k.split(".", 1)[0] in (names or NETWORKS)})


def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    a = np.asarray(t, order="C")
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def tensor_fingerprint(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        a = _as_numpy(tensors[k])
        h.update(k.encode())
        h.update(a.dtype.str.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def _member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.external_attr = 0o644 << 16
    zf.writestr(info, data, compress_type=zipfile.ZIP_STORED)


def save_checkpoint(path: str | os.PathLike, tensors: dict, step: int,
                    profile: ArchitectureProfile, run_id: str = "", config_text: str = "",
                    meta: dict | None = None) -> Path:
    path = Path(path)
    entries, blob, offset = [], io.BytesIO(), 0
    for key, value in tensors.items():
        a = _as_numpy(value)
        raw = a.tobytes()
        entries.append({"key": key, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blob.write(raw)
        offset += len(raw)
    manifest = {"step": int(step), "run_id": run_id, "profile": profile.to_dict(),
                "meta": meta or {}, "tensors": entries}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _member(zf, "HEADER", (HEADER + "\n").encode())
        _member(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        _member(zf, "config.txt", config_text.encode())
        _member(zf, "tensors.bin", blob.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = zf.read("HEADER").decode().strip()
            if header != HEADER:
                raise CheckpointError(f"{path}: unsupported checkpoint header {header!r}")
            manifest = json.loads(zf.read("manifest.json"))
            config_text = zf.read("config.txt").decode()
            blob = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    tensors = {}
    for e in manifest["tensors"]:
        a = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"])
        tensors[e["key"]] = a
    return Checkpoint(manifest["step"], ArchitectureProfile.from_dict(manifest["profile"]),
                      tensors, manifest.get("run_id", ""), config_text, manifest.get("meta", {}))


def gan_tensors(gan: GAN) -> dict[str, torch.Tensor]:
    out = {}
    for name, module in gan.modules().items():
        for k, v in module.state_dict().items():
            out[f"{name}.{k}"] = v
    return out


def load_gan(ckpt: Checkpoint | str | os.PathLike) -> GAN:
    """Rebuild all networks from a checkpoint (or a path to one), in eval mode."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    gan = GAN.build(ckpt.profile, seed=0)
    for name, module in gan.modules().items():
        module.load_state_dict(ckpt.network_state(name))
    return gan.eval()
