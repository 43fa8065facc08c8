"""Corpus encoding, reconstruction, 2-D reduction, interpolation and survival enrichment."""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, load_gan
from .dataset import SURVIVAL_THRESHOLD_MONTHS, CohortManifest, load_image, normalize_image
from .gmm import ClusterModel, assign_clusters, fit_gmm
from .networks import GAN, generate

log = logging.getLogger(__name__)

CORPUS_MAGIC = b"TMCORPUS"
CORPUS_VERSION = 1
ENRICHED_RATIO = 2.0
ENRICHED_MIN_PCT = 10.0


class FingerprintMismatch(ValueError):
    pass


# ------------------------------------------------------------------ corpus


@dataclass
class LatentCorpus:
    rows: np.ndarray              # (N, dim) float32
    patch_ids: list[str]
    checkpoint_fingerprint: str

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or len(self.rows) != len(self.patch_ids):
            raise ValueError("corpus rows must be (N, dim) and aligned with patch_ids")
        if not np.isfinite(self.rows).all():
            raise ValueError("corpus contains non-finite values")

    def __len__(self) -> int:
        return len(self.patch_ids)

    def save(self, path: str | os.PathLike) -> None:
        """Little-endian layout: magic ``TMCORPUS``; u32 version, N, dim, fingerprint length;
        fingerprint (UTF-8); N*dim float32 row-major; per row a u32 length and UTF-8 patch id."""
        fp = self.checkpoint_fingerprint.encode()
        n, dim = self.rows.shape
        with open(path, "wb") as fh:
            fh.write(CORPUS_MAGIC)
            fh.write(struct.pack("<IIII", CORPUS_VERSION, n, dim, len(fp)))
            fh.write(fp)
            fh.write(self.rows.astype("<f4").tobytes())
            for pid in self.patch_ids:
                b = pid.encode()
                fh.write(struct.pack("<I", len(b)))
                fh.write(b)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LatentCorpus":
        data = Path(path).read_bytes()
        if data[:8] != CORPUS_MAGIC:
            raise ValueError(f"{path}: not a latent corpus file")
        version, n, dim, fplen = struct.unpack_from("<IIII", data, 8)
        if version != CORPUS_VERSION:
            raise ValueError(f"{path}: unsupported corpus version {version}")
        off = 24
        fp = data[off:off + fplen].decode()
        off += fplen
        rows = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
        off += 4 * n * dim
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            ids.append(data[off:off + ln].decode())
            off += ln
        return cls(rows.astype(np.float32), ids, fp)


def _resolve_gan(source: GAN | Checkpoint | str | os.PathLike) -> tuple[GAN, Checkpoint | None]:
    if isinstance(source, GAN):
        return source.eval(), None
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    return load_gan(ckpt), ckpt


def _nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)


@torch.no_grad()
def encode_images(gan: GAN, images: np.ndarray) -> np.ndarray:
    """Encode ``(B, R, R, 3)`` images one at a time, so results never depend on batching."""
    x = _nchw(images)
    return np.stack([gan.encoder(x[i:i + 1])[0].numpy() for i in range(len(x))]) if len(x) else \
        np.zeros((0, gan.profile.latent_dim), np.float32)


@torch.no_grad()
def generate_images(gan: GAN, w: np.ndarray | torch.Tensor) -> np.ndarray:
    """Images ``(B, R, R, 3)`` from w ``(B, dim)`` with the same w at every style site."""
    w = torch.as_tensor(np.asarray(w, dtype=np.float32))
    out = [generate(gan.generator, w[i:i + 1])[0] for i in range(len(w))]
    return torch.stack(out).permute(0, 2, 3, 1).numpy()


def encode_corpus(encoder_checkpoint: GAN | Checkpoint | str | os.PathLike,
                  manifest: CohortManifest, batch_size: int = 32) -> LatentCorpus:
    gan, ckpt = _resolve_gan(encoder_checkpoint)
    if gan.profile.base_resolution != manifest.resolution:
        raise ValueError(f"checkpoint resolution {gan.profile.base_resolution} does not match "
                         f"manifest resolution {manifest.resolution}")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    fingerprint = ckpt.fingerprint("encoder") if ckpt is not None else ""
    rows, ids = [], []
    for start in range(0, len(manifest), batch_size):
        chunk = manifest.patches[start:start + batch_size]
        imgs = []
        for p in chunk:
            try:
                imgs.append(normalize_image(load_image(manifest.resolve(p))))
                ids.append(p.patch_id)
            except (OSError, ValueError) as exc:
                log.warning("skipping patch %s: %s", p.patch_id, exc)
        if imgs:
            rows.append(encode_images(gan, np.stack(imgs)))
    data = np.concatenate(rows) if rows else np.zeros((0, gan.profile.latent_dim), np.float32)
    return LatentCorpus(data, ids, fingerprint)


def reconstruct(encoder_checkpoint: Checkpoint | str | os.PathLike,
                generator_checkpoint: Checkpoint | str | os.PathLike,
                x: np.ndarray, allow_mismatch: bool = False) -> np.ndarray:
    """G(E(x)) for ``(B, R, R, 3)`` images in [0, 1].

    Both checkpoints must come from the same training run unless ``allow_mismatch``.
    """
    enc_ckpt = encoder_checkpoint if isinstance(encoder_checkpoint, Checkpoint) else load_checkpoint(encoder_checkpoint)
    gen_ckpt = generator_checkpoint if isinstance(generator_checkpoint, Checkpoint) else load_checkpoint(generator_checkpoint)
    if enc_ckpt.run_id != gen_ckpt.run_id and not allow_mismatch:
        raise FingerprintMismatch(f"encoder run {enc_ckpt.run_id!r} and generator run "
                                  f"{gen_ckpt.run_id!r} differ; pass allow_mismatch to override")
    enc = load_gan(enc_ckpt)
    gen = enc if gen_ckpt is enc_ckpt else load_gan(gen_ckpt)
    return reconstruct_with(enc, gen, x)


def reconstruct_with(encoder_gan: GAN, generator_gan: GAN, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    r = encoder_gan.profile.base_resolution
    if x.ndim != 4 or x.shape[1:] != (r, r, 3):
        raise ValueError(f"expected images of shape (B, {r}, {r}, 3), got {x.shape}")
    return generate_images(generator_gan, encode_images(encoder_gan, x))


# ------------------------------------------------------------------ reduction / clustering


def pca_2d(data: np.ndarray) -> np.ndarray:
    """Project onto the top-2 eigenvectors of the sample covariance.

    Each axis is sign-fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(data, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    signs = np.sign(top[np.abs(top).argmax(axis=0), np.arange(top.shape[1])])
    top = top * np.where(signs == 0, 1.0, signs)
    return centered @ top


def reduce_to_2d(corpus: LatentCorpus | np.ndarray, method: str = "pca", seed: int = 0,
                 reducer: Callable[[np.ndarray], np.ndarray] | None = None, **params) -> np.ndarray:
    """N x d -> N x 2. ``umap`` uses ``reducer`` if given, else the ``umap`` package."""
    data = corpus.rows if isinstance(corpus, LatentCorpus) else np.asarray(corpus)
    if data.ndim != 2 or len(data) < 3:
        raise ValueError(f"need at least 3 points to reduce, got shape {data.shape}")
    if method == "pca":
        out = pca_2d(data)
    elif method == "umap":
        if reducer is None:
            try:
                import umap  # optional
            except ImportError as exc:
                raise RuntimeError("method 'umap' needs the umap-learn package or an explicit reducer") from exc
            reducer = umap.UMAP(n_components=2, random_state=seed, **params).fit_transform
        out = np.asarray(reducer(np.asarray(data, dtype=np.float64)))
    else:
        raise ValueError(f"unknown reduction method {method!r}")
    if out.shape != (len(data), 2) or not np.isfinite(out).all():
        raise ValueError(f"reducer returned shape {out.shape}; expected ({len(data)}, 2) finite values")
    return out


@dataclass
class Clustering:
    embedding: np.ndarray
    model: ClusterModel
    labels: np.ndarray
    responsibilities: np.ndarray


def cluster_corpus(corpus: LatentCorpus, k: int = 100, method: str = "pca", seed: int = 0,
                   raw: bool = False, **gmm_kwargs) -> Clustering:
    """Reduce to 2-D then fit a k-component GMM; ``raw`` clusters the full latent rows instead."""
    embedding = reduce_to_2d(corpus, method=method, seed=seed)
    space = corpus.rows.astype(np.float64) if raw else embedding
    model = fit_gmm(space, k, seed=seed, **gmm_kwargs)
    labels, resp = assign_clusters(model, space)
    return Clustering(embedding, model, labels, resp)


# ------------------------------------------------------------------ interpolation


def interpolate_linear(w_a: np.ndarray, w_b: np.ndarray, n_points: int = 10) -> np.ndarray:
    """``n_points`` equally spaced latents from ``w_a`` to ``w_b`` inclusive."""
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    if w_a.shape != w_b.shape:
        raise ValueError(f"endpoint shapes differ: {w_a.shape} vs {w_b.shape}")
    if n_points < 2:
        raise ValueError(f"n_points must be at least 2, got {n_points}")
    t = np.arange(n_points, dtype=np.float64)[:, None] / (n_points - 1)
    pts = w_a + t * (w_b - w_a)
    pts = np.clip(pts, np.minimum(w_a, w_b), np.maximum(w_a, w_b))
    pts[0], pts[-1] = w_a, w_b
    return pts


def select_cluster_representative(corpus: LatentCorpus, labels: Sequence[int],
                                  cluster_id: int) -> tuple[str, np.ndarray]:
    """Medoid of a cluster in latent space; ties go to the smallest patch_id."""
    labels = np.asarray(labels)
    members = np.flatnonzero(labels == cluster_id)
    if len(members) == 0:
        raise ValueError(f"cluster {cluster_id} has no members")
    pts = corpus.rows[members].astype(np.float64)
    sq = (pts ** 2).sum(axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None] - 2 * pts @ pts.T, 0.0))
    totals = dist.sum(axis=1)
    best = totals.min()
    tied = np.flatnonzero(totals <= best + 1e-9 * max(1.0, abs(best)))
    pick = min(tied, key=lambda i: corpus.patch_ids[members[i]])
    return corpus.patch_ids[members[pick]], corpus.rows[members[pick]].copy()


def extreme_cluster_pairs(model: ClusterModel, labels: np.ndarray, n_pairs: int = 4) -> list[tuple[int, int]]:
    """Occupied cluster pairs ordered by decreasing distance between their means."""
    occupied = sorted(set(int(l) for l in labels))
    pairs = [(a, b) for i, a in enumerate(occupied) for b in occupied[i + 1:]]
    pairs.sort(key=lambda p: -float(np.linalg.norm(model.means[p[0]] - model.means[p[1]])))
    chosen, used = [], set()
    for a, b in pairs:
        if a in used and b in used:
            continue
        chosen.append((a, b))
        used.update((a, b))
        if len(chosen) == n_pairs:
            break
    return chosen


# ------------------------------------------------------------------ survival enrichment


@dataclass
class EnrichmentRow:
    cluster_id: int
    pct_patients_high_risk: float
    pct_patients_low_risk: float
    n_patients_high: int
    n_patients_low: int
    enrichment_ratio: float

    @property
    def highlighted(self) -> bool:
        return self.enrichment_ratio >= ENRICHED_RATIO and self.pct_patients_high_risk >= ENRICHED_MIN_PCT


@dataclass
class EnrichmentReport:
    rows: list[EnrichmentRow]
    group_size_high: int
    group_size_low: int
    threshold_months: float
    cohort: str | None = None

    def row(self, cluster_id: int) -> EnrichmentRow:
        for r in self.rows:
            if r.cluster_id == cluster_id:
                return r
        raise KeyError(cluster_id)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# threshold_months={self.threshold_months:g} cohort={self.cohort or 'all'} "
                     f"group_size_high={self.group_size_high} group_size_low={self.group_size_low}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster_id", "pct_patients_high_risk", "pct_patients_low_risk",
                        "n_patients_high", "n_patients_low", "enrichment_ratio", "highlighted"])
            for r in self.rows:
                w.writerow([r.cluster_id, repr(r.pct_patients_high_risk), repr(r.pct_patients_low_risk),
                            r.n_patients_high, r.n_patients_low, repr(r.enrichment_ratio), int(r.highlighted)])


def read_enrichment_csv(path: str | os.PathLike) -> EnrichmentReport:
    with open(path, newline="") as fh:
        header = fh.readline().lstrip("# ").split()
        meta = dict(item.split("=", 1) for item in header)
        rows = [EnrichmentRow(int(r["cluster_id"]), float(r["pct_patients_high_risk"]),
                              float(r["pct_patients_low_risk"]), int(r["n_patients_high"]),
                              int(r["n_patients_low"]), float(r["enrichment_ratio"]))
                for r in csv.DictReader(fh)]
    cohort = None if meta["cohort"] == "all" else meta["cohort"]
    return EnrichmentReport(rows, int(meta["group_size_high"]), int(meta["group_size_low"]),
                            float(meta["threshold_months"]), cohort)


def _ratio(pct_high: float, pct_low: float) -> float:
    if pct_low > 0:
        return pct_high / pct_low
    return math.inf if pct_high > 0 else math.nan


def survival_enrichment(labels: Mapping[str, int], manifest: CohortManifest,
                        cohort_filter: str | None = None,
                        threshold_months: float = SURVIVAL_THRESHOLD_MONTHS) -> EnrichmentReport:
    """Per cluster, the share of high-risk (survival <= threshold) and low-risk patients
    that own at least one patch in it. Counting is per patient, never per patch."""
    patients = [p for p in manifest.patients if cohort_filter is None or p.cohort == cohort_filter]
    high = {p.patient_id for p in patients if p.high_risk(threshold_months)}
    low = {p.patient_id for p in patients if not p.high_risk(threshold_months)}
    for name, group in (("high-risk", high), ("low-risk", low)):
        if not group:
            raise ValueError(f"{name} survival group is empty"
                             + (f" for cohort {cohort_filter}" if cohort_filter else ""))

    owners: dict[int, set[str]] = {}
    for patch_id, label in labels.items():
        try:
            pid = manifest.patch(patch_id).patient_id
        except KeyError:
            raise ValueError(f"labeled patch {patch_id!r} is not in the manifest") from None
        owners.setdefault(int(label), set()).add(pid)

    rows = []
    for cid in sorted(owners):
        nh = len(owners[cid] & high)
        nl = len(owners[cid] & low)
        ph = 100.0 * nh / len(high)
        pl = 100.0 * nl / len(low)
        rows.append(EnrichmentRow(cid, ph, pl, nh, nl, _ratio(ph, pl)))
    rows.sort(key=lambda r: (math.isnan(r.enrichment_ratio),
                             -r.enrichment_ratio if not math.isnan(r.enrichment_ratio) else 0.0,
                             r.cluster_id))
    return EnrichmentReport(rows, len(high), len(low), threshold_months, cohort_filter)
