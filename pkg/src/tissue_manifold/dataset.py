"""Patch manifests with patient survival metadata, batching, and a synthetic texture cohort."""

from __future__ import annotations

import csv
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["patch_id", "patient_id", "cohort", "file_path", "survival_months",
                    "event_observed", "width", "height"]
COHORTS = ("NKI", "VGH", "SYNTH")
SURVIVAL_THRESHOLD_MONTHS = 60.0
TEXTURES = {1: "blob", 2: "stripe", 3: "checker"}
RISK_TEXTURE = 3


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    cohort: str
    survival_months: float
    event_observed: bool

    def high_risk(self, threshold: float = SURVIVAL_THRESHOLD_MONTHS) -> bool:
        # exactly-threshold survival counts as the short (high-risk) group
        return self.survival_months <= threshold


@dataclass(frozen=True)
class TissuePatch:
    patch_id: str
    patient_id: str
    file_path: str
    width: int
    height: int


@dataclass
class CohortManifest:
    patches: list[TissuePatch]
    patients: list[PatientRecord]
    resolution: int
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self._patients = {p.patient_id: p for p in self.patients}
        self._patch_index = {p.patch_id: p for p in self.patches}

    def patient(self, patient_id: str) -> PatientRecord:
        return self._patients[patient_id]

    def patient_of(self, patch_id: str) -> PatientRecord:
        return self._patients[self.patch(patch_id).patient_id]

    def patch(self, patch_id: str) -> TissuePatch:
        return self._patch_index[patch_id]

    def resolve(self, patch: TissuePatch) -> Path:
        path = Path(patch.file_path)
        return path if path.is_absolute() else self.root / path

    def cohort_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for p in self.patients:
            counts[p.cohort] = counts.get(p.cohort, 0) + 1
        return counts

    def survival_groups(self, threshold: float = SURVIVAL_THRESHOLD_MONTHS,
                        cohort: str | None = None) -> dict[str, int]:
        groups = {"gt5": 0, "le5": 0}
        for p in self.patients:
            if cohort is None or p.cohort == cohort:
                groups["le5" if p.high_risk(threshold) else "gt5"] += 1
        return groups

    def __len__(self) -> int:
        return len(self.patches)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "t"):
        return True
    if t in ("0", "false", "no", "f"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_manifest(path: str | os.PathLike) -> CohortManifest:
    """Parse and validate a manifest CSV. Relative file paths resolve against its directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        rows = list(reader)

    problems: list[str] = []
    patches: list[TissuePatch] = []
    patients: dict[str, PatientRecord] = {}
    seen_patch: set[str] = set()
    for lineno, row in enumerate(rows, start=2):
        if not (row["patient_id"] or "").strip():
            problems.append(f"line {lineno} ({row.get('patch_id')}): patch references no patient")
            continue
        try:
            rec = PatientRecord(row["patient_id"], row["cohort"], float(row["survival_months"]),
                                _parse_bool(row["event_observed"]))
            patch = TissuePatch(row["patch_id"], row["patient_id"], row["file_path"],
                                int(row["width"]), int(row["height"]))
        except (ValueError, TypeError) as exc:
            problems.append(f"line {lineno} ({row.get('patch_id')}): {exc}")
            continue
        if rec.cohort not in COHORTS:
            problems.append(f"line {lineno} ({patch.patch_id}): unknown cohort {rec.cohort!r}")
        if not rec.survival_months >= 0:
            problems.append(f"line {lineno} ({patch.patch_id}): negative survival time")
        if patch.patch_id in seen_patch:
            problems.append(f"line {lineno}: duplicate patch_id {patch.patch_id}")
        seen_patch.add(patch.patch_id)
        prev = patients.setdefault(rec.patient_id, rec)
        if prev != rec:
            problems.append(f"line {lineno} ({patch.patch_id}): conflicting metadata for patient {rec.patient_id}")
        patches.append(patch)

    sizes = {(p.width, p.height) for p in patches}
    if len(sizes) > 1:
        first = patches[0]
        for lineno, p in enumerate(patches, start=2):
            if (p.width, p.height) != (first.width, first.height):
                problems.append(f"line {lineno} ({p.patch_id}): size {p.width}x{p.height} "
                                f"differs from {first.width}x{first.height}")
    for p in patches:
        if p.width != p.height:
            problems.append(f"patch {p.patch_id}: non-square {p.width}x{p.height}")
    if problems:
        raise ManifestError(f"{path}: invalid manifest\n  " + "\n  ".join(problems))
    if not patches:
        raise ManifestError(f"{path}: manifest has no patches")

    manifest = CohortManifest(patches, list(patients.values()), patches[0].width, root=path.parent)
    log.info("loaded %d patches from %s; cohorts %s; survival groups %s", len(patches), path,
             manifest.cohort_counts(), manifest.survival_groups())
    return manifest


def validate_manifest(manifest: CohortManifest) -> None:
    """Referential integrity for manifests built in memory."""
    known = {p.patient_id for p in manifest.patients}
    if len(known) != len(manifest.patients):
        raise ManifestError("duplicate patient_id in manifest")
    dangling = [p.patch_id for p in manifest.patches if p.patient_id not in known]
    if dangling:
        raise ManifestError(f"patches reference unknown patients: {dangling}")
    wrong = [p.patch_id for p in manifest.patches
             if (p.width, p.height) != (manifest.resolution, manifest.resolution)]
    if wrong:
        raise ManifestError(f"patches with resolution other than {manifest.resolution}: {wrong}")


def write_manifest(manifest: CohortManifest, path: str | os.PathLike) -> None:
    validate_manifest(manifest)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for p in manifest.patches:
            rec = manifest.patient(p.patient_id)
            writer.writerow([p.patch_id, p.patient_id, rec.cohort, p.file_path,
                             repr(float(rec.survival_months)), int(rec.event_observed),
                             p.width, p.height])


# ---------------------------------------------------------------- images


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """8-bit RGB ``(H, W, 3)`` -> float32 in [0, 1]."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {raw.shape}")
    return raw.astype(np.float32) / np.float32(255.0)


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an ``(H, W, 3)`` image; floats are taken to be in [0, 1]."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------- shuffling

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def shuffled_indices(n: int, seed: int, epoch: int = 0) -> list[int]:
    """Fisher-Yates permutation of range(n) driven by SplitMix64 seeded with (seed, epoch).

    Bounded draws use rejection sampling so the permutation is exactly uniform and
    identical on every platform.
    """
    state = ((seed & 0xFFFFFFFF) << 32 | (epoch & 0xFFFFFFFF)) & _MASK64
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        bound = i + 1
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            state, r = splitmix64(state)
            if r < limit:
                break
        j = r % bound
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Index batches for one epoch; the trailing short batch is dropped."""
    order = shuffled_indices(n, seed, epoch)
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


class BatchStream:
    """Iterable of ``(images, patch_ids)``; images are float32 ``(B, H, W, 3)``.

    Undecodable or wrongly sized files are skipped with a warning and counted in
    ``skipped``; the batch is then shorter. With ``prefetch > 0`` decoding runs in a
    background thread through a bounded queue; delivery order is unaffected.
    """

    def __init__(self, manifest: CohortManifest, batch_size: int, seed: int, epochs: int = 1,
                 start_batch: int = 0, prefetch: int = 0):
        if batch_size < 1 or batch_size > len(manifest):
            raise ValueError(f"batch_size must be in [1, {len(manifest)}], got {batch_size}")
        if epochs < 1:
            raise ValueError("epochs must be positive")
        self.manifest = manifest
        self.batch_size = batch_size
        self.seed = seed
        self.epochs = epochs
        self.start_batch = start_batch
        self.prefetch = prefetch
        self.skipped: list[str] = []

    @property
    def batches_per_epoch(self) -> int:
        return len(self.manifest) // self.batch_size

    def _index_batches(self) -> Iterator[list[int]]:
        per = self.batches_per_epoch
        epoch, offset = divmod(self.start_batch, per)
        for e in range(epoch, self.epochs):
            for b in epoch_batches(len(self.manifest), self.batch_size, self.seed, e)[offset:]:
                yield b
            offset = 0

    def _decode(self, indices: list[int]) -> tuple[np.ndarray, list[str]]:
        images, ids = [], []
        res = self.manifest.resolution
        for i in indices:
            patch = self.manifest.patches[i]
            try:
                img = load_image(self.manifest.resolve(patch))
                if img.shape != (res, res, 3):
                    raise ValueError(f"decoded size {img.shape} != ({res}, {res}, 3)")
            except (OSError, ValueError) as exc:
                log.warning("skipping patch %s: %s", patch.patch_id, exc)
                self.skipped.append(patch.patch_id)
                continue
            images.append(normalize_image(img))
            ids.append(patch.patch_id)
        if images:
            return np.stack(images), ids
        return np.zeros((0, res, res, 3), np.float32), ids

    def __iter__(self) -> Iterator[tuple[np.ndarray, list[str]]]:
        if self.prefetch <= 0:
            for b in self._index_batches():
                yield self._decode(b)
            return
        yield from _prefetched((self._decode(b) for b in self._index_batches()), self.prefetch)


def _prefetched(items: Iterator, capacity: int) -> Iterator:
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in items:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        pass
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
            return
        q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def iterate_batches(manifest: CohortManifest, batch_size: int, seed: int, epochs: int = 1,
                    prefetch: int = 0) -> BatchStream:
    return BatchStream(manifest, batch_size, seed, epochs, prefetch=prefetch)


# ---------------------------------------------------------------- synthetic cohort


def _palette(rng: np.random.Generator, base: tuple[float, float, float]) -> np.ndarray:
    return np.clip(np.asarray(base) + rng.normal(0, 0.04, 3), 0, 1)


def render_texture(kind: int, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """One ``(R, R, 3)`` uint8 texture patch of class ``kind`` (see ``TEXTURES``)."""
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64) / r
    if kind == 1:
        # purple nuclei-like blobs on a pale pink background
        field_ = np.zeros((r, r))
        for _ in range(rng.integers(3, 7)):
            cy, cx = rng.uniform(0, 1, 2)
            s = rng.uniform(0.06, 0.12)
            field_ += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        t = np.clip(field_, 0, 1)[..., None]
        img = (1 - t) * _palette(rng, (0.95, 0.80, 0.88)) + t * _palette(rng, (0.35, 0.15, 0.55))
    elif kind == 2:
        # pink fibrous stripes
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        t = t[..., None]
        img = (1 - t) * _palette(rng, (0.98, 0.70, 0.75)) + t * _palette(rng, (0.75, 0.25, 0.40))
    elif kind == 3:
        # dense dark-blue checker pattern
        cell = rng.uniform(0.12, 0.2)
        oy, ox = rng.uniform(0, cell, 2)
        t = ((np.floor((yy + oy) / cell) + np.floor((xx + ox) / cell)) % 2)[..., None]
        img = (1 - t) * _palette(rng, (0.55, 0.60, 0.85)) + t * _palette(rng, (0.10, 0.10, 0.35))
    else:
        raise ValueError(f"unknown texture class {kind}")
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


@dataclass
class SyntheticCohort:
    manifest: CohortManifest
    texture_of: dict[str, int]
    manifest_path: Path
    labels_path: Path


def make_synthetic_cohort(out_dir: str | os.PathLike, n_patients: int = 20,
                          patches_per_patient: int = 10, resolution: int = 28,
                          seed: int = 0, high_risk_share: float = 0.8,
                          low_risk_share: float = 0.1) -> SyntheticCohort:
    """Write a deterministic 3-texture cohort: PNG patches, ``manifest.csv``, ``texture_labels.csv``.

    The first half of the patients (rounded down) are short-survival. Of those,
    ``round(high_risk_share * n)`` own patches of the risk texture; of the long-survival
    patients ``round(low_risk_share * n)`` do. Risk-texture owners get half their
    patches (rounded up) in that texture; every other patch is blob or stripe.
    """
    if n_patients < 2 or patches_per_patient < 1:
        raise ValueError("need at least 2 patients and 1 patch per patient")
    if resolution % 7:
        raise ValueError(f"resolution {resolution} is not base 7 times a power of two")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_high = n_patients // 2
    n_low = n_patients - n_high
    owners_high = int(round(high_risk_share * n_high))
    owners_low = int(round(low_risk_share * n_low))
    patients, patches, texture_of = [], [], {}
    for i in range(n_patients):
        pid = f"P{i:04d}"
        high = i < n_high
        owner = (i < owners_high) if high else (i - n_high < owners_low)
        months = float(np.round(rng.uniform(6, 60), 1)) if high else float(np.round(rng.uniform(61, 180), 1))
        patients.append(PatientRecord(pid, "SYNTH", months, high))
        n_risk = -(-patches_per_patient // 2) if owner else 0
        kinds = [RISK_TEXTURE] * n_risk
        kinds += [1 + int(k) for k in rng.integers(0, 2, patches_per_patient - n_risk)]
        for j, kind in enumerate(kinds):
            patch_id = f"{pid}_{j:03d}"
            rel = f"images/{patch_id}.png"
            save_image(out / rel, render_texture(kind, resolution, rng))
            patches.append(TissuePatch(patch_id, pid, rel, resolution, resolution))
            texture_of[patch_id] = kind

    manifest = CohortManifest(patches, patients, resolution, root=out)
    manifest_path = out / "manifest.csv"
    labels_path = out / "texture_labels.csv"
    write_manifest(manifest, manifest_path)
    write_labels(labels_path, texture_of)
    return SyntheticCohort(manifest, texture_of, manifest_path, labels_path)


def write_labels(path: str | os.PathLike, labels: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patch_id", "label"])
        for pid, lab in labels.items():
            writer.writerow([pid, int(lab)])


def read_labels(path: str | os.PathLike) -> dict[str, int]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"patch_id", "label"} <= set(reader.fieldnames):
            raise ManifestError(f"{path}: labels file needs columns patch_id,label")
        return {row["patch_id"]: int(row["label"]) for row in reader}
