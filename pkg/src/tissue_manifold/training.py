"""Alternating critic / generator / encoder optimization with style mixing.

Each step runs, in order: a critic update on real vs generated images, a
generator + mapping update (style-mixed with probability ``mixing_probability``),
and, only when that generator update did not mix styles, an encoder update on the
generated images and the latents that produced them.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import shutil
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, gan_tensors, load_checkpoint, save_checkpoint
from .dataset import BatchStream, CohortManifest
from .latent import draw_crossover, make_style_schedule, sample_z
from .losses import LossValue, loss_discriminator, loss_encoder, loss_generator
from .networks import GAN, PROFILES, TOY_PROFILE, ArchitectureProfile

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "loss_dis", "loss_gen", "loss_enc", "mixing_used"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 2000
    lr_generator: float = 1e-4
    lr_critic: float = 1e-4
    lr_encoder: float = 1e-4
    mapping_lr_scale: float = 0.01
    betas_generator: tuple[float, float] = (0.5, 0.999)
    betas_critic: tuple[float, float] = (0.5, 0.999)
    betas_encoder: tuple[float, float] = (0.5, 0.999)
    mixing_probability: float = 0.5
    seed: int = 0
    profile: ArchitectureProfile = TOY_PROFILE
    checkpoint_every: int = 500
    prefetch: int = 4

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, total_steps and checkpoint_every must be positive")
        if not 0.0 <= self.mixing_probability <= 1.0:
            raise ValueError(f"mixing_probability must be in [0, 1], got {self.mixing_probability}")
        if min(self.lr_generator, self.lr_critic, self.lr_encoder, self.mapping_lr_scale) <= 0:
            raise ValueError("learning rates must be positive")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "profile":
                for k, pv in v.to_dict().items():
                    lines.append(f"profile.{k} = {pv}")
            else:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def run_id(self) -> str:
        # total_steps excluded: extending a run keeps its identity
        text = self.to_text()
        text = "\n".join(l for l in text.splitlines() if not l.startswith(("total_steps", "checkpoint_every", "prefetch")))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    step: int
    gan: GAN
    optimizers: dict[str, torch.optim.Optimizer]
    rng: torch.Generator
    encoder_updates: int = 0
    history: list[dict] = field(default_factory=list)


def build_optimizers(gan: GAN, config: TrainConfig) -> dict[str, torch.optim.Optimizer]:
    return {
        "critic": torch.optim.Adam(gan.critic.parameters(), lr=config.lr_critic,
                                   betas=config.betas_critic),
        # the mapping network drifts fast under the generator rate; it gets a scaled-down one
        "generator": torch.optim.Adam(
            [{"params": gan.mapping.parameters(), "lr": config.lr_generator * config.mapping_lr_scale},
             {"params": gan.generator.parameters()}],
            lr=config.lr_generator, betas=config.betas_generator),
        "encoder": torch.optim.Adam(gan.encoder.parameters(), lr=config.lr_encoder,
                                    betas=config.betas_encoder),
    }


def init_state(config: TrainConfig) -> TrainState:
    gan = GAN.build(config.profile, seed=config.seed)
    rng = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(0, gan, build_optimizers(gan, config), rng)


def should_update_encoder(mixing_used: bool) -> bool:
    return not mixing_used


def draw_mixing(rng: torch.Generator, probability: float) -> bool:
    return bool(torch.rand((), generator=rng).item() < probability)


def _set_trainable(gan: GAN, *names: str) -> None:
    for name, module in gan.modules().items():
        module.requires_grad_(name in names)


def _check_finite(loss: LossValue, label: str) -> None:
    if not torch.isfinite(loss.value):
        parts = ", ".join(f"{k}={float(v):.6g}" for k, v in loss.components.items())
        raise FloatingPointError(f"non-finite {label} loss: {parts}")


def discriminator_step(state: TrainState, real: torch.Tensor, config: TrainConfig) -> LossValue:
    gan = state.gan
    _set_trainable(gan, "critic")
    with torch.no_grad():
        z = sample_z(real.shape[0], config.profile.latent_dim, generator=state.rng)
        w = gan.mapping(z)
        styles = make_style_schedule(w, n_sites=gan.generator.n_sites)
        fake = gan.generator(styles)
    loss = loss_discriminator(gan.critic(real), gan.critic(fake))
    _check_finite(loss, "discriminator")
    opt = state.optimizers["critic"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return loss


def generator_step(state: TrainState, real: torch.Tensor, config: TrainConfig):
    """Returns ``(loss, mixing_used, w, fake)``; ``w``/``fake`` are detached."""
    gan = state.gan
    _set_trainable(gan, "mapping", "generator")
    n_sites = gan.generator.n_sites
    batch = real.shape[0]
    z = sample_z(batch, config.profile.latent_dim, generator=state.rng)
    mixing = draw_mixing(state.rng, config.mixing_probability)
    w = gan.mapping(z)
    if mixing:
        z2 = sample_z(batch, config.profile.latent_dim, generator=state.rng)
        crossover = draw_crossover(n_sites, state.rng)
        styles = make_style_schedule(w, gan.mapping(z2), crossover, n_sites)
    else:
        styles = make_style_schedule(w, n_sites=n_sites)
    fake = gan.generator(styles)
    with torch.no_grad():
        logits_real = gan.critic(real)
    loss = loss_generator(logits_real, gan.critic(fake))
    _check_finite(loss, "generator")
    opt = state.optimizers["generator"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return loss, mixing, w.detach(), fake.detach()


def encoder_step(state: TrainState, w: torch.Tensor, fake: torch.Tensor,
                 on_encoder_input: Callable[[torch.Tensor], None] | None = None) -> LossValue:
    """Fit E(G(w)) to w; targets and images are constants here."""
    gan = state.gan
    _set_trainable(gan, "encoder")
    if on_encoder_input is not None:
        on_encoder_input(fake)
    loss = loss_encoder(w, gan.encoder(fake))
    _check_finite(loss, "encoder")
    opt = state.optimizers["encoder"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    state.encoder_updates += 1
    return loss


def train_step(state: TrainState, real_batch: torch.Tensor, config: TrainConfig,
               on_encoder_input: Callable[[torch.Tensor], None] | None = None) -> tuple[TrainState, dict]:
    """One full alternating update. ``real_batch`` is ``(B, 3, R, R)`` in [0, 1]."""
    r = config.profile.base_resolution
    if real_batch.dim() != 4 or tuple(real_batch.shape[1:]) != (3, r, r):
        raise ValueError(f"real batch must be (B, 3, {r}, {r}), got {tuple(real_batch.shape)}")
    for m in state.gan.modules().values():
        m.train()
    try:
        loss_d = discriminator_step(state, real_batch, config)
        loss_g, mixing, w, fake = generator_step(state, real_batch, config)
        loss_e = None
        if should_update_encoder(mixing):
            loss_e = encoder_step(state, w, fake, on_encoder_input)
    except FloatingPointError as exc:
        raise FloatingPointError(f"step {state.step}: {exc}") from exc
    _set_trainable(state.gan, *state.gan.modules())
    state.step += 1
    metrics = {"step": state.step, "loss_dis": loss_d.item(), "loss_gen": loss_g.item(),
               "loss_enc": loss_e.item() if loss_e is not None else math.nan,
               "mixing_used": int(mixing)}
    state.history.append(metrics)
    return state, metrics


# ------------------------------------------------------------------ persistence


def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = gan_tensors(state.gan)
    for name, opt in state.optimizers.items():
        for idx, slots in opt.state_dict()["state"].items():
            for slot, value in slots.items():
                tensors[f"optim.{name}.{idx}.{slot}"] = torch.as_tensor(value)
    tensors["rng.train"] = state.rng.get_state()
    tensors["counters.encoder_updates"] = torch.tensor(state.encoder_updates, dtype=torch.int64)
    return tensors


def save_state(path: str | Path, state: TrainState, config: TrainConfig, meta: dict | None = None) -> Path:
    return save_checkpoint(path, state_tensors(state), state.step, config.profile,
                           run_id=config.run_id(), config_text=config.to_text(), meta=meta)


def restore_state(ckpt: Checkpoint | str | Path, config: TrainConfig) -> TrainState:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.profile != config.profile:
        raise ValueError("checkpoint profile does not match the training config")
    gan = GAN.build(config.profile, seed=config.seed)
    for name, module in gan.modules().items():
        module.load_state_dict(ckpt.network_state(name))
    optimizers = build_optimizers(gan, config)
    for name, opt in optimizers.items():
        sd = opt.state_dict()
        state: dict[int, dict] = {}
        prefix = f"optim.{name}."
        for key, value in ckpt.tensors.items():
            if key.startswith(prefix):
                idx, slot = key[len(prefix):].split(".")
                state.setdefault(int(idx), {})[slot] = torch.from_numpy(value.copy())
        sd["state"] = state
        opt.load_state_dict(sd)
    rng = torch.Generator()
    rng.set_state(torch.from_numpy(ckpt.tensors["rng.train"].copy()))
    enc = int(ckpt.tensors.get("counters.encoder_updates", np.zeros((), np.int64)))
    return TrainState(ckpt.step, gan, optimizers, rng, encoder_updates=enc)


def _append_metrics(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow([r["step"], repr(r["loss_dis"]), repr(r["loss_gen"]),
                             "" if math.isnan(r["loss_enc"]) else repr(r["loss_enc"]),
                             r["mixing_used"]])


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({"step": int(r["step"]), "loss_dis": float(r["loss_dis"]),
                        "loss_gen": float(r["loss_gen"]),
                        "loss_enc": float(r["loss_enc"]) if r["loss_enc"] else math.nan,
                        "mixing_used": int(r["mixing_used"])})
        return out


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.ckpt"


def run_training(config: TrainConfig, manifest: CohortManifest, out_dir: str | Path,
                 resume_from: str | Path | None = None,
                 on_encoder_input: Callable[[torch.Tensor], None] | None = None) -> Path:
    """Train for ``config.total_steps`` steps; returns the path of ``final.ckpt``.

    Batch ``k`` of the run is always the ``k``-th batch of the seeded epoch
    sequence, so a resumed run sees exactly the data an uninterrupted one would.
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    if manifest.resolution != config.profile.base_resolution:
        raise ValueError(f"manifest resolution {manifest.resolution} does not match profile "
                         f"resolution {config.profile.base_resolution}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if resume_from is not None:
        state = restore_state(resume_from, config)
        _truncate_metrics(metrics_path, state.step)
        log.info("resumed from %s at step %d", resume_from, state.step)
    else:
        state = init_state(config)
        if metrics_path.exists():
            metrics_path.unlink()

    stream = BatchStream(manifest, config.batch_size, config.seed,
                         epochs=10 ** 9, start_batch=state.step, prefetch=config.prefetch)
    pending: list[dict] = []
    batches = iter(stream)
    while state.step < config.total_steps:
        images, _ = next(batches)
        if len(images) == 0:
            log.warning("step %d: every image in the batch failed to decode; step skipped", state.step)
            state.step += 1
            continue
        real = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
        state, metrics = train_step(state, real, config, on_encoder_input)
        pending.append(metrics)
        if state.step % config.checkpoint_every == 0 or state.step == config.total_steps:
            _append_metrics(metrics_path, pending)
            pending = []
            meta = {"skipped_images": len(stream.skipped)}
            if state.step % config.checkpoint_every == 0:
                save_state(out / checkpoint_name(state.step), state, config, meta)
            log.info("step %d: dis %.4f gen %.4f enc %.4f", state.step, metrics["loss_dis"],
                     metrics["loss_gen"], metrics["loss_enc"])
    batches.close()
    final = out / "final.ckpt"
    last = out / checkpoint_name(state.step)
    if last.exists():
        shutil.copyfile(last, final)
    else:
        save_state(final, state, config, {"skipped_images": len(stream.skipped)})
    if stream.skipped:
        log.warning("%d images could not be decoded and were skipped", len(stream.skipped))
    return final


# The 28x28 generator drifts too fast at the full-scale rates: an encoder fitted to
# a frozen toy generator loses most of its accuracy after 25 generator updates at
# 1e-4, and hardly any at 1e-5. Slower adversarial updates plus a faster encoder
# keep the inversion target close to stationary between encoder updates.
TOY_LEARNING_RATES = {"lr_generator": 1e-5, "lr_critic": 1e-5, "lr_encoder": 1e-3}
BATCH_SIZE = {"toy": 32, "full": 16}


def preset_config(profile_name: str = "toy", **overrides) -> TrainConfig:
    """Default configuration for a named profile; keyword arguments override fields."""
    if profile_name not in PROFILES:
        raise ValueError(f"unknown profile {profile_name!r}; expected one of {sorted(PROFILES)}")
    values = {"profile": PROFILES[profile_name], "batch_size": BATCH_SIZE[profile_name]}
    if profile_name == "toy":
        values.update(TOY_LEARNING_RATES)
    values.update(overrides)
    return TrainConfig(**values)
