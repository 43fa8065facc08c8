import hashlib
import math

import numpy as np
import pytest
import torch

from tissue_manifold.checkpoint import load_checkpoint
from tissue_manifold.dataset import BatchStream, CohortManifest
from tissue_manifold.training import (TrainConfig, discriminator_step, draw_mixing,
                                      encoder_step, generator_step, init_state, preset_config,
                                      read_metrics, restore_state, run_training, save_state,
                                      should_update_encoder, train_step)


def config(**kw):
    base = dict(total_steps=200, checkpoint_every=100, prefetch=0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def real_batches(manifest, n, batch_size=32, seed=0):
    out = []
    for images, _ in BatchStream(manifest, batch_size, seed, epochs=100):
        out.append(torch.from_numpy(images).permute(0, 3, 1, 2).contiguous())
        if len(out) == n:
            return out


def digest(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def digests(gan):
    return {name: digest(m) for name, m in gan.modules().items()}


def test_gate_definition():
    assert should_update_encoder(False) is True
    assert should_update_encoder(True) is False


@pytest.mark.parametrize("p,expected", [(0.0, 10_000), (1.0, 0)])
def test_gate_extremes_simulated(p, expected):
    rng = torch.Generator().manual_seed(0)
    assert sum(should_update_encoder(draw_mixing(rng, p)) for _ in range(10_000)) == expected


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mixing_probability=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lr_encoder=0.0)


def test_preset_config():
    toy, full = preset_config("toy"), preset_config("full")
    assert toy.batch_size == 32 and full.batch_size == 16
    assert full.lr_generator == full.lr_critic == full.lr_encoder == 1e-4
    assert toy.profile.base_resolution == 28 and full.profile.base_resolution == 224
    assert preset_config("toy", lr_encoder=0.5).lr_encoder == 0.5
    with pytest.raises(ValueError):
        preset_config("huge")


def test_run_id_ignores_length():
    assert config(total_steps=5).run_id() == config(total_steps=900).run_id()
    assert config(seed=1).run_id() != config(seed=2).run_id()


def test_step_counter_and_metrics(synth_cohort):
    cfg = config()
    state = init_state(cfg)
    (x,) = real_batches(synth_cohort.manifest, 1)
    state, metrics = train_step(state, x, cfg)
    assert state.step == 1 and metrics["step"] == 1
    assert set(metrics) == {"step", "loss_dis", "loss_gen", "loss_enc", "mixing_used"}
    assert math.isnan(metrics["loss_enc"]) == bool(metrics["mixing_used"])


def test_wrong_batch_shape():
    cfg = config()
    with pytest.raises(ValueError):
        train_step(init_state(cfg), torch.zeros(2, 3, 56, 56), cfg)


def test_sub_steps_touch_only_their_networks(synth_cohort):
    cfg = config(mixing_probability=0.0)
    state = init_state(cfg)
    (x,) = real_batches(synth_cohort.manifest, 1)
    before = digests(state.gan)
    discriminator_step(state, x, cfg)
    after_d = digests(state.gan)
    assert [k for k in before if before[k] != after_d[k]] == ["critic"]
    _, mixing, w, fake = generator_step(state, x, cfg)
    after_g = digests(state.gan)
    assert sorted(k for k in before if after_d[k] != after_g[k]) == ["generator", "mapping"]
    encoder_step(state, w, fake)
    after_e = digests(state.gan)
    assert [k for k in before if after_g[k] != after_e[k]] == ["encoder"]


def test_encoder_never_sees_real_images(synth_cohort):
    cfg = config(mixing_probability=0.0)
    state = init_state(cfg)
    batches = real_batches(synth_cohort.manifest, 4)
    seen = []
    for x in batches:
        train_step(state, x, cfg, on_encoder_input=lambda t: seen.append(t.clone()))
    assert len(seen) == 4
    reals = torch.cat(batches).flatten(1)
    for t in seen:
        d = torch.cdist(t.flatten(1), reals)
        assert d.min().item() > 1e-3


@pytest.mark.parametrize("p,expected", [(0.0, 6), (1.0, 0)])
def test_encoder_updates_at_extreme_probabilities(synth_cohort, p, expected):
    cfg = config(mixing_probability=p)
    state = init_state(cfg)
    for x in real_batches(synth_cohort.manifest, 6):
        train_step(state, x, cfg)
    assert state.encoder_updates == expected


def test_non_finite_loss_reports_step(synth_cohort):
    cfg = config()
    state = init_state(cfg)
    with torch.no_grad():
        next(state.gan.critic.parameters()).fill_(float("nan"))
    (x,) = real_batches(synth_cohort.manifest, 1)
    with pytest.raises(FloatingPointError, match="step 0"):
        train_step(state, x, cfg)


def test_state_round_trip(tmp_path, synth_cohort):
    cfg = config()
    state = init_state(cfg)
    for x in real_batches(synth_cohort.manifest, 2):
        train_step(state, x, cfg)
    save_state(tmp_path / "s.ckpt", state, cfg)
    back = restore_state(tmp_path / "s.ckpt", cfg)
    assert back.step == 2 and back.encoder_updates == state.encoder_updates
    assert digests(back.gan) == digests(state.gan)
    assert torch.equal(back.rng.get_state(), state.rng.get_state())


def test_run_training_errors(tmp_path, synth_cohort):
    m = synth_cohort.manifest
    with pytest.raises(ValueError, match="empty"):
        run_training(config(), CohortManifest([], [], 28), tmp_path)
    with pytest.raises(ValueError, match="resolution"):
        run_training(config(), CohortManifest(m.patches, m.patients, 56, m.root), tmp_path)


@pytest.fixture(scope="module")
def short_runs(tmp_path_factory, synth_cohort):
    """A 200-step run, a resume of it from step 100, and a separate 100-step run."""
    root = tmp_path_factory.mktemp("runs")
    cfg = config()
    full = run_training(cfg, synth_cohort.manifest, root / "full")
    resumed = run_training(cfg, synth_cohort.manifest, root / "resumed_dir",
                           resume_from=root / "full" / "ckpt_000100.ckpt")
    short = run_training(config(total_steps=100), synth_cohort.manifest, root / "short")
    return full, resumed, short


def test_checkpoint_schedule(short_runs):
    full, _, _ = short_runs
    names = sorted(p.name for p in full.parent.glob("*.ckpt"))
    assert names == ["ckpt_000100.ckpt", "ckpt_000200.ckpt", "final.ckpt"]
    assert load_checkpoint(full).step == 200
    assert full.read_bytes() == (full.parent / "ckpt_000200.ckpt").read_bytes()
    assert [r["step"] for r in read_metrics(full.parent / "metrics.csv")] == list(range(1, 201))


def test_resume_is_bitwise_identical(short_runs):
    full, resumed, _ = short_runs
    a, b = load_checkpoint(full), load_checkpoint(resumed)
    assert a.tensors.keys() == b.tensors.keys()
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes(), k
    tail = read_metrics(full.parent / "metrics.csv")[100:]
    assert read_metrics(resumed.parent / "metrics.csv") == tail


def test_replay_gives_identical_metrics(short_runs):
    full, _, short = short_runs
    first = read_metrics(full.parent / "metrics.csv")[:100]
    again = read_metrics(short.parent / "metrics.csv")

    def same(r, s):
        return all(r[k] == s[k] or (math.isnan(r[k]) and math.isnan(s[k])) for k in r)

    assert all(same(r, s) for r, s in zip(first, again)) and len(again) == 100


def test_encoder_update_count_matches_log(short_runs):
    full, _, _ = short_runs
    rows = read_metrics(full.parent / "metrics.csv")
    ckpt = load_checkpoint(full)
    updates = int(ckpt.tensors["counters.encoder_updates"])
    assert updates == sum(1 for r in rows if not r["mixing_used"])
    assert updates == sum(1 for r in rows if not math.isnan(r["loss_enc"]))


@pytest.mark.slow
def test_thousand_step_encoder_count(toy_run):
    rows = read_metrics(toy_run.metrics)[:1000]
    count = sum(1 for r in rows if not math.isnan(r["loss_enc"]))
    assert 430 <= count <= 570
