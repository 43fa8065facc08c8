"""Command-line entry point: ``tissue-manifold <subcommand> ...``.

Every subcommand accepts ``--config FILE``: a flat ``key = value`` file whose keys
are the subcommand's long option names (dashes or underscores). Precedence is
command-line flags, then the config file, then built-in defaults.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("tissue_manifold")


class CommandError(Exception):
    """Validation or runtime failure reported with exit code 1."""


@dataclass
class CommandOutcome:
    exit_code: int
    artifacts_written: list[Path] = field(default_factory=list)
    summary: str = ""


# ------------------------------------------------------------------ helpers


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise CommandError(f"missing required {what}")
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} not found: {p}")
    return p


def _out_dir(path: str) -> Path:
    out = Path(path).resolve()
    if out.exists() and not out.is_dir():
        raise CommandError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"config file not found: {p}")
    values = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(f"{p}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return values


def _write_labels(path: Path, patch_ids, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_id", "label"])
        for pid, lab in zip(patch_ids, labels):
            w.writerow([pid, int(lab)])


def _load_manifest(path: str):
    from .dataset import ManifestError, load_manifest

    try:
        return load_manifest(_require_file(path, "manifest"))
    except ManifestError as exc:
        raise CommandError(str(exc)) from exc


def _load_ckpt(path: str):
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(_require_file(path, "checkpoint"))
    except CheckpointError as exc:
        raise CommandError(str(exc)) from exc


# ------------------------------------------------------------------ subcommands


def cmd_synth_data(args) -> CommandOutcome:
    from .dataset import make_synthetic_cohort

    if args.resolution % 7:
        raise CommandError(f"--resolution must be 7 * 2**n, got {args.resolution}")
    out = _out_dir(args.out)
    cohort = make_synthetic_cohort(out, args.patients, args.per_patient, args.resolution, args.seed)
    files = [cohort.manifest_path, cohort.labels_path] + [out / p.file_path for p in cohort.manifest.patches]
    return CommandOutcome(0, files, f"wrote {len(cohort.manifest)} patches for {args.patients} patients to {out}")


def _train_config(args, profile):
    from .training import preset_config

    given = {"batch_size": args.batch_size, "lr_generator": args.lr_generator,
             "lr_critic": args.lr_critic, "lr_encoder": args.lr_encoder}
    return preset_config(args.profile, total_steps=args.steps, seed=args.seed, profile=profile,
                         mapping_lr_scale=args.mapping_lr_scale,
                         mixing_probability=args.mixing_probability,
                         checkpoint_every=args.checkpoint_every,
                         **{k: v for k, v in given.items() if v is not None})


def cmd_train(args) -> CommandOutcome:
    from dataclasses import replace

    from .networks import PROFILES
    from .training import checkpoint_name, run_training

    manifest = _load_manifest(args.manifest)
    profile = PROFILES[args.profile]
    if args.spectral_norm:
        profile = replace(profile, spectral_norm=True)
    if manifest.resolution != profile.base_resolution:
        raise CommandError(f"manifest resolution {manifest.resolution} does not match profile "
                           f"{args.profile} ({profile.base_resolution})")
    if args.resume:
        _require_file(args.resume, "resume checkpoint")
    try:
        config = _train_config(args, profile)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    out = _out_dir(args.out)
    final = run_training(config, manifest, out, resume_from=args.resume)
    ckpts = [out / checkpoint_name(s) for s in range(config.checkpoint_every, config.total_steps + 1,
                                                     config.checkpoint_every)]
    written = [p for p in ckpts if p.exists()] + [final, out / "metrics.csv"]
    return CommandOutcome(0, written, f"trained to step {config.total_steps}; final checkpoint {final}")


def cmd_encode(args) -> CommandOutcome:
    from .analysis import encode_corpus

    ckpt = _load_ckpt(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    if ckpt.profile.base_resolution != manifest.resolution:
        raise CommandError(f"checkpoint resolution {ckpt.profile.base_resolution} does not match "
                           f"manifest resolution {manifest.resolution}")
    out = _out_dir(args.out)
    corpus = encode_corpus(ckpt, manifest, batch_size=args.batch_size)
    path = out / "corpus.bin"
    corpus.save(path)
    return CommandOutcome(0, [path], f"encoded {len(corpus)} patches -> {path}")


def cmd_reconstruct(args) -> CommandOutcome:
    from .analysis import FingerprintMismatch, reconstruct
    from .dataset import load_image, normalize_image, shuffled_indices
    from .plots import image_strip

    enc = _load_ckpt(args.checkpoint)
    gen = _load_ckpt(args.generator_checkpoint) if args.generator_checkpoint else enc
    manifest = _load_manifest(args.manifest)
    if enc.profile.base_resolution != manifest.resolution:
        raise CommandError("checkpoint and manifest resolutions differ")
    if enc.run_id != gen.run_id and not args.allow_mismatch:
        raise CommandError(f"checkpoints come from different runs ({enc.run_id} vs {gen.run_id}); "
                           "pass --allow-mismatch to override")
    out = _out_dir(args.out)
    order = shuffled_indices(len(manifest), args.seed)[: args.count]
    patches = [manifest.patches[i] for i in order]
    x = np.stack([normalize_image(load_image(manifest.resolve(p))) for p in patches])
    try:
        recon = reconstruct(enc, gen, x, allow_mismatch=args.allow_mismatch)
    except FingerprintMismatch as exc:
        raise CommandError(str(exc)) from exc
    grid = out / "reconstructions.png"
    image_strip(grid, np.concatenate([x, recon]), rows=2)
    mse = float(((x - recon) ** 2).mean())
    return CommandOutcome(0, [grid], f"reconstructed {len(x)} patches (pixel MSE {mse:.4f}); "
                                     "top row real, bottom row reconstruction")


def _interpolation_frames(gan, w_a, w_b, n_points, out: Path, stem: str) -> list[Path]:
    from .analysis import generate_images, interpolate_linear
    from .dataset import save_image
    from .plots import image_strip

    frames = generate_images(gan, interpolate_linear(w_a, w_b, n_points).astype(np.float32))
    paths = []
    for i, img in enumerate(frames):
        p = out / f"{stem}_frame_{i:02d}.png"
        save_image(p, img)
        paths.append(p)
    strip = out / f"{stem}_strip.png"
    image_strip(strip, frames)
    return paths + [strip]


def cmd_interpolate(args) -> CommandOutcome:
    import torch

    from .analysis import LatentCorpus, select_cluster_representative
    from .checkpoint import load_gan
    from .dataset import read_labels
    from .latent import sample_z

    if args.points < 2:
        raise CommandError("--points must be at least 2")
    ckpt = _load_ckpt(args.checkpoint)
    if args.corpus or args.labels:
        corpus = LatentCorpus.load(_require_file(args.corpus, "corpus"))
        label_map = read_labels(_require_file(args.labels, "labels"))
        labels = np.array([label_map.get(pid, -1) for pid in corpus.patch_ids])
        if args.cluster_a is None or args.cluster_b is None:
            raise CommandError("--cluster-a and --cluster-b are required with --corpus")
        try:
            id_a, w_a = select_cluster_representative(corpus, labels, args.cluster_a)
            id_b, w_b = select_cluster_representative(corpus, labels, args.cluster_b)
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        how = f"medoids {id_a} (cluster {args.cluster_a}) -> {id_b} (cluster {args.cluster_b})"
    else:
        gan = load_gan(ckpt)
        with torch.no_grad():
            w = gan.mapping(sample_z(2, ckpt.profile.latent_dim, seed=args.seed)).numpy()
        w_a, w_b = w[0], w[1]
        how = f"two mapped prior samples (seed {args.seed})"
    out = _out_dir(args.out)
    paths = _interpolation_frames(load_gan(ckpt), w_a, w_b, args.points, out, "interp")
    return CommandOutcome(0, paths, f"{args.points} frames between {how}")


def cmd_cluster(args) -> CommandOutcome:
    from .analysis import LatentCorpus, cluster_corpus
    from .plots import embedding_scatter

    corpus = LatentCorpus.load(_require_file(args.corpus, "corpus"))
    if args.k < 1 or args.k > len(corpus):
        raise CommandError(f"--k must be in [1, {len(corpus)}], got {args.k}")
    out = _out_dir(args.out)
    try:
        result = cluster_corpus(corpus, k=args.k, method=args.method, seed=args.seed, raw=args.raw)
    except (ValueError, RuntimeError) as exc:
        raise CommandError(str(exc)) from exc
    return CommandOutcome(0, _write_clustering(out, corpus, result, args.k),
                          f"clustered {len(corpus)} points into {len(set(result.labels))} occupied "
                          f"of {args.k} components")


def _write_clustering(out: Path, corpus, result, k: int) -> list[Path]:
    from .plots import embedding_scatter

    labels_path = out / "labels.csv"
    _write_labels(labels_path, corpus.patch_ids, result.labels)
    emb_path = out / "embedding.csv"
    with open(emb_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_id", "x", "y", "label"])
        for pid, (x, y), lab in zip(corpus.patch_ids, result.embedding, result.labels):
            w.writerow([pid, repr(float(x)), repr(float(y)), int(lab)])
    model_path = out / "gmm.json"
    model_path.write_text(result.model.to_json())
    fig = out / "embedding.png"
    embedding_scatter(fig, result.embedding, result.labels, f"GMM, {k} components")
    return [labels_path, emb_path, model_path, fig]


def cmd_survival(args) -> CommandOutcome:
    from .analysis import survival_enrichment
    from .dataset import ManifestError, read_labels
    from .plots import enrichment_bars

    labels_path = _require_file(args.labels, "labels")
    manifest = _load_manifest(args.manifest)
    try:
        labels = read_labels(labels_path)
        report = survival_enrichment(labels, manifest, args.cohort, args.threshold_months)
    except (ValueError, ManifestError) as exc:
        raise CommandError(str(exc)) from exc
    out = _out_dir(args.out)
    return CommandOutcome(0, _write_survival(out, report),
                          f"{len(report.rows)} clusters; high-risk n={report.group_size_high}, "
                          f"low-risk n={report.group_size_low}; "
                          f"{sum(r.highlighted for r in report.rows)} highlighted")


def _write_survival(out: Path, report) -> list[Path]:
    from .plots import enrichment_bars

    csv_path = out / "enrichment.csv"
    report.write_csv(csv_path)
    fig = out / "enrichment.png"
    enrichment_bars(fig, report)
    return [csv_path, fig]


def cmd_report(args) -> CommandOutcome:
    from .analysis import (cluster_corpus, encode_corpus, extreme_cluster_pairs,
                           select_cluster_representative, survival_enrichment)
    from .checkpoint import load_gan

    ckpt = _load_ckpt(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    if ckpt.profile.base_resolution != manifest.resolution:
        raise CommandError("checkpoint and manifest resolutions differ")
    if args.points < 2:
        raise CommandError("--points must be at least 2")
    out = _out_dir(args.out)
    written: list[Path] = []
    corpus = encode_corpus(ckpt, manifest, batch_size=args.batch_size)
    corpus.save(out / "corpus.bin")
    written.append(out / "corpus.bin")
    k = min(args.k, len(corpus))
    try:
        result = cluster_corpus(corpus, k=k, method=args.method, seed=args.seed, raw=args.raw)
        written += _write_clustering(out, corpus, result, k)
        label_map = dict(zip(corpus.patch_ids, result.labels.tolist()))
        report = survival_enrichment(label_map, manifest, args.cohort, args.threshold_months)
    except (ValueError, RuntimeError) as exc:
        raise CommandError(str(exc)) from exc
    written += _write_survival(out, report)
    gan = load_gan(ckpt)
    pairs = extreme_cluster_pairs(result.model, result.labels, args.strips)
    for n, (a, b) in enumerate(pairs):
        _, w_a = select_cluster_representative(corpus, result.labels, a)
        _, w_b = select_cluster_representative(corpus, result.labels, b)
        written += _interpolation_frames(gan, w_a, w_b, args.points, out, f"interp{n}_c{a}_c{b}")
    return CommandOutcome(0, written, f"report for {len(corpus)} patches: {k} components, "
                                      f"{len(pairs)} interpolation strips, enrichment over "
                                      f"{report.group_size_high}+{report.group_size_low} patients")


# ------------------------------------------------------------------ parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="tissue-manifold", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value file with defaults for this command")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("synth-data", cmd_synth_data, "write a synthetic three-texture cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=20)
    p.add_argument("--per-patient", type=int, default=10)
    p.add_argument("--resolution", type=int, default=28)
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train mapping, generator, critic and encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=["toy", "full"], default="toy")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, help="default: 32 for toy, 16 for full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--mixing-probability", type=float, default=0.5)
    p.add_argument("--lr-generator", type=float, help="default: 1e-5 for toy, 1e-4 for full")
    p.add_argument("--lr-critic", type=float, help="default: 1e-5 for toy, 1e-4 for full")
    p.add_argument("--lr-encoder", type=float, help="default: 1e-3 for toy, 1e-4 for full")
    p.add_argument("--mapping-lr-scale", type=float, default=0.01)
    p.add_argument("--spectral-norm", action="store_true", help="spectrally normalize the critic")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("encode", cmd_encode, "encode every patch of a manifest into a latent corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=32)

    p = add("reconstruct", cmd_reconstruct, "reconstruct real patches through E then G")
    p.add_argument("--checkpoint", required=True, help="checkpoint providing the encoder")
    p.add_argument("--generator-checkpoint", help="checkpoint providing the generator (default: --checkpoint)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-mismatch", action="store_true")

    p = add("interpolate", cmd_interpolate, "generate frames along a straight line in w-space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--corpus")
    p.add_argument("--labels")
    p.add_argument("--cluster-a", type=int)
    p.add_argument("--cluster-b", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = add("cluster", cmd_cluster, "reduce a corpus to 2-D and fit a Gaussian mixture")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--method", choices=["pca", "umap"], default="pca")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="cluster the full latent vectors instead of the 2-D embedding")

    p = add("survival", cmd_survival, "per-cluster patient enrichment between survival groups")
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--threshold-months", type=float, default=60.0)
    p.add_argument("--cohort", choices=["NKI", "VGH", "SYNTH"])

    p = add("report", cmd_report, "encode, cluster, survival enrichment and interpolation strips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--method", choices=["pca", "umap"], default="pca")
    p.add_argument("--raw", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--strips", type=int, default=4)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--threshold-months", type=float, default=60.0)
    p.add_argument("--cohort", choices=["NKI", "VGH", "SYNTH"])
    return parser, subs


def _config_path(argv: list[str], commands) -> tuple[str | None, str | None]:
    """Find the subcommand and its ``--config`` value without a full parse, so that
    options marked required can be supplied by the config file."""
    command = next((a for a in argv if a in commands), None)
    if command is None:
        return None, None
    rest = argv[argv.index(command) + 1:]
    for i, a in enumerate(rest):
        if a == "--config" and i + 1 < len(rest):
            return command, rest[i + 1]
        if a.startswith("--config="):
            return command, a.split("=", 1)[1]
    return command, None


def _parse(argv: list[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    command, config = _config_path(argv, subs)
    if config is not None:
        sp = subs[command]
        dests = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, text in _read_config_file(config).items():
            action = dests.get(key)
            if action is None or key in ("config", "help"):
                raise CommandError(f"config key {key!r} is not an option of {command}")
            try:
                if action.nargs == 0:
                    defaults[key] = text.lower() in ("1", "true", "yes")
                else:
                    defaults[key] = action.type(text) if action.type else text
            except ValueError as exc:
                raise CommandError(f"config key {key!r}: {exc}") from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise CommandError(f"config key {key!r}: {text!r} not in {list(action.choices)}")
            action.required = False
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def run_cli(argv: list[str] | None = None) -> CommandOutcome:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return CommandOutcome(code, [], "usage error" if code else "")
    except CommandError as exc:
        return CommandOutcome(1, [], f"error: {exc}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        return CommandOutcome(1, [], f"error: {exc}")
    except (OSError, ValueError, FloatingPointError) as exc:
        return CommandOutcome(1, [], f"error: {type(exc).__name__}: {exc}")


def main() -> None:
    outcome = run_cli()
    if outcome.summary:
        print(outcome.summary, file=sys.stderr if outcome.exit_code else sys.stdout)
    sys.exit(outcome.exit_code)


if __name__ == "__main__":
    main()
