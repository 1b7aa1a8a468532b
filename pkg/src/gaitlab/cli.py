"""Command-line entry point.

Subcommands: generate, stats, normalize, train, evaluate, ablate, grad-check.
Exit codes: 0 success, 2 input error, 3 data degeneracy, 64 usage.
Every command writes a run manifest (written atomically, also on failure)
next to its outputs so every artifact can be regenerated.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import autodiff as ad
from .errors import DEGENERACY_ERRORS, GaitLabError
from .evaluation import (AblationCell, embed_dataset, rank_k_accuracy, run_ablation,
                         render_markdown_table, write_results_csv)
from .models import (SinglePoseEncoderConfig, TemporalBaselineConfig, config_to_dict,
                     init_spe_params, load_checkpoint, save_checkpoint, spe_forward)
from .normalization import (apply_scheme, compute_stats, dataset_fingerprint,
                            load_stats, parse_scheme, save_stats, scheme_needs_stats,
                            stats_to_dict)
from .poses import FrameGeometry, load_dataset, save_dataset
from .synthetic import ConfoundSpec, generate
from .training import TrainConfig, triplet_loss, train, write_metrics_csv

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_seed() -> int:
    return int(os.environ.get("GAITLAB_SEED", "0"))


def _write_manifest(out_dir_or_file, command, args_ns, inputs, outputs, status,
                    started, seed=None):
    if os.path.isdir(out_dir_or_file):
        path = os.path.join(out_dir_or_file, "manifest.json")
    else:
        path = f"{out_dir_or_file}.manifest.json"
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": {k: v for k, v in vars(args_ns).items() if k != "func"},
        "inputs": {p: dataset_fingerprint(p) for p in inputs if p and os.path.exists(p)},
        "seed": seed,
        "version": __version__,
        "outputs": outputs,
        "status": status,
        "wall_clock_s": round(time.time() - started, 3),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, default=str)
        f.write("\n")
    os.replace(tmp, path)


def _load_dataset_checked(path):
    if not os.path.exists(path):
        raise GaitLabError(f"dataset file not found: {path}")
    try:
        sequences = load_dataset(path)
    except ValueError as exc:
        raise GaitLabError(str(exc))
    if not sequences:
        from .errors import EmptyDataset
        raise EmptyDataset(f"dataset {path} is empty")
    return sequences


def _split_dataset(sequences, split_path):
    with open(split_path) as f:
        wanted = set(json.load(f))
    subset = [s for s in sequences if s.sequence_id in wanted]
    missing = wanted - {s.sequence_id for s in subset}
    if missing:
        raise GaitLabError(f"split {split_path} references unknown sequence_ids: "
                           f"{sorted(missing)[:5]}")
    return subset


# -- subcommands --

def cmd_generate(args):
    spec = ConfoundSpec(
        mode=args.mode, n_identities=args.identities,
        sequences_per_identity=args.seqs, frames=args.frames,
        geometry=FrameGeometry(args.frame_width, args.frame_height),
        noise_std=args.noise, seed=args.seed)
    sequences, manifest = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "dataset.jsonl")
    save_dataset(data_path, sequences)
    with open(os.path.join(args.out, "ground_truth.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    print(f"wrote {len(sequences)} sequences ({args.identities} identities) to {data_path}")
    return [data_path, os.path.join(args.out, "ground_truth.json")]


def cmd_stats(args):
    sequences = _load_dataset_checked(args.dataset)
    geom = FrameGeometry(args.frame_width, args.frame_height)
    stats = compute_stats(sequences, geom, fingerprint=dataset_fingerprint(args.dataset))
    save_stats(args.out, stats)
    print(f"stats over {sum(len(s) for s in sequences)} poses: "
          f"mean_height={stats.mean_height:.6g} "
          f"mean_pelvis=({stats.mean_pelvis[0]:.6g}, {stats.mean_pelvis[1]:.6g})")
    return [args.out]


def cmd_normalize(args):
    sequences = _load_dataset_checked(args.dataset)
    parse_scheme(args.scheme)
    stats = load_stats(args.stats) if args.stats else None
    geom = FrameGeometry(args.frame_width, args.frame_height)
    out_seqs = [apply_scheme(args.scheme, s, stats=stats, geom=geom) for s in sequences]
    save_dataset(args.out, out_seqs)
    if args.preview:
        before, after = sequences[0], out_seqs[0]
        print(f"sequence {before.sequence_id}, frame 0, scheme {args.scheme}:")
        print(f"{'joint':>5} {'x before':>12} {'y before':>12} {'x after':>12} {'y after':>12}")
        for j in range(18):
            bx, by = before.poses[0, j]
            ax, ay = after.poses[0, j]
            print(f"{j:>5} {bx:>12.6g} {by:>12.6g} {ax:>12.6g} {ay:>12.6g}")
    print(f"normalized {len(out_seqs)} sequences -> {args.out}")
    return [args.out]


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise GaitLabError(f"expected key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def cmd_train(args):
    sequences = _load_dataset_checked(args.dataset)
    geom = FrameGeometry(args.frame_width, args.frame_height)
    overrides = _parse_overrides(args.set)
    model_keys = {"c1", "c2", "c3", "c_emb", "n_heads", "use_residual_ln",
                  "input_batchnorm", "d_model", "n_layers"}
    model_over = {k: v for k, v in overrides.items() if k in model_keys}
    train_over = {k: v for k, v in overrides.items() if k not in model_keys}
    if args.model == "spe":
        if args.scheme and "batch-norm" in parse_scheme(args.scheme):
            model_over.setdefault("input_batchnorm", True)
        model_config = SinglePoseEncoderConfig(**model_over)
    else:
        model_over.setdefault("seq_len", args.seq_len)
        model_config = TemporalBaselineConfig(**model_over)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, seq_len=args.seq_len,
                      **train_over)
    result = train(args.model, sequences, args.scheme, model_config, cfg, geom=geom)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    save_checkpoint(ckpt_path, args.model, model_config, result.store,
                    seed=cfg.seed, scheme=args.scheme,
                    optimizer_state=result.optimizer_state,
                    extra={"train_config": cfg.__dict__,
                           "stats": stats_to_dict(result.stats) if result.stats else None})
    metrics_path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(metrics_path, result.metrics)
    with open(os.path.join(args.out, "effective_config.json"), "w") as f:
        json.dump({"model": args.model, "scheme": args.scheme,
                   "model_config": config_to_dict(model_config),
                   "train_config": {**cfg.__dict__, "betas": list(cfg.betas)}},
                  f, indent=2)
        f.write("\n")
    final_loss = result.metrics[-1][3] if result.metrics else float("nan")
    print(f"trained {args.model} for {cfg.epochs} epochs, final loss {final_loss:.6g}")
    print(f"checkpoint: {ckpt_path}")
    return [ckpt_path, metrics_path]


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.checkpoint)
    sequences = _load_dataset_checked(args.dataset)
    gallery_seqs = _split_dataset(sequences, args.gallery)
    probe_seqs = _split_dataset(sequences, args.probe)
    scheme = args.scheme or ckpt["scheme"]
    geom = FrameGeometry(args.frame_width, args.frame_height)
    stats = load_stats(args.stats) if args.stats else None
    if stats is None and scheme_needs_stats(scheme):
        from .normalization import stats_from_dict
        saved = ckpt["extra"].get("stats")
        if saved:
            stats = stats_from_dict(saved)
    seq_len = ckpt["extra"].get("train_config", {}).get("seq_len", 60)
    gallery = embed_dataset(ckpt["model"], ckpt["store"], ckpt["config"], gallery_seqs,
                            scheme, stats=stats, geom=geom, seq_len=seq_len)
    probes = embed_dataset(ckpt["model"], ckpt["store"], ckpt["config"], probe_seqs,
                           scheme, stats=stats, geom=geom, seq_len=seq_len)
    r1 = rank_k_accuracy(probes, gallery, 1)
    r5 = rank_k_accuracy(probes, gallery, 5)
    print(f"rank-1: {r1:.4f}  rank-5: {r5:.4f}  "
          f"({len(probes)} probes vs {len(gallery)} gallery)")
    outputs = []
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"rank1": r1, "rank5": r5, "scheme": scheme,
                       "n_probes": len(probes), "n_gallery": len(gallery)}, f, indent=2)
            f.write("\n")
        outputs.append(args.out)
    return outputs


def cmd_ablate(args):
    with open(args.grid) as f:
        grid = json.load(f)
    sequences = _load_dataset_checked(args.dataset)
    gallery_seqs = _split_dataset(sequences, args.gallery) if args.gallery else sequences
    probe_seqs = _split_dataset(sequences, args.probe) if args.probe else sequences
    seeds = grid.get("seeds", [0, 1, 2])
    cells = [AblationCell(model=c["model"], scheme=c["scheme"], seed=s)
             for c in grid["cells"] for s in seeds]
    tc = TrainConfig(**grid.get("train_config", {}))
    seq_len = tc.seq_len
    model_configs = {
        "spe": SinglePoseEncoderConfig(**grid.get("spe_config", {})),
        "temporal": TemporalBaselineConfig(
            **{"seq_len": seq_len, **grid.get("temporal_config", {})}),
    }
    geom = FrameGeometry(args.frame_width, args.frame_height)
    os.makedirs(args.out, exist_ok=True)
    cache = os.path.join(args.out, "cells") if args.resume else None
    result = run_ablation(cells, sequences, gallery_seqs, probe_seqs, model_configs,
                          tc, geom=geom, cache_dir=cache)
    csv_path = os.path.join(args.out, "results.csv")
    write_results_csv(csv_path, result)
    md = render_markdown_table(result)
    md_path = os.path.join(args.out, "results.md")
    with open(md_path, "w") as f:
        f.write(md)
    print(md)
    if result.failures:
        print(f"{len(result.failures)} cell(s) failed; partial results written:")
        for fl in result.failures:
            print(f"  {fl['model']}/{fl['scheme']}/seed={fl['seed']}: {fl['error']}")
    return [csv_path, md_path]


def cmd_grad_check(args):
    rng = np.random.default_rng(args.seed)
    config = SinglePoseEncoderConfig(c1=8, c2=16, c3=32, c_emb=16, n_heads=2)
    worst = 0.0
    for trial in range(args.seeds):
        store = init_spe_params(config, seed=int(rng.integers(1 << 30)))
        poses = rng.normal(0, 1, size=(6, 18, 2))
        labels = [0, 0, 1, 1, 2, 2]

        def f():
            emb = spe_forward(poses, store, config, training=True)
            return triplet_loss(emb, labels, margin=0.2)

        report = ad.grad_check(f, store.all_parameters(), h=1e-5, tolerance=args.tolerance,
                               max_coords_per_param=8, rng=rng)
        worst = max(worst, report.max_rel_err)
        status = "ok" if report.passed else "FAIL"
        print(f"trial {trial}: max relative error {report.max_rel_err:.3e} "
              f"({report.worst_param}) [{status}]")
    print(f"worst over {args.seeds} trials: {worst:.3e} (tolerance {args.tolerance})")
    if worst >= args.tolerance:
        raise GaitLabError(f"gradient check failed: {worst:.3e} >= {args.tolerance}")
    return []


def build_parser() -> _Parser:
    parser = _Parser(prog="gaitlab",
                     description="Skeleton gait recognition lab: normalization "
                                 "schemes, embedding models, confound experiments.")
    parser.add_argument("--version", action="version", version=f"gaitlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_geom(p):
        p.add_argument("--frame-width", type=float, default=1.0)
        p.add_argument("--frame-height", type=float, default=1.0)

    p = sub.add_parser("generate", help="generate a synthetic confound dataset")
    p.add_argument("--mode", required=True,
                   choices=["height-only", "motion-only", "position-only", "mixed"])
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--seqs", type=int, default=6)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    add_geom(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="compute training-set normalization statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    add_geom(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("normalize", help="apply a normalization scheme to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scheme", required=True)
    p.add_argument("--stats")
    p.add_argument("--out", required=True)
    p.add_argument("--preview", action="store_true")
    add_geom(p)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("train", help="train an embedding model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=["spe", "temporal"], default="spe")
    p.add_argument("--scheme", default="none")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seq-len", type=int, default=60)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override model or training config fields")
    p.add_argument("--out", required=True)
    add_geom(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="gallery/probe rank-k evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gallery", required=True, help="JSON list of sequence_ids")
    p.add_argument("--probe", required=True, help="JSON list of sequence_ids")
    p.add_argument("--scheme")
    p.add_argument("--stats")
    p.add_argument("--out")
    add_geom(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a (model, scheme, seed) ablation grid")
    p.add_argument("--grid", required=True, help="grid spec JSON")
    p.add_argument("--dataset", required=True)
    p.add_argument("--gallery")
    p.add_argument("--probe")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)
    add_geom(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.time()
    manifest_target = getattr(args, "out", None) or "."
    inputs = [getattr(args, a, None) for a in
              ("dataset", "stats", "checkpoint", "gallery", "probe", "grid")]
    status, code, outputs = "ok", EXIT_OK, []
    try:
        outputs = args.func(args) or []
    except DEGENERACY_ERRORS as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        status, code = f"error:{exc.code}", EXIT_DEGENERATE
    except GaitLabError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        status, code = f"error:{exc.code}", EXIT_INPUT
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status, code = f"error:{type(exc).__name__}", EXIT_INPUT
    finally:
        try:
            target = manifest_target
            if not os.path.isdir(target) and not target.endswith((".json", ".jsonl", ".csv")):
                os.makedirs(target, exist_ok=True)
            _write_manifest(target, args.command, args, inputs, outputs, status,
                            started, seed=getattr(args, "seed", None))
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
