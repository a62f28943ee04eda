"""Command line entry point: generate / train / eval / predict / ablate / gradcheck.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.  Every command is deterministic given its seed and configuration,
and every output directory receives the fully resolved config that produced
it.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericalError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cloud import normalize_size
from .config import ConfigError, RunConfig, config_to_text, default_run_config, load_config_file
from .gradcheck import TOLERANCE, gradcheck_suite
from .metrics import format_metrics_table
from .network import (
    count_flops,
    count_params,
    decide,
    forward,
    sigmoid_scores,
)
from .render import prediction_csv, render_scene_svg
from .scenes import (
    DataFormatError,
    dataset_stats,
    generate_dataset,
    read_dataset,
    read_meta_file,
    read_scene_file,
    write_dataset,
)
from .training import evaluate, run_ablation_suite, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return default_run_config()
    return load_config_file(path)


def _write_config(out_dir: Path, cfg: RunConfig) -> None:
    (out_dir / "config.txt").write_text(config_to_text(cfg))


def cmd_generate(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be a positive integer")
    cfg = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=seed)
    records = generate_dataset(cfg.template, args.scenes, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(records, out)
    stats = dataset_stats(r.cloud for r in records)
    names = ("static", "vehicle", "pedestrian")
    lines = [f"scenes {len(records)}", f"detections {stats.total}"]
    for name, count, frac in zip(names, stats.counts, stats.fractions):
        lines.append(f"{name} {count} {frac:.6f}")
    (out / "stats.txt").write_text("\n".join(lines) + "\n")
    _write_config(out, cfg)
    print(f"wrote {len(records)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    records = read_dataset(args.data)
    clouds = [r.cloud for r in records]
    result = train(clouds, cfg.network, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_text = config_to_text(cfg)
    save_checkpoint(out / "checkpoint.rpseg", result.store, config_text)
    (out / "train_log.txt").write_text("\n".join(result.log_lines) + "\n")
    metrics, _cm = evaluate(clouds, cfg.network, result.store, cfg.train)
    (out / "metrics.txt").write_text(format_metrics_table({"trained": metrics}) + "\n")
    _write_config(out, cfg)
    print(f"best epoch {result.best_epoch}, selection macro F1 {result.best_macro_f1:.4f}")
    return EXIT_OK


def _spec_from_checkpoint(path):
    store, config_text = load_checkpoint(path)
    from .config import load_config_text

    cfg = load_config_text(config_text, source=f"{path}#config")
    expected = {}
    from .network import _iter_mlps

    for prefix, mlp, _rows in _iter_mlps(cfg.network):
        for i in range(mlp.n_layers):
            expected[f"{prefix}.{i}.w"] = (mlp.widths[i], mlp.widths[i + 1])
            expected[f"{prefix}.{i}.b"] = (mlp.widths[i + 1],)
    actual = {name: p.data.shape for name, p in store.items()}
    if actual != expected:
        raise CheckpointError(f"{path}: parameters do not match the embedded network spec")
    return store, cfg


def cmd_eval(args) -> int:
    store, cfg = _spec_from_checkpoint(args.ckpt)
    records = read_dataset(args.data)
    clouds = [r.cloud for r in records]
    metrics, cm = evaluate(clouds, cfg.network, store, cfg.train)
    lines = [format_metrics_table({"eval": metrics}), ""]
    lines.append("confusion (rows = truth static/vehicle/pedestrian, columns = prediction)")
    for row in cm.counts:
        lines.append("  " + " ".join(f"{int(v):>9d}" for v in row))
    lines.append("confusion, row-normalized")
    for row in cm.normalized():
        lines.append("  " + " ".join(f"{v:>9.4f}" for v in row))
    lines.append("")
    lines.append(f"parameters {count_params(cfg.network)}")
    lines.append(f"flops {count_flops(cfg.network, cfg.network.input_size)}")
    report = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report)
    print(report, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    store, cfg = _spec_from_checkpoint(args.ckpt)
    cloud = read_scene_file(args.scene)
    meta = Path(args.scene).with_suffix(".meta")
    boxes = read_meta_file(meta)[2] if meta.exists() else []
    rng = np.random.default_rng(args.seed)
    sized = normalize_size(cloud, cfg.network.input_size, rng)
    logits = forward(sized, cfg.network, store, rng=rng)
    scores = sigmoid_scores(logits.data)
    pred = decide(logits.data, cfg.network.threshold)
    svg_path = Path(args.svg)
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    svg_path.write_text(render_scene_svg(sized, pred, boxes))
    csv_path = Path(args.csv) if args.csv else svg_path.with_suffix(".csv")
    csv_path.write_text(prediction_csv(sized, scores, pred))
    print(f"wrote {svg_path} and {csv_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        _load_config(args.config)  # validated for provenance, suite shapes are fixed
    results = gradcheck_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"op={name} max_rel_err={err:.3e}")
        worst = max(worst, err)
    if worst > TOLERANCE:
        print(f"FAIL: max relative error {worst:.3e} exceeds {TOLERANCE:.0e}")
        return EXIT_NUMERIC
    print(f"OK: all {len(results)} ops within {TOLERANCE:.0e}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    records = read_dataset(args.data)
    clouds = [r.cloud for r in records]
    if len(clouds) < 2:
        raise DataFormatError("ablation needs at least two scenes (train + eval split)")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7)))
    order = rng.permutation(len(clouds))
    n_eval = max(1, int(round(0.2 * len(clouds))))
    eval_clouds = [clouds[i] for i in order[:n_eval]]
    train_clouds = [clouds[i] for i in order[n_eval:]]
    results = run_ablation_suite(train_clouds, eval_clouds, cfg.network, cfg.train)
    table = format_metrics_table(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table + "\n")
    _write_config(out, cfg)
    print(table)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="rpseg",
                     description="Radar point cloud semantic segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic labeled dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="render predictions for one scene as SVG + CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--svg", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer type")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate the four input ablations")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataFormatError, CheckpointError, FileNotFoundError,
            NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
