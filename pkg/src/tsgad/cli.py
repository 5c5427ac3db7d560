"""Command-line interface: synth, train, eval, export-graph, plot.

Each subcommand is a thin wrapper over a `run_*` function that tests can call
directly. Output files are written atomically, and every failure path prints
one error line to stderr and exits nonzero without leaving partial files.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

import numpy as np

from . import checkpoint as ckpt
from . import scoring as sc
from .config import ConfigError, RunConfig, build_config, load_config_file
from .data import (
    DataError,
    SPLIT_IDS,
    TRAIN,
    TimeSeriesDataset,
    apply_normalization,
    assign_splits,
    load_csv,
    make_windows,
    normalize,
    save_csv,
    synth_generate,
)
from .fileio import atomic_write_text
from .model import Detector, ModelConfig
from .numgrad import NumericError
from .training import EpochStats, train


def run_synth(
    out: str,
    sensors: int,
    steps: int,
    rate: float,
    seed: int,
    train_frac: float = 0.6,
    val_frac: float = 0.2,
) -> TimeSeriesDataset:
    """Generate a labeled synthetic dataset and write it as CSV."""
    ds = synth_generate(
        sensors, steps, rate, seed, train_frac=train_frac, val_frac=val_frac
    )
    save_csv(out, ds)
    return ds


def _model_config(cfg: RunConfig, n_sensors: int) -> ModelConfig:
    return ModelConfig(
        n_sensors=n_sensors,
        window=cfg.d,
        neighbors=cfg.k,
        embed_dim=cfg.w,
        latent=cfg.latent,
        no_shared=cfg.no_shared_layer,
        no_pred=cfg.no_pred_head,
        no_recon=cfg.no_vae_head,
    )


def run_train(cfg: RunConfig, out: str, log=print) -> tuple[Detector, list[EpochStats]]:
    """Load data, train a detector, and write its checkpoint."""
    if not cfg.data:
        raise ConfigError("train requires a dataset (--data or config file)")
    ds = load_csv(cfg.data, cfg.label_column)
    ds = assign_splits(ds, cfg.train_frac, cfg.val_frac)
    ds_norm, stats = normalize(ds)
    batch = make_windows(ds_norm, cfg.d)[TRAIN]
    try:
        mcfg = _model_config(cfg, ds.n_sensors)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    det = Detector.build(mcfg, cfg.seed)
    history = train(
        det,
        batch.x,
        batch.target,
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        lr=cfg.lr,
        mode=cfg.combination_mode(),
        seed=cfg.seed,
        log=log,
    )
    ckpt.save(out, det, ds.sensor_names, stats, cfg.to_dict())
    return det, history


def run_eval(
    checkpoint_path: str,
    data_path: str,
    out: str,
    split: str = "test",
    per_sensor: bool = False,
    label_column: str | None = None,
    log=print,
) -> sc.Metrics | None:
    """Score a dataset against a trained checkpoint; returns metrics if labeled."""
    if split not in SPLIT_IDS:
        raise ConfigError(f"unknown split '{split}' (use train, val, or test)")
    loaded = ckpt.load(checkpoint_path)
    run_cfg = loaded.run_config
    if label_column is None:
        label_column = run_cfg.get("label_column", "label")
    ds = load_csv(data_path, label_column)
    if ds.sensor_names != loaded.sensor_names:
        raise DataError(
            f"dataset sensors {ds.sensor_names} do not match checkpoint "
            f"sensors {loaded.sensor_names}"
        )
    ds = assign_splits(
        ds, run_cfg.get("train_frac", 0.6), run_cfg.get("val_frac", 0.2)
    )
    ds_norm = apply_normalization(ds, loaded.stats)
    result = sc.score_dataset(loaded.detector, ds_norm, which=SPLIT_IDS[split])
    sc.write_scores(out, result, ds.sensor_names, per_sensor=per_sensor)
    if result.labels is None:
        log("labels absent; metrics skipped")
        return None
    m = sc.metrics(result.verdict, result.labels)
    log(
        f"precision={m.precision:.4f} recall={m.recall:.4f} f1={m.f1:.4f} "
        f"tp={m.tp} fp={m.fp} fn={m.fn} tn={m.tn}"
    )
    return m


def _matrix_csv(names: list[str], mat: np.ndarray, fmt) -> str:
    lines = [",".join(names)]
    for row in mat:
        lines.append(",".join(fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def run_export(checkpoint_path: str, adjacency: str, similarity: str) -> None:
    """Write the learned graph: binary adjacency and raw similarities."""
    loaded = ckpt.load(checkpoint_path)
    det = loaded.detector
    if det.config.no_pred:
        raise ConfigError("checkpoint has no forecast head; nothing to export")
    mask, sims = det.structure()
    atomic_write_text(
        adjacency, _matrix_csv(loaded.sensor_names, mask, lambda x: str(int(x)))
    )
    atomic_write_text(
        similarity, _matrix_csv(loaded.sensor_names, sims, lambda x: repr(float(x)))
    )


def run_plot(scores_path: str, out: str) -> None:
    """Render the score trace with its threshold line and label shading."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "score-plot"
    import matplotlib.pyplot as plt

    threshold, rows = sc.read_scores(scores_path)
    times = np.array([r["t"] for r in rows])
    scores = np.array([r["A"] for r in rows])
    labels = (
        np.array([r["label"] for r in rows]) if "label" in rows[0] else None
    )
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.plot(times, scores, lw=0.8, label="A(t)")
    ax.axhline(threshold, color="tab:red", lw=1.0, ls="--", label="threshold")
    if labels is not None and labels.any():
        edges = np.flatnonzero(np.diff(np.concatenate(([0], labels, [0]))))
        for start, end in edges.reshape(-1, 2):
            ax.axvspan(times[start], times[min(end, len(times) - 1)], color="tab:orange", alpha=0.25)
    ax.set_xlabel("t")
    ax.set_ylabel("anomaly score")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)


# --- argparse plumbing ---------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of run options")
    p.add_argument("--data", help="dataset CSV path")
    p.add_argument("--label-column", dest="label_column")
    p.add_argument("--d", type=int, help="window length")
    p.add_argument("--k", type=int, help="graph neighbor count")
    p.add_argument("--w", type=int, help="sensor embedding dimension")
    p.add_argument("--latent", type=int, help="VAE latent size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["mgda_ub", "fixed", "alternating"])
    p.add_argument("--c-pred", dest="c_pred", type=float)
    p.add_argument("--c-recon", dest="c_recon", type=float)
    p.add_argument("--period", type=int, help="alternating-mode epoch period")
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    for flag in ("no-vae-head", "no-pred-head", "no-shared-layer", "no-mgda"):
        p.add_argument(
            f"--{flag}", dest=flag.replace("-", "_"), action="store_true", default=None
        )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    names = {f.name for f in fields(RunConfig)}
    flag_values = {k: v for k, v in vars(args).items() if k in names}
    return build_config(file_values, flag_values)


def cmd_synth(args) -> int:
    ds = run_synth(
        args.out, args.sensors, args.steps, args.rate, args.seed,
        args.train_frac, args.val_frac,
    )
    print(f"wrote {args.out}: {ds.n_steps} rows, {ds.n_sensors} sensors, "
          f"{int(ds.labels.sum())} anomalous")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    lines: list[str] = []

    def log(line: str) -> None:
        print(line)
        lines.append(line)

    run_train(cfg, args.out, log=log)
    if args.log:
        atomic_write_text(args.log, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    run_eval(
        args.checkpoint,
        args.data,
        args.out,
        split=args.split,
        per_sensor=args.per_sensor,
        label_column=args.label_column,
    )
    print(f"wrote {args.out}")
    return 0


def cmd_export_graph(args) -> int:
    run_export(args.checkpoint, args.adjacency, args.similarity)
    print(f"wrote {args.adjacency} and {args.similarity}")
    return 0


def cmd_plot(args) -> int:
    run_plot(args.scores, args.out)
    print(f"wrote {args.out}")
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tsgad",
        description="Two-headed graph-attention anomaly detection for "
        "multivariate time series.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--sensors", type=int, default=8)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--rate", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-frac", dest="train_frac", type=float, default=0.6)
    s.add_argument("--val-frac", dest="val_frac", type=float, default=0.2)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--log", help="also write epoch lines to this file")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a trained checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="score CSV output path")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--per-sensor", dest="per_sensor", action="store_true")
    e.add_argument("--label-column", dest="label_column")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("export-graph", help="write learned adjacency/similarity")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--adjacency", required=True)
    g.add_argument("--similarity", required=True)
    g.set_defaults(fn=cmd_export_graph)

    pl = sub.add_parser("plot", help="render a score CSV as an SVG")
    pl.add_argument("--scores", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
