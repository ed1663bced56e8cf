"""Command-line harness: generate / train / evaluate / case-study.

Exit codes: 0 success, 1 usage (bad flags, bad config values, windows outside
the eval split), 2 data errors (missing or malformed files, grid mismatches),
3 numerical failures (training divergence, non-finite integration). Every
failure prints a single line starting with ``error:`` to stderr.

Each command echoes the fully resolved configuration into its output
directory (``<command>_config.txt``) so runs are auditable.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .grid import (
    GridSpec,
    compute_norm_stats,
    compute_threshold_map,
    dropped_pixel_count,
    inv_log1p,
    tile_max,
    tile_partition,
)
from .ioutil import FileFormatError
from .models import (
    MODEL_KINDS,
    IntegrationError,
    build_model,
    load_checkpoint,
    parameter_count,
    persistence_forecast,
    save_checkpoint,
)
from .plots import grouped_bar_chart, line_chart
from .synth import SampleSet, generate, read_dataset, split, write_dataset
from .training import DivergenceError, fit, write_loss_csv
from .verification import evaluate_model, rows_to_csv, write_report_csv


class UsageError(Exception):
    """Bad flag or config value; maps to exit code 1."""


def _err(exc: BaseException) -> None:
    message = str(exc).replace("\n", " ").strip() or exc.__class__.__name__
    print(f"error: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# config resolution


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    try:
        cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) \
            else RunConfig()
        overrides: dict[str, object] = {}
        for pair in getattr(args, "set", None) or []:
            if "=" not in pair:
                raise ValueError(f"--set expects key=value, got {pair!r}")
            key, _, value = pair.partition("=")
            overrides[key.strip()] = value.strip()
        for flag in ("seed", "n_days", "epochs"):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[flag] = value
        return cfg.with_overrides(**overrides).validate()
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc


def _echo_config(cfg: RunConfig, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}_config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _load_dataset(path: str) -> SampleSet:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset not found: {p}")
    return read_dataset(p)


def _check_grid(model, spec: GridSpec, ckpt: str) -> None:
    if (model.grid.height, model.grid.width) != (spec.height, spec.width):
        raise FileFormatError(
            f"checkpoint/grid mismatch: {ckpt} was trained on "
            f"{model.grid.height}x{model.grid.width}, dataset is "
            f"{spec.height}x{spec.width}"
        )


def _histories(sset: SampleSet, days: list[int], history: int, lead: int) -> list:
    return [
        [sset.predictors[k] for k in range(d - lead - history + 1, d - lead + 1)]
        for d in days
    ]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, args: argparse.Namespace) -> int:
    out_path = Path(args.out or cfg.dataset)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    sset = generate(cfg.synth_config())
    write_dataset(sset, out_path)
    _echo_config(cfg, out_path.parent, "generate")
    burst_days = int(np.sum(sset.extreme_truth.any(axis=(1, 2))))
    print(
        f"wrote {out_path}: {sset.n_days} days of "
        f"{cfg.height}x{cfg.width}, planted extreme pixels: "
        f"{int(sset.extreme_truth.sum())} over {burst_days} burst days"
    )
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    sset = _load_dataset(args.data or cfg.dataset)
    train_set, _ = split(sset, cfg.train_frac)
    thresholds = compute_threshold_map(train_set.targets)
    norm = compute_norm_stats(train_set.predictors)
    model = build_model(args.model, sset.spec, cfg.model_config(), norm)

    out_path = Path(args.out or (Path(cfg.out_dir) / f"{args.model}.pgw1"))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    print(
        f"training {args.model} ({parameter_count(model)} parameters) on "
        f"{train_set.n_days} days, {cfg.epochs} epochs"
    )
    report = fit(
        model, train_set, thresholds, cfg.loss_config(), seed=cfg.seed,
        log_fn=lambda e, total, mse, bce: print(
            f"  epoch {e:3d}  total {total:.5f}  mse {mse:.5f}  bce {bce:.5f}"
        ),
    )
    save_checkpoint(model, out_path)
    loss_csv = out_path.with_suffix(".loss.csv")
    write_loss_csv(report, loss_csv)
    _echo_config(cfg, out_path.parent, f"train_{args.model}")
    print(f"saved checkpoint {out_path} and losses {loss_csv} "
          f"({report.seconds:.1f}s)")
    return 0


def _eval_days(sset: SampleSet, train_frac: float) -> tuple[int, list[int]]:
    n = sset.n_days
    split_at = int(np.floor(n * train_frac))
    return split_at, list(range(split_at, n))


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    sset = _load_dataset(args.data or cfg.dataset)
    train_set, eval_set = split(sset, cfg.train_frac)
    thresholds = compute_threshold_map(train_set.targets)
    tiles = tile_partition(sset.spec, cfg.tile_size)
    dropped = dropped_pixel_count(sset.spec, cfg.tile_size)
    if dropped:
        print(f"note: tiling drops {dropped} remainder pixels")

    split_at, days = _eval_days(sset, cfg.train_frac)
    observations = [sset.targets[d] for d in days]

    rows = []
    pers = [persistence_forecast(sset.targets[d - cfg.lead_days], thresholds)
            for d in days]
    rows += evaluate_model("persistence", pers, observations, thresholds, tiles)

    seen: dict[str, int] = {}
    for ckpt in args.checkpoint or []:
        if not Path(ckpt).is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        _check_grid(model, sset.spec, ckpt)
        mcfg = model.config
        if days[0] - mcfg.lead_days - mcfg.history_days + 1 < 0:
            raise ValueError(
                f"eval split too early for history ({mcfg.history_days} days)"
            )
        forecasts = model.forecast_batch(
            _histories(sset, days, mcfg.history_days, mcfg.lead_days)
        )
        seen[model.kind] = seen.get(model.kind, 0) + 1
        name = model.kind if seen[model.kind] == 1 else f"{model.kind}-{seen[model.kind]}"
        rows += evaluate_model(name, forecasts, observations, thresholds, tiles)

    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.csv"
    write_report_csv(rows, report_path)

    tile_rows = [r for r in rows if r.tier == "tile"]
    grouped_bar_chart(
        out_dir / "tile_metrics.svg",
        "Tile-level skill on the evaluation split",
        ["POD", "FAR", "CSI"],
        [(r.model, [r.scores.pod, r.scores.far, r.scores.csi]) for r in tile_rows],
    )
    _echo_config(cfg, out_dir, "evaluate")
    sys.stdout.write(rows_to_csv(rows))
    print(f"wrote {report_path} and {out_dir / 'tile_metrics.svg'}")
    return 0


def cmd_case_study(cfg: RunConfig, args: argparse.Namespace) -> int:
    sset = _load_dataset(args.data or cfg.dataset)
    train_set, _ = split(sset, cfg.train_frac)
    thresholds = compute_threshold_map(train_set.targets)
    tiles = tile_partition(sset.spec, cfg.tile_size)
    n_cols = sset.spec.width // cfg.tile_size
    n_rows = sset.spec.height // cfg.tile_size
    if not (0 <= args.tile_row < n_rows and 0 <= args.tile_col < n_cols):
        raise UsageError(
            f"tile ({args.tile_row}, {args.tile_col}) outside the "
            f"{n_rows}x{n_cols} tile grid"
        )
    tile = tiles[args.tile_row * n_cols + args.tile_col]

    split_at, _ = _eval_days(sset, cfg.train_frac)
    if args.window < 1:
        raise UsageError("--window must be >= 1")
    start = args.center_day - args.window // 2
    days = list(range(start, start + args.window))
    if days[0] < split_at or days[-1] >= sset.n_days:
        raise UsageError(
            f"window {days[0]}..{days[-1]} outside the eval split "
            f"[{split_at}, {sset.n_days - 1}]"
        )

    models = []
    for ckpt in args.checkpoint or []:
        if not Path(ckpt).is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        model = load_checkpoint(ckpt)
        _check_grid(model, sset.spec, ckpt)
        models.append(model)

    header = ["day", "obs_tile_max", "persistence_pred_max", "persistence_prob"]
    for m in models:
        header += [f"{m.kind}_pred_max", f"{m.kind}_prob"]

    columns: list[list[float]] = [[] for _ in header]
    per_model_fcs = [
        m.forecast_batch(_histories(sset, days, m.config.history_days,
                                    m.config.lead_days))
        for m in models
    ]
    for i, d in enumerate(days):
        row = [float(d), tile_max(sset.targets[d].values, tile)]
        pers = persistence_forecast(sset.targets[d - cfg.lead_days], thresholds)
        with np.errstate(over="ignore"):
            row += [tile_max(inv_log1p(pers.log_intensity), tile),
                    tile_max(pers.exceed_prob, tile)]
            for fcs in per_model_fcs:
                row += [tile_max(inv_log1p(fcs[i].log_intensity), tile),
                        tile_max(fcs[i].exceed_prob, tile)]
        for col, v in zip(columns, row):
            col.append(v)

    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "case_study.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(days)):
            cells = [str(days[i])] + [repr(col[i]) for col in columns[1:]]
            fh.write(",".join(cells) + "\n")

    series = [("observed", columns[1]), ("persistence", columns[2])]
    for mi, m in enumerate(models):
        series.append((m.kind, columns[4 + 2 * mi]))
    line_chart(
        out_dir / "case_study.svg",
        f"Tile ({args.tile_row},{args.tile_col}) rainfall, days "
        f"{days[0]}..{days[-1]}",
        days, series, "tile max rainfall (mm/day)",
    )
    _echo_config(cfg, out_dir, "case_study")
    print(f"wrote {csv_path} and {out_dir / 'case_study.svg'}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--seed", type=int, help="global seed override")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pglode",
        description="Physics-gated latent ODE rainfall forecasting testbed",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    _add_common(g)
    g.add_argument("--n-days", type=int, dest="n_days")
    g.add_argument("--out", help="output dataset path (.pgl1)")
    g.set_defaults(handler=cmd_generate)

    t = sub.add_parser("train", help="train one model on a dataset")
    _add_common(t)
    t.add_argument("--model", required=True, choices=MODEL_KINDS)
    t.add_argument("--data", help="dataset path")
    t.add_argument("--out", help="checkpoint output path (.pgw1)")
    t.add_argument("--epochs", type=int)
    t.set_defaults(handler=cmd_train)

    e = sub.add_parser("evaluate", help="score persistence plus checkpoints")
    _add_common(e)
    e.add_argument("--data", help="dataset path")
    e.add_argument("--checkpoint", action="append", metavar="PGW1",
                   help="checkpoint to evaluate (repeatable)")
    e.add_argument("--out", help="report directory")
    e.set_defaults(handler=cmd_evaluate)

    c = sub.add_parser("case-study", help="tile time series around one day")
    _add_common(c)
    c.add_argument("--data", help="dataset path")
    c.add_argument("--checkpoint", action="append", metavar="PGW1",
                   help="checkpoint to include (repeatable)")
    c.add_argument("--tile-row", type=int, required=True)
    c.add_argument("--tile-col", type=int, required=True)
    c.add_argument("--center-day", type=int, required=True)
    c.add_argument("--window", type=int, default=12,
                   help="total days in the window (default 12)")
    c.add_argument("--out", help="output directory")
    c.set_defaults(handler=cmd_case_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1

    try:
        cfg = _resolve_config(args)
        return args.handler(cfg, args)
    except UsageError as exc:
        _err(exc)
        return 1
    except FileFormatError as exc:
        _err(exc)
        return 2
    except (IntegrationError, DivergenceError, FloatingPointError, OverflowError,
            ZeroDivisionError) as exc:
        _err(exc)
        return 3
    except (OSError, ValueError) as exc:
        _err(exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
