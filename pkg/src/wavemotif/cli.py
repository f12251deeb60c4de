"""Command-line entry point: one subcommand per stage of the hybrid forecaster.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence, non-finite output, failed self-check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

# numpy is imported lazily so --threads can take effect before BLAS starts.

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("wavemotif")


class CliError(Exception):
    def __init__(self, code: int, stage: str, message: str):
        super().__init__(message)
        self.code = code
        self.stage = stage


def _limit_threads(n: int) -> None:
    # Must run before numpy loads a BLAS pool.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args):
    from .config import ConfigError, RunConfig

    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            key, value = item.split("=", 1)
            cfg.override(key.strip(), value.strip())
        if args.seed is not None:
            cfg.training.seed = args.seed
        if getattr(args, "output_dir", None):
            cfg.paths.output_dir = args.output_dir
        cfg.validate()
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, "config", str(exc)) from None
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(value, flag: str, stage: str):
    if value is None:
        raise CliError(EXIT_USAGE, stage, f"missing input: pass {flag} or set it in the config")
    if not Path(value).exists():
        raise CliError(EXIT_DATA, stage, f"{value}: file not found")
    return value


def _read_graph(path, stage, node_count=None):
    from .roadgraph import GraphError, read_edge_list

    try:
        return read_edge_list(_need(path, "--graph", stage), node_count)
    except GraphError as exc:
        raise CliError(EXIT_DATA, stage, str(exc)) from None


def _read_matrix(path, stage):
    from .data import DataError, SpeedMatrix, impute

    try:
        speeds = SpeedMatrix.read_csv(_need(path, "--matrix", stage))
        return impute(speeds) if speeds.missing_mask.any() else speeds
    except DataError as exc:
        raise CliError(EXIT_DATA, stage, str(exc)) from None


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args, cfg) -> None:
    from datetime import datetime

    from .data import DataError, aggregate, impute, read_records

    graph = _read_graph(args.graph or cfg.paths.graph, "ingest")
    ids = [str(i) for i in range(graph.node_count)]
    try:
        records = read_records(_need(args.records or cfg.paths.records, "--records", "ingest"))
        start = datetime.fromisoformat(args.start) if args.start else None
        agg = aggregate(records, args.interval_minutes, ids, start=start, days=args.days)
    except (DataError, ValueError) as exc:
        raise CliError(EXIT_DATA, "ingest", str(exc)) from None
    if agg.unknown_count:
        log.warning("%d records reference unknown segments: %s", agg.unknown_count,
                    dict(sorted(agg.unknown_segments.items())))
    matrix = agg.matrix
    if args.impute:
        try:
            matrix = impute(matrix)
        except DataError as exc:
            raise CliError(EXIT_DATA, "ingest", str(exc)) from None
    out = _out_dir(cfg) / "matrix.csv"
    matrix.to_csv(out)
    print(f"wrote {out} ({matrix.values.shape[0]} segments x {matrix.values.shape[1]} intervals, "
          f"{int(matrix.missing_mask.sum())} missing cells, {agg.unknown_count} unknown-segment records)")


def cmd_synth(args, cfg) -> None:
    from .benchmark import load_benchmark
    from .data import DataError, generate_synthetic
    from .roadgraph import write_edge_list

    try:
        graph, roads, segments, spec = load_benchmark(args.spec)
        if args.graph:
            graph = _read_graph(args.graph, "synth", spec.segment_count)
        result = generate_synthetic(spec, graph)
    except DataError as exc:
        raise CliError(EXIT_DATA, "synth", str(exc)) from None
    out = _out_dir(cfg)
    result.matrix.to_csv(out / "matrix.csv")
    write_edge_list(graph, out / "graph.edges")
    with open(out / "segments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "road_id", "direction", "tail", "head"])
        for seg in segments:
            w.writerow([seg.index, seg.road_id, seg.direction, seg.tail, seg.head])
    print(f"wrote {out / 'matrix.csv'} and {out / 'graph.edges'} "
          f"({graph.node_count} segments, clipping rate {result.clipping_rate:.4f})")


def cmd_decompose(args, cfg) -> None:
    import numpy as np

    from .pipeline import StageError, causal_bands, decompose_all

    speeds = _read_matrix(args.matrix or cfg.paths.matrix, "decompose")
    wc = cfg.wavelet
    try:
        if args.causal:
            comps = causal_bands(speeds.values, cfg, speeds.segment_ids)
        else:
            comps = decompose_all(speeds.values, wc.level, wc.name, wc.mode, speeds.segment_ids)
    except StageError as exc:
        raise CliError(EXIT_DATA, "decompose", str(exc)) from None
    out = _out_dir(cfg)
    names = ["band_A.csv"] + [f"band_D{i + 1}.csv" for i in range(wc.level)]
    for name, band in zip(names, comps.bands):
        _write_band(out / name, band, speeds.segment_ids)
    if args.verify:
        err = float(np.max(np.abs(comps.total() - speeds.values)))
        if err >= 1e-8:
            raise CliError(EXIT_NUMERIC, "decompose", f"bands do not add up to the input (max error {err:.3g})")
        print(f"additivity check passed (max error {err:.3g})")
    print(f"wrote {len(names)} band files to {out}")


def _write_band(path, band, segment_ids) -> None:
    # Same layout as a speed matrix file; detail bands are signed.
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(segment_ids))
        for row in band.T:
            w.writerow([repr(float(v)) for v in row])


def _fit(args, cfg, stage):
    from .pipeline import fit_hybrid

    speeds = _read_matrix(args.matrix or cfg.paths.matrix, stage)
    graph = _read_graph(args.graph or cfg.paths.graph, stage, speeds.values.shape[0])
    return speeds, graph, fit_hybrid(speeds, graph, cfg)


def cmd_train(args, cfg) -> None:
    from .arma import write_models
    from .neural import save_checkpoint, write_loss_history

    speeds, graph, fitted = _fit(args, cfg, "train")
    out = _out_dir(cfg)
    save_checkpoint(fitted.model, out / "checkpoint.npz", cfg.to_dict())
    write_models(fitted.arma_records(speeds.segment_ids), out / "arma_models.jsonl")
    write_loss_history(fitted.loss_history, out / "loss_history.csv")
    h = fitted.loss_history
    summary = f"loss {h[0]:.6g} -> {h[-1]:.6g} over {len(h)} epochs" if h else "no epochs run"
    print(f"wrote {out / 'checkpoint.npz'} and {out / 'arma_models.jsonl'}; {summary}")


def cmd_predict(args, cfg) -> None:
    from .neural import load_checkpoint
    from .pipeline import FittedHybrid, forecast_hybrid

    out = _out_dir(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    models = Path(args.arma) if args.arma else out / "arma_models.jsonl"
    speeds = _read_matrix(args.matrix or cfg.paths.matrix, "predict")
    try:
        model, _ = load_checkpoint(_need(str(ckpt), "--checkpoint", "predict"))
        records = [json.loads(line) for line in Path(_need(str(models), "--arma", "predict")).read_text().splitlines()
                   if line.strip()]
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(EXIT_DATA, "predict", str(exc)) from None
    arma_models = FittedHybrid.arma_from_records(records, speeds.segment_ids, cfg.wavelet.level)
    result = forecast_hybrid(FittedHybrid(model, arma_models), speeds, cfg)
    result.write_predictions(out / "predictions.csv")
    result.report.write(out / "report.json")
    _print_report("hybrid", result.report)


def read_predictions(path):
    """Predicted and actual columns of a predictions CSV, with segment ids in file order."""
    import numpy as np

    pred, act, seg = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"segment_id", "predicted_speed", "actual_speed"}
        if not need <= set(reader.fieldnames or ()):
            raise ValueError(f"{path}: expected columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                pred.append(float(row["predicted_speed"]))
                act.append(float(row["actual_speed"]) if row["actual_speed"] != "" else np.nan)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric speed") from None
            seg.append(row["segment_id"])
    if not pred:
        raise ValueError(f"{path}: no rows")
    return np.array(pred), np.array(act), seg


def cmd_evaluate(args, cfg) -> None:
    import numpy as np

    from .pipeline import StageError, evaluate

    out = _out_dir(cfg)
    path = Path(args.predictions) if args.predictions else out / "predictions.csv"
    try:
        pred, act, seg = read_predictions(_need(str(path), "--predictions", "evaluate"))
    except ValueError as exc:
        raise CliError(EXIT_DATA, "evaluate", str(exc)) from None
    ids = list(dict.fromkeys(seg))
    seg = np.array(seg)
    counts = {s: int((seg == s).sum()) for s in ids}
    if len(set(counts.values())) != 1:
        raise CliError(EXIT_DATA, "evaluate", "segments have different numbers of rows")
    k = counts[ids[0]]
    order = np.concatenate([np.flatnonzero(seg == s) for s in ids])
    p, a = pred[order].reshape(len(ids), k), act[order].reshape(len(ids), k)
    try:
        report = evaluate(p, a, np.isfinite(a), cfg.metrics.eps_mape, ids)
    except StageError as exc:
        raise CliError(EXIT_DATA, "evaluate", str(exc)) from None
    report.write(out / (args.report or "report.json"))
    _print_report(path.name, report)


def cmd_baseline(args, cfg) -> None:
    from .pipeline import run_baseline

    speeds = _read_matrix(args.matrix or cfg.paths.matrix, "baseline")
    graph = None
    if args.graph or cfg.paths.graph:
        graph = _read_graph(args.graph or cfg.paths.graph, "baseline", speeds.values.shape[0])
    result = run_baseline(speeds, graph, cfg, args.kind)
    out = _out_dir(cfg)
    result.write_predictions(out / f"predictions_{args.kind}.csv")
    result.report.write(out / f"report_{args.kind}.json")
    _print_report(args.kind, result.report)


def cmd_sweep(args, cfg) -> None:
    from .pipeline import parameter_sweep, write_sweep

    speeds = _read_matrix(args.matrix or cfg.paths.matrix, "sweep")
    graph = _read_graph(args.graph or cfg.paths.graph, "sweep", speeds.values.shape[0])
    values = None
    if args.values:
        try:
            values = [int(v) for v in args.values.split(",")]
        except ValueError:
            raise CliError(EXIT_USAGE, "sweep", f"--values must be comma-separated integers, got {args.values!r}") from None

    def show(row):
        print(f"{row['axis']}={row['value']}: MAE {row['mae']:.4f}  MAPE {row['mape']:.3f}%  RMSE {row['rmse']:.4f}",
              flush=True)

    rows = parameter_sweep(speeds, graph, cfg, args.axis, values, on_row=show)
    out = _out_dir(cfg) / f"sweep_{args.axis}.csv"
    write_sweep(rows, out)
    print(f"wrote {out}")


def _print_report(name, report) -> None:
    print(f"{name}: MAE {report.mae:.4f}  MAPE {report.mape_percent:.3f}%  RMSE {report.rmse:.4f}  "
          f"({report.sample_count} points)")


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="training seed (overrides training.seed)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, bit-reproducible)")
    common.add_argument("--output-dir", help="directory for every output file (overrides paths.output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wavemotif", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="aggregate GPS speed records into a speed matrix")
    p.add_argument("--records", help="CSV timestamp_iso8601,segment_id,speed_kmh")
    p.add_argument("--graph", help="edge list; node ids are the segment ids")
    p.add_argument("--interval-minutes", type=int, default=15)
    p.add_argument("--start", help="first interval start (ISO 8601); default: midnight of the first record")
    p.add_argument("--days", type=int, help="number of days to cover")
    p.add_argument("--impute", action="store_true", help="fill gaps by linear interpolation")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--spec", help="benchmark TOML (default: the packaged benchmark)")
    p.add_argument("--graph", help="edge list replacing the benchmark's grid network")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decompose", parents=[common], help="write one CSV per wavelet band")
    p.add_argument("--matrix", help="speed matrix CSV")
    p.add_argument("--causal", action="store_true", help="trailing-window bands instead of whole-series bands")
    p.add_argument("--verify", action="store_true", help="check the bands add up to the input")
    p.set_defaults(func=cmd_decompose)

    for name, func, text in (("train", cmd_train, "fit the network and the band ARMA models"),):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--matrix")
        p.add_argument("--graph")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="forecast the test days from a trained checkpoint")
    p.add_argument("--matrix")
    p.add_argument("--checkpoint", help="default: <output-dir>/checkpoint.npz")
    p.add_argument("--arma", help="default: <output-dir>/arma_models.jsonl")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score a predictions CSV")
    p.add_argument("--predictions", help="default: <output-dir>/predictions.csv")
    p.add_argument("--report", help="report file name inside the output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", parents=[common], help="score a reference forecaster")
    p.add_argument("--kind", required=True,
                   choices=["persistence", "historical_average", "lstm_only", "arma_only", "motif_gcrnn_no_dwt"])
    p.add_argument("--matrix")
    p.add_argument("--graph")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep", parents=[common], help="re-run the hybrid over one hyperparameter")
    p.add_argument("--axis", required=True, choices=["K", "m", "n"])
    p.add_argument("--values", help="comma-separated integers (default: 1..5 for K, 1..8 for m and n)")
    p.add_argument("--matrix")
    p.add_argument("--graph")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error [usage]: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _limit_threads(args.threads)

    from .arma import ArmaError
    from .neural import ShapeError, TrainingDiverged
    from .pipeline import StageError

    try:
        cfg = _load_config(args)
        args.func(args, cfg)
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except StageError as exc:
        code = EXIT_NUMERIC if exc.stage in ("train", "predict") else EXIT_DATA
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return code
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ArmaError, OSError, ValueError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
