"""Command-line pipeline: build, train, sweep, simulate, score, evaluate, report.

Every command reads and writes files; there is no shared state between
commands. ``--config FILE`` (YAML or JSON) may hold one section per command
whose keys are option names; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from scadatensor import __version__
from scadatensor.artifacts import read_document, write_document
from scadatensor.baselines import (
    NmfDetector,
    NmfOptions,
    PcaModel,
    pca_fit,
    pca_score_batch,
    train_nmf,
)
from scadatensor.cpapr import FitOptions
from scadatensor.detector import DetectorModel, sweep_detector, train_detector
from scadatensor.errors import ConfigError, DataError, ScadaTensorError
from scadatensor.evaluation import DEFAULT_RANK_GRID, roc_pr
from scadatensor.experiment import ReplicationConfig, check_orderings, run_replication
from scadatensor.ingest import (
    DimensionEncoder,
    TensorBuild,
    TimeBinning,
    build_tensor,
    delta_times_in_order,
    fit_encoders,
    fit_time_bins,
    get_schema,
    read_log,
    write_log,
)
from scadatensor.scoring import read_scores, score_batch, write_scores
from scadatensor.simulator import (
    SCENARIOS,
    ScenarioConfig,
    SystemProfile,
    learn_profile,
    simulate_scenario,
    synthesize_history,
)
from scadatensor.sparse_tensor import SparseTensorCOO

OUT_ENV = "SCADATENSOR_OUT"
TENSOR_FILE = "tensor.txt"
MODEL_FILE = "model.json"
NMF_FILE = "nmf.json"
PCA_FILE = "pca.json"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1, not argparse's 2 (2 is reserved for data errors)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _fit_options(args) -> FitOptions:
    return FitOptions(max_iters=args.max_iters, tol=args.tol, seed=args.seed)


# ---------------------------------------------------------------------------
# build artifacts


def _save_build(build: TensorBuild, out: Path, input_path: str) -> None:
    build.tensor.save(out / TENSOR_FILE)
    write_document(out / "build.json", "build", {
        "schema": build.schema.name,
        "input": str(input_path),
        "tensor": TENSOR_FILE,
        "shape": list(build.tensor.shape),
        "nnz": build.tensor.nnz,
        "inflation": build.inflation,
        "encoders": {m: e.to_dict() for m, e in build.encoders.items()},
        "binning": build.binning.to_dict() if build.binning else None,
        "n_records": build.n_records,
        "n_skipped": build.n_skipped,
        "n_oov": len(build.oov),
    })


def _load_build(path) -> tuple[TensorBuild, dict]:
    path = Path(path)
    doc_path = path / "build.json" if path.is_dir() else path
    doc = read_document(doc_path, "build")
    tensor = SparseTensorCOO.load(doc_path.parent / doc["tensor"])
    if list(tensor.shape) != list(doc["shape"]):
        raise ConfigError(f"{doc_path}: tensor shape {tensor.shape} does not match "
                          f"recorded shape {tuple(doc['shape'])}")
    build = TensorBuild(
        tensor=tensor,
        schema=get_schema(doc["schema"]),
        encoders={m: DimensionEncoder.from_dict(e) for m, e in doc["encoders"].items()},
        binning=TimeBinning.from_dict(doc["binning"]) if doc.get("binning") else None,
        n_records=int(doc["n_records"]),
        n_skipped=int(doc["n_skipped"]),
        inflation=int(doc["inflation"]),
    )
    return build, doc


def _labeled_log(path):
    records = read_log(path)
    if not records or any(r.label is None for r in records):
        raise DataError(f"{path}: validation log needs a label on every record")
    return records


# ---------------------------------------------------------------------------
# commands


def cmd_synthesize(args) -> int:
    records = synthesize_history(args.messages, seed=args.seed)
    out = _out_dir(args)
    path = out / args.name
    write_log(records, path)
    if args.profile:
        learn_profile(records).save(out / "profile.json")
    print(f"wrote {len(records)} messages to {path}")
    return 0


def cmd_build(args) -> int:
    records = read_log(args.input)
    build = build_tensor(records, args.schema, target_bins=args.bins)
    out = _out_dir(args)
    _save_build(build, out, args.input)
    print(build.skip_report(), file=sys.stderr)
    print(f"built {build.schema.name} tensor shape={build.tensor.shape} "
          f"nnz={build.tensor.nnz} density={build.tensor.density:.6g} -> {out}")
    return 0


def _run_sweep(build, args):
    grid = _int_list(args.grid) if args.grid else list(DEFAULT_RANK_GRID)
    if any(r < 1 for r in grid):
        raise UsageError("ranks must be >= 1")
    validation = _labeled_log(args.validation)
    return sweep_detector(build, validation, grid, _fit_options(args))


def cmd_sweep(args) -> int:
    build, _ = _load_build(args.build)
    sweep = _run_sweep(build, args)
    out = _out_dir(args)
    write_document(out / "sweep.json", "sweep", {
        "schema": build.schema.name, "best_rank": sweep.best_rank,
        "pr_auc": {str(r): v for r, v in sweep.pr_aucs.items()}})
    for r, v in sweep.pr_aucs.items():
        print(f"rank {r:>3}  pr_auc {v:.6f}")
    print(f"chosen rank {sweep.best_rank}")
    return 0


def cmd_train(args) -> int:
    build, doc = _load_build(args.build)
    if args.validation:
        sweep = _run_sweep(build, args)
        rank = sweep.best_rank
    elif args.rank is not None:
        rank = args.rank
    else:
        raise UsageError("train needs --rank or --validation (rank sweep)")
    if rank < 1:
        raise UsageError(f"rank must be >= 1, got {rank}")
    detector = train_detector(build, rank, _fit_options(args))
    out = _out_dir(args)
    detector.save(out / MODEL_FILE)
    print(f"chosen rank {rank}")
    print(f"final objective {detector.objective:.10g}")
    if args.baselines:
        records = read_log(doc["input"])
        nmf_build = build_tensor(records, args.nmf_schema)
        nmf = train_nmf(nmf_build, args.nmf_rank, NmfOptions(seed=args.seed))
        nmf.save(out / NMF_FILE)
        encoders = fit_encoders(records, ("rtu", "points", "channel"))
        binning = build.binning or fit_time_bins(delta_times_in_order(records), args.bins)
        pca = pca_fit(records, encoders, binning, args.variance)
        pca.save(out / PCA_FILE)
        print(f"baselines: NMF {args.nmf_schema} rank {nmf.model.rank}, "
              f"PCA {pca.k} components ({pca.explained:.3f} variance)")
    return 0


def cmd_simulate(args) -> int:
    if args.profile:
        profile = SystemProfile.load(args.profile)
    elif args.input:
        profile = learn_profile(read_log(args.input))
    else:
        raise UsageError("simulate needs --profile or --input")
    if args.total is not None:
        if args.anomalies >= args.total:
            raise UsageError(f"anomaly count {args.anomalies} must be below total {args.total}")
        n_benign = args.total - args.anomalies
    else:
        n_benign = args.benign
    out = _out_dir(args)
    scenarios = args.scenario or list(SCENARIOS)
    for sc in scenarios:
        config = ScenarioConfig(sc, n_benign, args.anomalies,
                                rtu_range=tuple(_int_list(args.rtu_range)),
                                points_range=tuple(_int_list(args.points_range)),
                                seed=args.seed)
        stream = simulate_scenario(profile, config)
        path = out / f"{sc}.csv"
        write_log(stream, path)
        write_document(out / f"{sc}.config.json", "scenario", config.to_dict())
        print(f"{sc}: {len(stream)} messages, {config.n_anomalies} anomalous -> {path}")
    return 0


def _evaluate_scored(scored, out: Path, prefix: str, label: str, rank) -> None:
    pairs = [(s.p_value, s.record.label) for s in scored if s.p_value is not None]
    report = roc_pr(pairs)
    report.extra.update(model=label, rank=rank,
                        skipped=sum(s.status == "skipped" for s in scored))
    report.write(out, prefix)
    print(f"{label}: roc_auc {report.roc_auc:.6f}  pr_auc {report.pr_auc:.6f}  "
          f"anomalous {report.n_anomalous}  benign {report.n_benign}")


def _load_detector(path):
    doc = read_document(path, "model")
    kind = doc.get("kind")
    if kind == "cp_apr":
        return DetectorModel.from_dict(doc)
    if kind == "nmf":
        return NmfDetector.load(path)
    raise ConfigError(f"{path}: cannot score with a {kind!r} model here")


def cmd_score(args) -> int:
    model = _load_detector(args.model)
    if args.schema and args.schema != model.schema.name:
        raise ConfigError(f"model is {model.schema.name} but --schema is {args.schema}")
    records = read_log(args.input)
    labeled = bool(records) and all(r.label is not None for r in records)
    out = _out_dir(args)
    scored = score_batch(model, records)
    write_scores(scored, out / "scores.csv")
    skipped = sum(s.status == "skipped" for s in scored)
    oov = sum(s.oov for s in scored)
    print(f"scored {len(scored) - skipped} of {len(scored)} messages "
          f"({oov} out of vocabulary, {skipped} skipped) -> {out / 'scores.csv'}")
    runs = [(scored, "", model.schema.name, model.model.rank)]
    if args.baselines:
        base = Path(args.model).parent
        nmf = NmfDetector.load(base / NMF_FILE)
        pca = PcaModel.load(base / PCA_FILE)
        for name, result, rank in (
                (f"NMF_{nmf.schema.name}", score_batch(nmf, records), nmf.model.rank),
                ("PCA", pca_score_batch(pca, records), pca.k)):
            prefix = name.lower() + "_"
            write_scores(result, out / f"{prefix}scores.csv", model_name=name)
            runs.append((result, prefix, name, rank))
    if not labeled:
        print("notice: input has no labels; evaluation skipped", file=sys.stderr)
        return 0
    for result, prefix, name, rank in runs:
        _evaluate_scored(result, out, prefix, name, rank)
    return 0


def cmd_evaluate(args) -> int:
    ps, labels, skipped = read_scores(args.scores)
    if any(lab is None for lab in labels):
        raise DataError(f"{args.scores}: evaluation needs a label on every scored row")
    report = roc_pr(zip(ps, labels))
    report.extra["skipped"] = skipped
    out = _out_dir(args)
    report.write(out, args.prefix)
    print(f"roc_auc {report.roc_auc:.6f}  pr_auc {report.pr_auc:.6f}  "
          f"anomalous {report.n_anomalous}  benign {report.n_benign}  skipped {skipped}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        p = Path(path)
        files = sorted(p.glob("*metrics.json")) if p.is_dir() else [p]
        if not files:
            raise DataError(f"no metrics documents under {p}")
        for f in files:
            doc = read_document(f, "metrics")
            rows.append((str(f), doc.get("model", ""), doc["roc_auc"], doc["pr_auc"],
                         doc["n_anomalous"], doc["n_benign"]))
    width = max(len(r[0]) for r in rows)
    print(f"{'metrics':<{width}}  {'model':<8}  {'roc_auc':>8}  {'pr_auc':>8}  "
          f"{'anom':>6}  {'benign':>7}")
    for f, m, roc, pr, na, nb in rows:
        print(f"{f:<{width}}  {m:<8}  {roc:>8.4f}  {pr:>8.4f}  {na:>6}  {nb:>7}")
    return 0


def cmd_experiment(args) -> int:
    out = _out_dir(args)
    grid = None if args.fixed_ranks else tuple(_int_list(args.grid))
    results, checks = [], []
    for seed in _int_list(args.seeds):
        cfg = ReplicationConfig(seed=seed, n_train=args.train, n_benign=args.benign,
                                n_anomalies=args.anomalies, target_bins=args.bins,
                                scenarios=tuple(args.scenario or SCENARIOS),
                                rank_grid=grid)
        res = run_replication(cfg)
        check = check_orderings(res)
        results.append(res.to_dict() | {"checks": check})
        checks.append(check)
        print(f"seed {seed}: ranks {res.ranks}")
        for sc, row in res.pr_auc.items():
            cells = "  ".join(f"{m} {v:.4f}" for m, v in row.items())
            print(f"  {sc:<9} pr_auc  {cells}")
    write_document(out / "replication.json", "replication", {"runs": results})
    for key in checks[0]:
        held = sum(c[key] for c in checks)
        print(f"{key}: held in {held} of {len(checks)} seeds")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_fit_args(p) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scadatensor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="YAML or JSON file with per-command sections")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or .)")
        p.set_defaults(func=func)
        return p

    p = command("synthesize", cmd_synthesize, "write a synthetic benign training log")
    p.add_argument("--messages", type=int, default=80_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="train.csv")
    p.add_argument("--profile", action="store_true", help="also write profile.json")

    p = command("build", cmd_build, "build a sparse tensor from a message log")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", default="IPC", choices=("IPT", "IPCT", "IPC"))
    p.add_argument("--bins", type=int, default=64, help="target number of time bins")

    p = command("train", cmd_train, "fit rank-1 and rank-R models and fuse them")
    p.add_argument("--build", required=True, help="build directory or build.json")
    p.add_argument("--rank", type=int)
    p.add_argument("--validation", help="labeled log; pick the rank by a sweep")
    p.add_argument("--grid", help="comma-separated ranks for the sweep")
    p.add_argument("--baselines", action="store_true", help="also fit NMF and PCA")
    p.add_argument("--nmf-schema", default="IP", choices=("IP", "IC"))
    p.add_argument("--nmf-rank", type=int)
    p.add_argument("--variance", type=float, default=0.95, help="PCA variance target")
    p.add_argument("--bins", type=int, default=64, help="PCA time bins for count-free builds")
    _add_fit_args(p)

    p = command("sweep", cmd_sweep, "validation PR AUC for each rank in a grid")
    p.add_argument("--build", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--grid")
    _add_fit_args(p)

    p = command("simulate", cmd_simulate, "write labeled attack scenarios")
    p.add_argument("--profile")
    p.add_argument("--input", help="benign log to learn the profile from")
    p.add_argument("--scenario", action="append", choices=SCENARIOS)
    p.add_argument("--benign", type=int, default=13_000)
    p.add_argument("--anomalies", type=int, default=100)
    p.add_argument("--total", type=int, help="total messages; overrides --benign")
    p.add_argument("--rtu-range", default="0,255")
    p.add_argument("--points-range", default="1,64")
    p.add_argument("--seed", type=int, default=0)

    p = command("score", cmd_score, "p-value for every message; evaluate if labeled")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--schema")
    p.add_argument("--baselines", action="store_true",
                   help=f"also score with {NMF_FILE} and {PCA_FILE} next to the model")

    p = command("evaluate", cmd_evaluate, "ROC/PR curves and AUCs of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--prefix", default="")

    p = command("report", cmd_report, "tabulate metrics documents")
    p.add_argument("metrics", nargs="+", help="metrics.json files or directories")

    p = command("experiment", cmd_experiment, "desk-scale replication over seeds")
    p.add_argument("--seeds", default="0")
    p.add_argument("--train", type=int, default=80_000)
    p.add_argument("--benign", type=int, default=13_000)
    p.add_argument("--anomalies", type=int, default=100)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--scenario", action="append", choices=SCENARIOS)
    p.add_argument("--grid", default="1,2,3,5,8,12,20,30,47")
    p.add_argument("--fixed-ranks", action="store_true",
                   help="use the default ranks instead of a validation sweep")
    return parser


def _load_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping of command sections")
    return data


def _apply_config(parser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if a in subparsers), None)
    if known.config and command:
        section = _load_config(known.config).get(command) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{known.config}: section {command!r} must be a mapping")
        subparser = subparsers[command]
        dests = {a.dest for a in subparser._actions} - {"help", "func"}
        defaults = {}
        for key, value in section.items():
            dest = key.replace("-", "_")
            if dest not in dests:
                raise ConfigError(f"{known.config}: unknown option {key!r} for {command}")
            defaults[dest] = value
        # config values become defaults, so flags on the command line still win
        for action in subparser._actions:
            if action.dest in defaults:
                action.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ScadaTensorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
