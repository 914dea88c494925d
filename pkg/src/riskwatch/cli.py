"""riskwatch command line.

Every stage reads and writes files under ``--out`` (default ``riskwatch-out``):

    data/records.csv        gen
    prepared/*              preprocess
    models/*.json           train lstm|rf|gbt
    reports/metrics.json    eval        (also reports/roc.csv)
    reports/backtest.json   backtest
    bundle/                 calibrate   (what serve loads)
    replay/                 replay

``bench`` writes its report files directly into ``--out``. Failures print a
single JSON object ``{"error": {code, message, details}}`` on stderr and
exit nonzero (2 configuration, 3 missing artifact, 1 anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .taxonomy import RISK_TYPES

logger = logging.getLogger("riskwatch")

MODEL_KEYS = {"lstm": "lstm", "rf": "random_forest", "gbt": "gradient_boosting"}
# published per-risk AUC values, reported next to ours for comparison only
REFERENCE_AUC = {"liquidity": 0.95, "operational": 0.82}


class CliError(Exception):
    def __init__(self, code: str, message: str, details=None, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = details
        self.exit_code = exit_code


def missing(path: Path, producer: str) -> CliError:
    return CliError("missing_artifact", f"{path} not found: run {producer} first",
                    {"path": str(path), "producer": producer}, exit_code=3)


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, producer: str, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise missing(p, producer)
        return p

    def ensure(self, *parts) -> Path:
        p = self.path(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def _load_records(ws: Workspace):
    from . import datagen

    return datagen.read_records(ws.require("gen", "data", "records.csv"))


def _load_samples(ws: Workspace):
    from .preprocess import FeatureMatrix, make_samples

    d = ws.require("preprocess", "prepared")
    for name in ("features.csv", "labels.csv", "meta.json"):
        ws.require("preprocess", "prepared", name)
    meta = json.loads((d / "meta.json").read_text())
    feats = FeatureMatrix.read_csv(d / "features.csv")
    labels = FeatureMatrix.read_csv(d / "labels.csv")
    return make_samples(feats, labels.values.astype(bool), meta["lookback"], meta["horizon"]), meta


def _load_models(ws: Workspace, names=None) -> dict:
    from .scoring import load_models

    d = ws.require("train", "models")
    models, _ = load_models(d)
    if names is not None:
        models = {k: v for k, v in models.items() if k in names}
    if not models:
        raise missing(d / "<model>.json", "train")
    return models


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    return "   n/a" if v is None else f"{v:6.3f}"


def comparison_table(blocks: dict) -> str:
    """Per model and risk type: accuracy, precision, recall, F1, AUC."""
    lines = [f"{'model':<18} {'risk_type':<13} {'acc':>6} {'prec':>6} {'recall':>6} {'f1':>6} {'auc':>6}"]
    for model, per_rt in blocks.items():
        for rt, m in per_rt.items():
            lines.append(f"{model:<18} {rt:<13} {_fmt(m['accuracy'])} {_fmt(m['precision'])} "
                         f"{_fmt(m['recall'])} {_fmt(m['f1'])} {_fmt(m.get('auc'))}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, ws: Workspace, args) -> dict:
    from . import datagen

    spec = cfg.generator_spec()
    try:
        records = datagen.generate(spec)
    except datagen.SpecError as exc:
        raise CliError("invalid_config", str(exc), getattr(exc, "problems", None), 2) from None
    path = ws.ensure("data") / "records.csv"
    datagen.write_records(records, path)
    days = datagen.trading_days(spec.start_date, spec.end_date)
    events = [{"risk_type": e.risk_type.value, "start": str(days[e.start]), "end": str(days[e.end - 1]),
               "magnitude": e.magnitude} for e in records.events]
    _write_json(ws.path("data", "events.json"), events)
    table = datagen.summarize(records).format()
    ws.path("data", "summary.txt").write_text(table + "\n")
    print(table)
    return {"records": str(path), "events": len(events)}


def cmd_preprocess(cfg: RunConfig, ws: Workspace, args) -> dict:
    from . import preprocess
    from .scoring import preprocess_state

    records = _load_records(ws)
    p = cfg["preprocess"]
    prepared = preprocess.prepare(records, p["lookback"], p["horizon"], p["z_threshold"], p["train_fraction"])
    d = ws.ensure("prepared")
    prepared.features.to_csv(d / "features.csv")
    preprocess.FeatureMatrix(prepared.features.timestamps, tuple(r.value for r in RISK_TYPES),
                             prepared.labels.astype(np.float64)).to_csv(d / "labels.csv")
    state = preprocess_state(prepared, records, p["z_threshold"])
    _write_json(d / "state.json", state.to_json())
    meta = {"lookback": p["lookback"], "horizon": p["horizon"], "z_threshold": p["z_threshold"],
            "train_fraction": p["train_fraction"], "train_rows": prepared.train_rows,
            "n_samples": len(prepared.samples), "n_features": len(prepared.features.feature_names)}
    _write_json(d / "meta.json", meta)
    print(f"{meta['n_samples']} samples, {meta['n_features']} features")
    return meta


def cmd_train(cfg: RunConfig, ws: Workspace, args) -> dict:
    from . import evaluation, lstm, trees

    samples, meta = _load_samples(ws)
    train_idx, _ = evaluation.holdout_split(samples, meta["train_fraction"])
    train = samples.subset(train_idx)
    d = ws.ensure("models")
    name = MODEL_KEYS[args.model]
    if name == "lstm":
        clf = lstm.LstmClassifier(cfg.train_config()).fit(train)
        lstm.save_checkpoint(d / "lstm.json", clf.params, clf.cfg)
        hist = clf.history.to_json() if getattr(clf, "history", None) is not None else {}
        _write_json(d / "lstm_history.json", hist)
        info = {"epochs": len(hist.get("epochs", [])), "best_epoch": hist.get("best_epoch")}
    elif name == "random_forest":
        clf = trees.TreeClassifier("random_forest", cfg.rf_params(), n_jobs=cfg["random_forest"]["n_jobs"])
        clf.fit(train)
        trees.save_checkpoint(d / "random_forest.json", clf)
        info = {"trees_per_risk_type": cfg.rf_params().n_trees}
    else:
        clf = trees.TreeClassifier("gradient_boosting", cfg.gbt_params()).fit(train)
        trees.save_checkpoint(d / "gradient_boosting.json", clf)
        info = {"final_loss": {rt.value: e.loss_history[-1] for rt, e in clf.ensembles.items()
                               if e.loss_history}}
    print(f"trained {name} on {len(train)} samples -> {d / (name + '.json')}")
    return {"model": name, "n_train": len(train), **info}


def cmd_eval(cfg: RunConfig, ws: Workspace, args) -> dict:
    from . import evaluation

    samples, meta = _load_samples(ws)
    models = _load_models(ws)
    _, test_idx = evaluation.holdout_split(samples, meta["train_fraction"])
    test = samples.subset(test_idx)
    blocks = evaluation.holdout_evaluate(models, test, args.threshold)
    report = evaluation.metrics_report(blocks, {"n_test": len(test), "threshold": args.threshold,
                                                "split": "holdout"})
    d = ws.ensure("reports")
    evaluation.write_report(d / "metrics.json", report)
    evaluation.write_roc_csv(d / "roc.csv", report)
    print(comparison_table(blocks))
    return {"report": str(d / "metrics.json"), "models": sorted(models)}


def _factories(cfg: RunConfig, names):
    from . import lstm, trees

    out = {}
    for n in names:
        if n == "lstm":
            out[n] = lambda: lstm.LstmClassifier(cfg.train_config())
        elif n == "random_forest":
            out[n] = lambda: trees.TreeClassifier("random_forest", cfg.rf_params(),
                                                  n_jobs=cfg["random_forest"]["n_jobs"])
        else:
            out[n] = lambda: trees.TreeClassifier("gradient_boosting", cfg.gbt_params())
    return out


def auc_ordering(pooled: dict) -> dict:
    """Per-model risk types ordered by pooled AUC, next to the reference values."""
    out = {}
    for model, per_rt in pooled.items():
        aucs = {rt: b["auc"] for rt, b in per_rt.items() if b.get("auc") is not None}
        out[model] = {"auc": aucs, "order": sorted(aucs, key=lambda r: -aucs[r]),
                      "liquidity_above_operational": (aucs["liquidity"] > aucs["operational"])
                      if "liquidity" in aucs and "operational" in aucs else None}
    return {"models": out, "reference": REFERENCE_AUC}


def cmd_backtest(cfg: RunConfig, ws: Workspace, args) -> dict:
    from . import evaluation

    samples, _ = _load_samples(ws)
    names = [MODEL_KEYS.get(m, m) for m in args.models.split(",")] if args.models else list(MODEL_KEYS.values())
    unknown = [n for n in names if n not in MODEL_KEYS.values()]
    if unknown:
        raise CliError("bad_argument", f"unknown model(s) {unknown}", {"allowed": sorted(MODEL_KEYS)}, 2)
    spec = cfg.backtest_spec()
    result = evaluation.rolling_backtest(_factories(cfg, names), samples, spec)
    report = evaluation.backtest_report(result, spec)
    report["auc_ordering"] = auc_ordering(result.pooled)
    path = ws.ensure("reports") / "backtest.json"
    _write_json(path, report)
    print(f"{len(result.windows)} windows ({spec.mode}, initial train {spec.initial_train} days)")
    print(comparison_table({m: {rt: {k: b[k] for k in ("accuracy", "precision", "recall", "f1", "auc")}
                                for rt, b in blk.items()} for m, blk in result.pooled.items()}))
    ref = ", ".join(f"{k} {v}" for k, v in REFERENCE_AUC.items())
    for m, o in report["auc_ordering"]["models"].items():
        print(f"{m}: AUC order {' > '.join(o['order'])} (reference: {ref})")
    return {"report": str(path), "windows": len(result.windows)}


def cmd_calibrate(cfg: RunConfig, ws: Workspace, args) -> dict:
    from .scoring import BUNDLE_FILES, PreprocessState, calibrate_models, save_bundle

    samples, _ = _load_samples(ws)
    models = _load_models(ws)
    state = PreprocessState.from_json(json.loads(ws.require("preprocess", "prepared", "state.json").read_text()))
    records = _load_records(ws)
    bayes = calibrate_models(models, samples)
    d = save_bundle(ws.path("bundle"), state, models, bayes, records)
    table = bayes.bucket_posteriors()
    for r, rt in enumerate(RISK_TYPES):
        print(f"{rt.value:<13} prior {bayes.prior[r]:.3f}  posterior by bucket "
              + " ".join(f"{q:.2f}" for q in table[r]))
    return {"bundle": str(d), "models": [n for n in BUNDLE_FILES if n in models]}


def cmd_serve(cfg: RunConfig, ws: Workspace, args) -> dict:
    from .service import ServiceConfig, serve

    if not cfg["service"]["tokens"]:
        raise CliError("invalid_config", "service.tokens is empty; add token:role entries", None, 2)
    sc = ServiceConfig.from_run_config(cfg)
    if sc.model_dir is None and ws.path("bundle", "preprocess.json").exists():
        sc.model_dir = ws.path("bundle")
    logger.info("serving on %s:%d (store %s, models %s)", sc.host, sc.port, sc.store_path, sc.model_dir)
    serve(sc)
    return {}


def cmd_replay(cfg: RunConfig, ws: Workspace, args) -> dict:
    from . import datagen
    from .scoring import DailyWindowScorer, batch_assess, load_bundle, records_to_events
    from .stream import DAY_MS, PipelineConfig, WindowSpec, run_pipeline

    bundle = ws.require("calibrate", "bundle", "preprocess.json").parent
    engine = load_bundle(bundle, cfg.cost_spec())
    engine.reset()   # replay the whole history from an empty buffer
    src = Path(args.input) if args.input else ws.require("gen", "data", "records.csv")
    if not src.exists():
        raise missing(src, "gen")
    records = datagen.read_records(src)
    events = records_to_events(records)
    if args.shuffle:
        # permute within each event time; a stable sort restores time order
        rng = np.random.default_rng(args.shuffle_seed)
        events = [events[i] for i in rng.permutation(len(events))]
        events.sort(key=lambda e: e.event_time)
    svc = cfg["service"]
    pc = PipelineConfig(WindowSpec("tumbling", DAY_MS, allowed_lateness=svc["allowed_lateness_ms"]),
                        svc["watermark_bound_ms"], args.workers)
    scorer = DailyWindowScorer(engine.clone())
    out, metrics = run_pipeline([events], pc, scorer, engine.bayes, cfg.cost_spec())
    batch = batch_assess(records, engine.clone())
    same = (len(batch) == len(out.assessments)
            and all(a.timestamp == b.timestamp and np.array_equal(a.combined, b.scores)
                    for a, b in zip(batch, out.assessments)))
    d = ws.ensure("replay")
    (d / "alerts.jsonl").write_text("".join(json.dumps(a.to_json()) + "\n" for a in out.alerts))
    (d / "assessments.jsonl").write_text(
        "".join(json.dumps(a.detail.to_json()) + "\n" for a in out.assessments if a.detail is not None))
    summary = {"events": len(events), "assessments": len(out.assessments), "alerts": len(out.alerts),
               "matches_batch": bool(same), "metrics": metrics.to_json()}
    _write_json(d / "metrics.json", summary)
    print(f"{len(events)} events -> {len(out.assessments)} assessments, {len(out.alerts)} alerts; "
          f"batch recomputation {'matches' if same else 'DIFFERS'}")
    if not same:
        raise CliError("replay_mismatch", "stream replay differs from batch recomputation", summary)
    return summary


def cmd_bench(cfg: RunConfig, ws: Workspace, args) -> dict:
    from . import bench

    b = cfg["bench"]
    try:
        volumes = [bench.parse_size(v) for v in (args.volumes.split(",") if args.volumes else b["volumes"])]
        levels = [int(x) for x in (args.concurrency.split(",") if args.concurrency is not None
                                   else b["concurrency"]) if str(x).strip()]
        profile = bench.LoadProfile(volumes, levels, args.duration or b["duration"],
                                    repetitions=args.repetitions or b["repetitions"], seed=b["seed"])
        profile.validate()
    except ValueError as exc:
        raise CliError("bad_argument", str(exc), None, 2) from None
    models = None
    if ws.path("bundle", "preprocess.json").exists():
        from .scoring import load_models

        models, _ = load_models(ws.path("bundle"))
    bundle = ws.path("bundle") if ws.path("bundle", "bayes.json").exists() else None
    report = bench.run(profile, ws.root, bundle=bundle, models=models)
    for row in report["batch"]:
        print(f"volume {bench.format_size(row['volume']):>6}: {row['seconds']:.3f}s "
              f"{row['throughput_bytes_per_min'] / 2**20:.1f} MiB/min")
    for row in report["concurrency"]:
        print(f"clients {row['level']:>4}: {row['requests_per_s']:.0f} req/s "
              f"p50 {row['p50_ms']:.1f} p95 {row['p95_ms']:.1f} p99 {row['p99_ms']:.1f} ms")
    print(json.dumps(report["summary"]))
    if report.get("aborted"):
        raise CliError("bench_aborted", report["aborted"], None, 1)
    return report["summary"]


COMMANDS = {"gen": cmd_gen, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "backtest": cmd_backtest, "calibrate": cmd_calibrate, "serve": cmd_serve,
            "replay": cmd_replay, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="INI config file")
    p.add_argument("--seed", type=int, default=d(None), help="seed for data generation and models")
    p.add_argument("--out", default=d("riskwatch-out"), help="artifact directory (default riskwatch-out)")
    p.add_argument("--set", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--log-level", default=d("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskwatch", description="Financial risk monitoring workflows.")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p, suppress=True)
        return p

    add("gen", "generate synthetic market records")
    add("preprocess", "clean, engineer features and cut samples")
    p = add("train", "train one model on the chronological training split")
    p.add_argument("model", choices=sorted(MODEL_KEYS))
    p = add("eval", "evaluate trained models on the holdout split")
    p.add_argument("--threshold", type=float, default=0.5)
    p = add("backtest", "walk-forward backtest (models are refit per window)")
    p.add_argument("--models", default=None, help="comma list of lstm,rf,gbt (default all)")
    add("calibrate", "fit Bayes alert tables and assemble the serving bundle")
    add("serve", "run the REST service")
    p = add("replay", "replay records through the stream pipeline and compare with batch")
    p.add_argument("--input", default=None, help="records CSV (default data/records.csv)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--shuffle", action="store_true", help="permute events within each event time")
    p.add_argument("--shuffle-seed", type=int, default=0)
    p = add("bench", "processing-time and load benchmarks")
    p.add_argument("--volumes", default=None, help="e.g. 100M,500M,1G")
    p.add_argument("--concurrency", default=None, help="e.g. 1,8,32,64 (empty to skip)")
    p.add_argument("--duration", type=float, default=None, help="seconds per concurrency level")
    p.add_argument("--repetitions", type=int, default=None)
    return parser


def load_config(args) -> RunConfig:
    overrides = []
    if args.seed is not None:
        overrides += [f"generator.seed={args.seed}", f"lstm.seed={args.seed}",
                      f"random_forest.seed={args.seed}", f"gradient_boosting.seed={args.seed}",
                      f"bench.seed={args.seed}"]
    overrides += list(args.set)
    return RunConfig.load(args.config, overrides=overrides)


def _fail(code: str, message: str, details=None) -> None:
    print(json.dumps({"error": {"code": code, "message": message, "details": details}}), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, Workspace(args.out), args)
    except ConfigError as exc:
        _fail("invalid_config", "configuration is invalid", exc.problems)
        return 2
    except CliError as exc:
        _fail(exc.code, exc.message, exc.details)
        return exc.exit_code
    except KeyboardInterrupt:
        _fail("interrupted", "interrupted")
        return 130
    except Exception as exc:  # noqa: BLE001  (report every failure in the documented shape)
        logger.debug("failure", exc_info=True)
        _fail(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
