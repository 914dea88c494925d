"""Desk-scale efficiency benchmarks.

Two series: batch processing time and throughput against data volume, and
closed-loop HTTP response time and request rate against client count. Runs
record raw samples only; every reported number is re-derived from them by
``aggregate`` so that a stored raw file regenerates identical reports.
"""
from __future__ import annotations

import csv
import http.client
import io
import json
import logging
import os
import platform
import re
import shutil
import socket
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels, datagen, preprocess

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_MIX = {"risk_latest": 0.5, "alerts": 0.3, "history": 0.2}
MAX_ERROR_RATE = 0.01
# one chunk of generated market history; volumes are built from whole chunks
CHUNK_SPEC = datagen.GeneratorSpec(n_instruments=10, start_date=date(2020, 1, 1), end_date=date(2021, 12, 31))
CHUNK_POOL = 4
_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kmgt]?)i?b?\s*$", re.I)
_UNITS = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}


def parse_size(text: str) -> int:
    """'100M' -> 104857600 (binary units; a plain number is bytes)."""
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"cannot parse data volume {text!r}")
    n = int(float(m.group(1)) * _UNITS[m.group(2).lower()])
    if n <= 0:
        raise ValueError(f"data volume must be positive, got {text!r}")
    return n


def format_size(n: int) -> str:
    for unit in ("G", "M", "K"):
        if n >= _UNITS[unit.lower()] and n % _UNITS[unit.lower()] == 0:
            return f"{n // _UNITS[unit.lower()]}{unit}"
    return str(n)


class BenchAborted(RuntimeError):
    def __init__(self, message: str, rows: list[dict]):
        super().__init__(message)
        self.rows = rows


@dataclass
class LoadProfile:
    volumes: list[int]
    concurrency: list[int]
    duration: float = 5.0
    mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    repetitions: int = 3
    seed: int = 0

    def validate(self) -> None:
        problems = []
        for name, xs in (("volumes", self.volumes), ("concurrency", self.concurrency)):
            if any(x <= 0 for x in xs):
                problems.append(f"{name} must be positive")
            if any(b <= a for a, b in zip(xs, xs[1:])):
                problems.append(f"{name} must be strictly ascending")
        if self.duration <= 0:
            problems.append("duration must be positive")
        if self.repetitions < 3:
            problems.append("repetitions must be >= 3")
        unknown = set(self.mix) - set(DEFAULT_MIX)
        if unknown or not self.mix or any(w < 0 for w in self.mix.values()) or sum(self.mix.values()) <= 0:
            problems.append(f"mix must weight a subset of {sorted(DEFAULT_MIX)} with non-negative weights")
        if problems:
            raise ValueError("; ".join(problems))


def environment() -> dict:
    mem = None
    try:
        mem = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        pass
    return {"cpu_count": os.cpu_count(), "memory_bytes": mem, "platform": platform.platform(),
            "python": platform.python_version(), "numpy": np.__version__, "backend": _kernels.BACKEND}


# ---------------------------------------------------------------------------
# batch series
# ---------------------------------------------------------------------------

def _min_days() -> int:
    # enough rows for the rolling features, one lookback window and its horizon
    return preprocess.ROLLING_WINDOW + 30 + 30 + 1


@dataclass
class ChunkPool:
    """Generated CSV chunks reused cyclically to reach a requested volume."""
    directory: Path
    paths: list[Path]
    sizes: list[int]

    @classmethod
    def build(cls, directory, spec: datagen.GeneratorSpec = CHUNK_SPEC, n: int = CHUNK_POOL,
              max_bytes: int | None = None, seed: int = 0) -> "ChunkPool":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        if max_bytes is not None:
            spec = _shrink_spec(spec, max_bytes)
        paths, sizes = [], []
        for k in range(n):
            path = directory / f"chunk-{k}.csv"
            recs = datagen.generate(datagen.spec_with(spec, seed=spec.seed + 7919 * k + seed))
            datagen.write_records(recs, path)
            paths.append(path)
            sizes.append(path.stat().st_size)
        return cls(directory, paths, sizes)

    def plan(self, volume: int) -> list[int]:
        """Chunk indices whose sizes sum to the first total >= volume."""
        out, total, k = [], 0, 0
        while total < volume:
            out.append(k % len(self.paths))
            total += self.sizes[k % len(self.paths)]
            k += 1
        return out


def _shrink_spec(spec: datagen.GeneratorSpec, max_bytes: int) -> datagen.GeneratorSpec:
    """Shorten the history so one chunk is at most ``max_bytes`` (if possible)."""
    sample = datagen.generate(spec)
    days = (spec.end_date - spec.start_date).days + 1
    per_day = len(datagen.records_to_csv_bytes(sample)) / days
    want = int(max_bytes / per_day)
    if want >= days:
        return spec
    if want < _min_days() * 7 // 5:
        raise ValueError(f"volume of {max_bytes} bytes is below one window of data "
                         f"(about {int(_min_days() * 7 / 5 * per_day)} bytes)")
    return datagen.spec_with(spec, end_date=spec.start_date + timedelta(days=want - 1))


def default_process(models: Mapping[str, object] | None = None) -> Callable[[Path], int]:
    """read CSV -> prepare -> score every sample with ``models``; returns sample count."""
    def run(path: Path) -> int:
        prepared = preprocess.prepare(datagen.read_records(path))
        if models:
            from .scoring import combined_scores
            combined_scores(models, prepared.samples.inputs)
        return len(prepared.samples)
    return run


def demo_models(path: Path, seed: int = 0) -> dict[str, object]:
    """Small versions of the three models trained on one chunk (setup, not timed)."""
    from . import lstm, trees

    samples = preprocess.prepare(datagen.read_records(path)).samples
    return {"lstm": lstm.LstmClassifier(lstm.TrainConfig(hidden_size=8, max_epochs=3, patience=1,
                                                         seed=seed)).fit(samples),
            "random_forest": trees.TreeClassifier(
                "random_forest", trees.TreeParams.random_forest(n_trees=50, seed=seed)).fit(samples),
            "gradient_boosting": trees.TreeClassifier(
                "gradient_boosting", trees.TreeParams.gradient_boosting(n_trees=50, seed=seed)).fit(samples)}


def bench_batch(volumes: Sequence[int], pool: ChunkPool, process: Callable[[Path], int],
                repetitions: int = 3) -> list[dict]:
    """Raw per-volume samples: bytes processed and wall seconds per repetition."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    raw = []
    for v in volumes:
        if v <= 0:
            raise ValueError("volume must be positive (minimum one window of data)")
        plan = pool.plan(v)
        nbytes = sum(pool.sizes[k] for k in plan)
        times = []
        for rep in range(repetitions):
            t0 = time.perf_counter()
            try:
                for k in plan:
                    process(pool.paths[k])
            except MemoryError:
                raise MemoryError(f"out of memory processing volume {format_size(v)}") from None
            times.append(time.perf_counter() - t0)
            logger.info("volume %s rep %d: %.3fs", format_size(v), rep, times[-1])
        raw.append({"volume": v, "bytes": nbytes, "chunks": len(plan), "seconds": times})
    return raw


# ---------------------------------------------------------------------------
# concurrency series
# ---------------------------------------------------------------------------

def _request_paths(instrument: str) -> dict[str, str]:
    return {"risk_latest": f"/api/v1/risk/latest?instrument={instrument}",
            "alerts": "/api/v1/alerts?limit=100",
            "history": "/api/v1/history"}


def _client_loop(host: str, port: int, token: str, paths: list[str], weights: np.ndarray,
                 seed: int, deadline: float, out: dict) -> None:
    rng = np.random.default_rng(seed)
    lat, status = [], []
    conn = http.client.HTTPConnection(host, port, timeout=30)
    headers = {"Authorization": f"Bearer {token}"}
    try:
        while time.perf_counter() < deadline:
            path = paths[rng.choice(len(paths), p=weights)]
            t0 = time.perf_counter()
            try:
                conn.request("GET", path, headers=headers)
                resp = conn.getresponse()
                resp.read()
                code = resp.status
            except (OSError, http.client.HTTPException):
                code = 0
                conn.close()
                conn = http.client.HTTPConnection(host, port, timeout=30)
            lat.append((time.perf_counter() - t0) * 1e3)
            status.append(code)
    finally:
        conn.close()
    out["latency_ms"] = lat
    out["status"] = status


def bench_concurrency(levels: Sequence[int], host: str, port: int, token: str, instrument: str,
                      duration: float = 5.0, mix: Mapping[str, float] | None = None,
                      seed: int = 0) -> list[dict]:
    """Closed-loop clients per level; each thread records its own samples (merged afterwards)."""
    mix = dict(mix or DEFAULT_MIX)
    names = sorted(mix)
    w = np.array([mix[n] for n in names], dtype=np.float64)
    w = w / w.sum()
    path_for = _request_paths(instrument)
    paths = [path_for[n] for n in names]
    raw = []
    for level in levels:
        outs = [dict() for _ in range(level)]
        t0 = time.perf_counter()
        deadline = t0 + duration
        threads = [threading.Thread(target=_client_loop,
                                    args=(host, port, token, paths, w, seed * 100003 + 1009 * level + c,
                                          deadline, outs[c]), daemon=True)
                   for c in range(level)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        wall = time.perf_counter() - t0
        lat = [x for o in outs for x in o.get("latency_ms", [])]
        codes = [x for o in outs for x in o.get("status", [])]
        errors = sum(1 for c in codes if not 200 <= c < 300)
        raw.append({"level": level, "wall_seconds": wall, "latency_ms": lat, "errors": errors,
                    "requests": len(codes)})
        rate = errors / max(len(codes), 1)
        logger.info("concurrency %d: %d requests, error rate %.4f", level, len(codes), rate)
        if rate > MAX_ERROR_RATE:
            raise BenchAborted(f"error rate {rate:.2%} at {level} clients exceeds {MAX_ERROR_RATE:.0%}", raw)
    return raw


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class ServiceThread:
    """uvicorn serving an app on a background thread (for the load series)."""

    def __init__(self, app, host: str = "127.0.0.1", port: int | None = None):
        import uvicorn

        self.host = host
        self.port = port or free_port()
        self.server = uvicorn.Server(uvicorn.Config(app, host=host, port=self.port, log_level="warning",
                                                    access_log=False))
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.time() + 30
        while not self.server.started:
            if time.time() > deadline or not self.thread.is_alive():
                raise RuntimeError("service did not start")
            time.sleep(0.02)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _pct(x) -> dict[str, float]:
    if len(x) == 0:
        return {"p50": 0.0, "p95": 0.0, "p99": 0.0}
    p = np.percentile(np.asarray(x, dtype=np.float64), [50, 95, 99])
    return {"p50": float(p[0]), "p95": float(p[1]), "p99": float(p[2])}


def aggregate(raw: dict) -> dict:
    """Report from raw samples; a pure function so reruns give identical files."""
    batch = []
    for r in raw.get("batch", []):
        t = float(np.median(r["seconds"]))
        batch.append({"volume": r["volume"], "bytes": r["bytes"], "chunks": r["chunks"],
                      "repetitions": len(r["seconds"]), "seconds": t,
                      "throughput_bytes_per_min": r["bytes"] / t * 60.0})
    conc = []
    for r in raw.get("concurrency", []):
        n = r["requests"]
        conc.append({"level": r["level"], "requests": n, "errors": r["errors"],
                     "error_rate": r["errors"] / n if n else 0.0,
                     "requests_per_s": n / r["wall_seconds"] if r["wall_seconds"] > 0 else 0.0,
                     **{f"{k}_ms": v for k, v in _pct(r["latency_ms"]).items()}})
    summary: dict = {}
    if batch:
        tp = [b["throughput_bytes_per_min"] for b in batch]
        summary["throughput_ratio_max_min"] = max(tp) / min(tp)
        summary["mean_throughput_bytes_per_min"] = float(np.mean(tp))
    if conc:
        k = int(np.argmax([c["requests_per_s"] for c in conc]))
        summary["peak_level"] = conc[k]["level"]
        summary["peak_requests_per_s"] = conc[k]["requests_per_s"]
        summary["peak_interior"] = 0 < k < len(conc) - 1
        p50 = [c["p50_ms"] for c in conc]
        summary["p50_non_decreasing"] = all(b >= a for a, b in zip(p50, p50[1:]))
    return {"schema": "riskwatch.bench", "version": SCHEMA_VERSION, "environment": raw.get("environment", {}),
            "profile": raw.get("profile", {}), "batch": batch, "concurrency": conc, "summary": summary,
            "aborted": raw.get("aborted")}


CSV_COLUMNS = ["series", "x", "seconds", "throughput_bytes_per_min", "requests_per_s",
               "p50_ms", "p95_ms", "p99_ms", "error_rate"]


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for b in report["batch"]:
        w.writerow(["batch", b["bytes"], repr(b["seconds"]), repr(b["throughput_bytes_per_min"]),
                    "", "", "", "", ""])
    for c in report["concurrency"]:
        w.writerow(["concurrency", c["level"], "", "", repr(c["requests_per_s"]), repr(c["p50_ms"]),
                    repr(c["p95_ms"]), repr(c["p99_ms"]), repr(c["error_rate"])])
    return buf.getvalue()


def validate_report(report: dict) -> list[str]:
    """Schema and invariant check; returns the problems found."""
    problems = []
    if report.get("schema") != "riskwatch.bench" or report.get("version") != SCHEMA_VERSION:
        problems.append("schema/version mismatch")
    for b in report.get("batch", []):
        for k in ("volume", "bytes", "seconds", "throughput_bytes_per_min", "repetitions"):
            if k not in b:
                problems.append(f"batch row missing {k}")
        if b.get("seconds", 0) > 0 and b["throughput_bytes_per_min"] != b["bytes"] / b["seconds"] * 60.0:
            problems.append(f"throughput identity fails at {b['volume']}")
    for c in report.get("concurrency", []):
        if not c["p50_ms"] <= c["p95_ms"] <= c["p99_ms"]:
            problems.append(f"percentiles not monotone at level {c['level']}")
    return problems


def emit_report(raw: dict, out_dir) -> dict:
    """Write raw.json, report.json and report.csv; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = aggregate(raw)
    (out / "raw.json").write_text(json.dumps(raw, indent=1, sort_keys=True))
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "report.csv").write_text(report_csv(report))
    return report


def regenerate(out_dir) -> dict:
    raw = json.loads((Path(out_dir) / "raw.json").read_text())
    return emit_report(raw, out_dir)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def _seed_service(store: Path, bundle: Path, records: list, tokens):
    from .service import RiskService, ServiceConfig

    svc = RiskService(ServiceConfig(store, tokens, bundle))
    svc.upload(records)
    return svc


def run(profile: LoadProfile, out_dir, work_dir=None, bundle=None, pool: ChunkPool | None = None,
        process: Callable[[Path], int] | None = None, models: Mapping[str, object] | None = None) -> dict:
    """Full benchmark: batch ladder then concurrency ladder (if any levels).

    The volume pipeline scores every sample with ``models``; without them,
    small demo models are trained on the first chunk before timing starts.
    """
    profile.validate()
    own_work = work_dir is None
    work = Path(work_dir or tempfile.mkdtemp(prefix="riskwatch-bench-"))
    raw: dict = {"environment": environment(), "profile": asdict(profile), "batch": [], "concurrency": [],
                 "aborted": None}
    try:
        if profile.volumes:
            if pool is None:
                pool = ChunkPool.build(work / "chunks", max_bytes=min(profile.volumes), seed=profile.seed)
            if process is None:
                process = default_process(models or demo_models(pool.paths[0], profile.seed))
            raw["batch"] = bench_batch(profile.volumes, pool, process, profile.repetitions)
        if profile.concurrency:
            raw["concurrency"] = _concurrency_series(profile, work, bundle, raw)
    finally:
        if own_work:
            shutil.rmtree(work, ignore_errors=True)
    return emit_report(raw, out_dir)


def _concurrency_series(profile: LoadProfile, work: Path, bundle, raw: dict) -> list[dict]:
    from .service import Role, create_app

    spec = datagen.spec_with(CHUNK_SPEC, n_instruments=3, n_forex=1, n_commodities=1,
                             end_date=date(2021, 12, 31), seed=CHUNK_SPEC.seed + profile.seed)
    records = datagen.generate(spec)
    split = spec.end_date - timedelta(days=14)
    history = records.slice_dates(spec.start_date, split)
    recent = list(records.slice_dates(split + timedelta(days=1), spec.end_date))
    if bundle is None:
        from . import lstm, trees
        from .scoring import train_bundle

        prepared = preprocess.prepare(history)
        bundle = train_bundle(work / "bundle", history, prepared,
                              lstm.TrainConfig(hidden_size=8, max_epochs=3, patience=1),
                              trees.TreeParams.random_forest(n_trees=10),
                              trees.TreeParams.gradient_boosting(n_trees=10))
    token = "bench-reader-" + "x" * 32
    svc = _seed_service(work / "store", Path(bundle), recent, {token: Role.READER})
    instrument = sorted(svc.instrument_last_day)[0]
    try:
        with ServiceThread(create_app(svc)) as server:
            try:
                return bench_concurrency(profile.concurrency, server.host, server.port, token, instrument,
                                         profile.duration, profile.mix, profile.seed)
            except BenchAborted as exc:
                raw["aborted"] = str(exc)
                logger.error("%s", exc)
                return exc.rows
    finally:
        svc.close()
