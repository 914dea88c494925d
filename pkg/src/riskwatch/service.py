"""REST service over a single-node append-only record store.

Uploaded records are appended to ``records.log`` (one JSON record per line)
and fsynced before the 202 response. ``snapshot.json`` indexes the log
(day -> byte offset of the day's first record, plus the indexed length) and
is replaced atomically every few batches. Recovery trusts the snapshot,
scans the tail after it and truncates a torn final record.

Records flow through the stream pipeline; after each upload the watermark
is forced to the end of the newest uploaded day so that day is assessed
before the response returns.
"""
from __future__ import annotations

import base64
import hmac
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .alert import AlertEvent, CostSpec
from .datagen import DAILY_KINDS, Record
from .scoring import (DailyWindowScorer, RiskAssessment, RiskEngine, day_to_ms, load_bundle,
                      record_to_event)
from .stream import DAY_MS, PipelineConfig, StreamPipeline, WindowSpec
from .taxonomy import RISK_TYPES, parse_risk_type

logger = logging.getLogger(__name__)

API = "/api/v1"
MIN_TOKEN_LEN = 32
DEFAULT_LIMIT = 100
MAX_LIMIT = 1000


class Role(str, Enum):
    READER = "reader"
    WRITER = "writer"
    ADMIN = "admin"


# role -> allowed (method, admin-only?) combinations
def role_allows(role: Role, method: str, admin_route: bool) -> bool:
    if admin_route:
        return role is Role.ADMIN
    if method == "GET":
        return True
    return role in (Role.WRITER, Role.ADMIN)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, details: Any = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.details = details


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ServiceConfig:
    store_path: Path
    tokens: dict[str, Role]
    model_dir: Path | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    max_body_bytes: int = 32 * 1024 * 1024
    watermark_bound_ms: int = 2000
    allowed_lateness_ms: int = 0
    snapshot_every: int = 50
    cost: CostSpec = field(default_factory=CostSpec)

    def __post_init__(self):
        self.store_path = Path(self.store_path)
        if self.model_dir is not None and str(self.model_dir):
            self.model_dir = Path(self.model_dir)
        else:
            self.model_dir = None
        for tok in self.tokens:
            if len(tok) < MIN_TOKEN_LEN:
                raise ValueError(f"API tokens must be at least {MIN_TOKEN_LEN} characters")

    @classmethod
    def from_run_config(cls, cfg) -> "ServiceConfig":
        s = cfg["service"]
        tokens = {}
        for item in s["tokens"]:
            tok, role = item.rsplit(":", 1)
            tokens[tok] = Role(role)
        return cls(Path(s["store_path"]), tokens, s["model_dir"] or None, s["host"], s["port"],
                   s["max_body_bytes"], s["watermark_bound_ms"], s["allowed_lateness_ms"],
                   s["snapshot_every"], cfg.cost_spec())


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------

class RecordStore:
    LOG = "records.log"
    SNAPSHOT = "snapshot.json"

    def __init__(self, path, snapshot_every: int = 50):
        self.path = Path(path)
        self.snapshot_every = snapshot_every
        self._lock = threading.Lock()
        self.count = 0
        self.size = 0
        self.day_offsets: dict[str, int] = {}
        self._batches_since_snapshot = 0

    @property
    def log_path(self) -> Path:
        return self.path / self.LOG

    @property
    def snapshot_path(self) -> Path:
        return self.path / self.SNAPSHOT

    def recover(self) -> list[Record]:
        """Load the store, truncating a torn tail; returns all records in log order."""
        self.path.mkdir(parents=True, exist_ok=True)
        self.log_path.touch(exist_ok=True)
        snap = {"offset": 0, "count": 0, "days": {}}
        if self.snapshot_path.exists():
            try:
                snap = json.loads(self.snapshot_path.read_text())
            except ValueError:
                logger.warning("snapshot index unreadable; rebuilding from the log")
        size = self.log_path.stat().st_size
        if snap["offset"] > size:
            logger.warning("snapshot points past the end of the log; rebuilding from the log")
            snap = {"offset": 0, "count": 0, "days": {}}
        records: list[Record] = []
        good_end = 0
        with open(self.log_path, "rb") as fh:
            data = fh.read()
        pos = 0
        lineno = 0
        while pos < len(data):
            nl = data.find(b"\n", pos)
            if nl < 0:
                logger.warning("log %s: incomplete final record at byte %d truncated", self.log_path, pos)
                break
            lineno += 1
            try:
                rec = Record.from_json(json.loads(data[pos:nl]))
            except ValueError as exc:
                if data.find(b"\n", nl + 1) < 0 and nl + 1 >= len(data):
                    logger.warning("log %s: corrupt final record (line %d: %s) truncated",
                                   self.log_path, lineno, exc)
                    break
                raise RuntimeError(f"log {self.log_path} line {lineno} is corrupt: {exc}") from None
            if pos >= snap["offset"] or str(rec.timestamp) not in snap["days"]:
                snap["days"].setdefault(str(rec.timestamp), pos)
            records.append(rec)
            pos = nl + 1
            good_end = pos
        if good_end < len(data):
            with open(self.log_path, "r+b") as fh:
                fh.truncate(good_end)
                fh.flush()
                os.fsync(fh.fileno())
        self.count = len(records)
        self.size = good_end
        self.day_offsets = dict(snap["days"])
        self.write_snapshot()
        return records

    def append(self, records: list[Record]) -> None:
        """Append and fsync; the caller acknowledges only after this returns."""
        payload = "".join(json.dumps(r.to_json()) + "\n" for r in records).encode()
        with self._lock:
            with open(self.log_path, "ab") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            offset = self.size
            for r, line in zip(records, payload.splitlines(keepends=True)):
                self.day_offsets.setdefault(str(r.timestamp), offset)
                offset += len(line)
            self.size = offset
            self.count += len(records)
            self._batches_since_snapshot += 1
            if self._batches_since_snapshot >= self.snapshot_every:
                self.write_snapshot()

    def write_snapshot(self) -> None:
        doc = {"offset": self.size, "count": self.count, "days": self.day_offsets}
        tmp = self.snapshot_path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(doc, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.snapshot_path)
        self._batches_since_snapshot = 0


# ---------------------------------------------------------------------------
# service state
# ---------------------------------------------------------------------------

def _parse_instant(s: str, name: str) -> datetime:
    try:
        dt = datetime.fromisoformat(s.strip().replace("Z", "+00:00"))
    except ValueError:
        raise ApiError(400, "bad_request", f"{name} is not an ISO-8601 timestamp", {name: s}) from None
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return dt


def _day_start(day: str) -> datetime:
    return datetime.combine(date.fromisoformat(day[:10]), datetime.min.time())


def encode_cursor(seq: int) -> str:
    return base64.urlsafe_b64encode(json.dumps({"after": seq}).encode()).decode().rstrip("=")


def decode_cursor(cursor: str) -> int:
    try:
        pad = "=" * (-len(cursor) % 4)
        return int(json.loads(base64.urlsafe_b64decode(cursor + pad))["after"])
    except (ValueError, KeyError, TypeError):
        raise ApiError(400, "bad_request", "cursor is not valid", {"cursor": cursor}) from None


class RiskService:
    def __init__(self, config: ServiceConfig, engine: RiskEngine | None = None):
        self.config = config
        self.store = RecordStore(config.store_path, config.snapshot_every)
        self._write_lock = threading.Lock()
        self._base_engine = engine
        if engine is None and config.model_dir is not None:
            try:
                self._base_engine = load_bundle(config.model_dir, config.cost)
            except FileNotFoundError as exc:
                logger.warning("models not loaded: %s", exc)
        self.pipeline: StreamPipeline | None = None
        self.scorer: DailyWindowScorer | None = None
        # published state; replaced wholesale so readers never see partial updates
        self.alerts: tuple[AlertEvent, ...] = ()
        self.assessments: dict[str, dict] = {}
        self.day_records: dict[str, int] = {}
        self.instrument_last_day: dict[str, str] = {}
        self._reset_pipeline()
        self._ingest(self.store.recover(), persist=False)

    @property
    def models_loaded(self) -> bool:
        return self._base_engine is not None

    def _reset_pipeline(self) -> None:
        if self.pipeline is not None:
            self.pipeline.close()
        if self._base_engine is None:
            self.pipeline = None
            return
        engine = self._base_engine.clone()
        self.scorer = DailyWindowScorer(engine)
        window = WindowSpec("tumbling", DAY_MS, allowed_lateness=self.config.allowed_lateness_ms)
        self.pipeline = StreamPipeline(PipelineConfig(window, self.config.watermark_bound_ms),
                                       self.scorer, engine.bayes, self.config.cost)

    def upload(self, records: list[Record]) -> int:
        with self._write_lock:
            self.store.append(records)
            self._ingest(records, persist=True)
        return len(records)

    def _ingest(self, records: list[Record], persist: bool) -> None:
        if not records:
            return
        day_records = dict(self.day_records)
        last_day = dict(self.instrument_last_day)
        for r in records:
            d = str(r.timestamp)
            day_records[d] = day_records.get(d, 0) + 1
            if r.kind in DAILY_KINDS and d >= last_day.get(r.instrument, ""):
                last_day[r.instrument] = d
        if self.pipeline is not None:
            n_alerts = len(self.pipeline.output.alerts)
            n_assess = len(self.pipeline.output.assessments)
            for r in records:
                self.pipeline.push(record_to_event(r))
            newest = max(r.timestamp for r in records)
            self.pipeline.advance_to(day_to_ms(newest) + DAY_MS)
            assessments = dict(self.assessments)
            for a in self.pipeline.output.assessments[n_assess:]:
                doc = a.detail.to_json() if isinstance(a.detail, RiskAssessment) else {"timestamp": a.timestamp}
                doc["posterior"] = {rt.value: float(p) for rt, p in zip(RISK_TYPES, a.posterior)}
                assessments[a.timestamp] = doc
            self.assessments = assessments
            self.alerts = self.alerts + tuple(self.pipeline.output.alerts[n_alerts:])
        self.day_records = day_records
        self.instrument_last_day = last_day

    # -- queries ---------------------------------------------------------

    def latest(self, instrument: str | None) -> dict:
        if not self.models_loaded:
            raise ApiError(503, "models_unavailable", "no trained models are loaded")
        if instrument is not None:
            day = self.instrument_last_day.get(instrument)
            if day is None:
                raise ApiError(404, "not_found", f"no data for instrument {instrument!r}")
            if day not in self.assessments:
                raise ApiError(404, "not_found", f"no assessment computed for {instrument!r} yet",
                               {"day": day})
            return {"instrument": instrument, **self.assessments[day]}
        if not self.assessments:
            raise ApiError(404, "not_found", "no assessment computed yet")
        day = max(self.assessments)
        return self.assessments[day]

    def alert_page(self, since: str | None, risk_type: str | None, limit: int, cursor: str | None) -> dict:
        if not 1 <= limit <= MAX_LIMIT:
            raise ApiError(400, "bad_request", f"limit must lie in 1..{MAX_LIMIT}", {"limit": limit})
        since_dt = _parse_instant(since, "since") if since else None
        rt = None
        if risk_type:
            try:
                rt = parse_risk_type(risk_type)
            except ValueError as exc:
                raise ApiError(400, "bad_request", str(exc), {"risk_type": risk_type}) from None
        after = decode_cursor(cursor) if cursor else -1
        alerts = self.alerts
        page = []
        next_cursor = None
        for seq, a in enumerate(alerts):
            if seq <= after:
                continue
            if rt is not None and a.risk_type is not rt:
                continue
            if since_dt is not None and _day_start(a.timestamp) < since_dt:
                continue
            if len(page) == limit:
                next_cursor = encode_cursor(page[-1][0])
                break
            page.append((seq, a))
        return {"alerts": [a.to_json() for _, a in page], "next_cursor": next_cursor}

    def history(self, start: str | None, end: str | None, metric: str | None) -> list[dict]:
        lo = _parse_instant(start, "from") if start else None
        hi = _parse_instant(end, "to") if end else None
        if lo is not None and hi is not None and lo > hi:
            raise ApiError(400, "bad_request", "from is after to", {"from": start, "to": end})
        if metric not in (None, "", "all", "records", "scores", "combined", "posterior"):
            raise ApiError(400, "bad_request", f"unknown metric {metric!r}")
        days = sorted(set(self.day_records) | set(self.assessments))
        out = []
        for d in days:
            t = _day_start(d)
            if (lo is not None and t < lo) or (hi is not None and t > hi):
                continue
            entry: dict[str, Any] = {"timestamp": d, "records": self.day_records.get(d, 0)}
            a = self.assessments.get(d)
            if metric in (None, "", "all"):
                entry["assessment"] = a
            elif metric != "records":
                entry[metric] = a.get(metric) if a else None
            out.append(entry)
        return out

    def status(self) -> dict:
        m = self.pipeline.metrics.to_json() if self.pipeline is not None else None
        return {"records": self.store.count, "log_bytes": self.store.size, "days": len(self.day_records),
                "alerts": len(self.alerts), "models_loaded": self.models_loaded, "pipeline": m}

    def close(self) -> None:
        with self._write_lock:
            self.store.write_snapshot()
            if self.pipeline is not None:
                self.pipeline.close()


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

def _error(status: int, code: str, message: str, details: Any = None) -> JSONResponse:
    return JSONResponse({"code": code, "message": message, "details": details}, status_code=status)


def parse_upload(body: bytes) -> list[Record]:
    """All-or-nothing parse of a JSON-lines batch; errors name every bad line."""
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        raise ApiError(400, "bad_request", "body is not UTF-8") from None
    records, problems = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(Record.from_json(json.loads(line)))
        except ValueError as exc:
            problems.append({"line": lineno, "error": str(exc)})
    if problems:
        lines = ", ".join(str(p["line"]) for p in problems[:20])
        raise ApiError(400, "invalid_records", f"invalid record(s) on line(s) {lines}", problems)
    if not records:
        raise ApiError(400, "bad_request", "no records in body")
    return records


def create_app(service: RiskService) -> FastAPI:
    app = FastAPI(title="riskwatch", version="1")
    tokens = service.config.tokens

    def authorize(request: Request, admin_route: bool = False) -> Role:
        header = request.headers.get("authorization", "")
        scheme, _, presented = header.partition(" ")
        if scheme.lower() != "bearer" or not presented:
            raise ApiError(401, "unauthorized", "missing bearer token")
        role = None
        for tok, r in tokens.items():
            # check every token so timing does not reveal which prefix matched
            if hmac.compare_digest(tok.encode(), presented.strip().encode()):
                role = r
        if role is None:
            raise ApiError(401, "unauthorized", "unknown token")
        if not role_allows(role, request.method, admin_route):
            raise ApiError(403, "forbidden", f"role {role.value} may not {request.method} {request.url.path}")
        return role

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return _error(exc.status, exc.code, exc.message, exc.details)

    @app.post(f"{API}/data", status_code=202)
    async def upload(request: Request):
        authorize(request)
        limit = service.config.max_body_bytes
        declared = request.headers.get("content-length")
        if declared is not None and declared.isdigit() and int(declared) > limit:
            raise ApiError(413, "too_large", f"body exceeds {limit} bytes")
        body = bytearray()
        async for chunk in request.stream():
            body.extend(chunk)
            if len(body) > limit:
                raise ApiError(413, "too_large", f"body exceeds {limit} bytes")
        records = parse_upload(bytes(body))
        import anyio
        n = await anyio.to_thread.run_sync(service.upload, records)
        return JSONResponse({"accepted_count": n}, status_code=202)

    @app.get(f"{API}/risk/latest")
    def latest(request: Request, instrument: str | None = None):
        authorize(request)
        return service.latest(instrument)

    @app.get(f"{API}/alerts")
    def alerts(request: Request, since: str | None = None, risk_type: str | None = None,
               limit: str = str(DEFAULT_LIMIT), cursor: str | None = None):
        authorize(request)
        try:
            n = int(limit)
        except ValueError:
            raise ApiError(400, "bad_request", "limit must be an integer", {"limit": limit}) from None
        return service.alert_page(since, risk_type, n, cursor)

    @app.get(f"{API}/history")
    def history(request: Request, metric: str | None = None):
        authorize(request)
        q = request.query_params
        return service.history(q.get("from"), q.get("to"), metric)

    @app.get(f"{API}/admin/status")
    def admin_status(request: Request):
        authorize(request, admin_route=True)
        return service.status()

    @app.post(f"{API}/admin/snapshot")
    def admin_snapshot(request: Request):
        authorize(request, admin_route=True)
        service.store.write_snapshot()
        return {"snapshot": True, "records": service.store.count}

    return app


ROUTES = [("POST", f"{API}/data", False), ("GET", f"{API}/risk/latest", False),
          ("GET", f"{API}/alerts", False), ("GET", f"{API}/history", False),
          ("GET", f"{API}/admin/status", True), ("POST", f"{API}/admin/snapshot", True)]


def serve(config: ServiceConfig) -> None:  # pragma: no cover - blocking entry point
    import uvicorn

    service = RiskService(config)
    app = create_app(service)
    try:
        uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    finally:
        service.close()
