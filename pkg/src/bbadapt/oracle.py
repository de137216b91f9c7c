"""Query interface to the inaccessible source model.

Everything the adaptation side ever sees of the vendor model passes through
this module, and only truncated prediction records come out: the top-r labels
with their confidences, or a bare top-1 label.  The model object itself is
held in a name-mangled private slot with no public accessor; the sole
exception is an underscore-prefixed test backdoor used to verify truncation
against the full distribution.

Queries are logged, and a disk cache keyed by dataset, mode and oracle
fingerprints keeps the discipline of at most one query per target example
across reruns.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .networks import SourceModel, state_checksum

PROTOCOL_VERSION = 1

HARD = "hard"
SOFT_TOP_R = "soft_top_r"


class QueryModeError(ValueError):
    """Invalid query mode for the oracle at hand (e.g. r >= K)."""


class OracleCacheError(RuntimeError):
    """Cache on disk does not match the requested query; delete it to requery."""


class OracleProtocolError(RuntimeError):
    """Wire-level failure talking to a served oracle."""


@dataclass(frozen=True)
class QueryMode:
    """What the oracle returns: hard top-1 labels, or the top-r soft slice."""

    kind: str = SOFT_TOP_R
    r: int = 1

    def __post_init__(self):
        if self.kind not in (HARD, SOFT_TOP_R):
            raise QueryModeError(f"unknown query mode {self.kind!r}")
        if self.r < 1:
            raise QueryModeError(f"r must be >= 1, got {self.r}")

    @property
    def key(self) -> str:
        return HARD if self.kind == HARD else f"{SOFT_TOP_R}:{self.r}"


@dataclass(frozen=True)
class QueryResult:
    """One truncated prediction. Confidences are None in hard mode."""

    labels: tuple[int, ...]
    confidences: tuple[float, ...] | None
    mode: QueryMode

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be distinct")
        if self.mode.kind == HARD:
            if self.confidences is not None or len(self.labels) != 1:
                raise ValueError("hard mode returns exactly one label, no confidences")
        else:
            if self.confidences is None or len(self.confidences) != len(self.labels):
                raise ValueError("soft mode needs one confidence per label")
            for c in self.confidences:
                if not (0.0 <= c <= 1.0):
                    raise ValueError(f"confidence {c} outside [0, 1]")
            # ties are broken by class index, so descending but not strictly
            for a, b in zip(self.confidences, self.confidences[1:]):
                if b > a:
                    raise ValueError("confidences must be non-increasing")

    @property
    def top1(self) -> int:
        return self.labels[0]

    def to_json(self) -> dict:
        return {
            "labels": list(self.labels),
            "confidences": None if self.confidences is None else list(self.confidences),
            "mode": self.mode.kind,
            "r": self.mode.r,
        }

    @staticmethod
    def from_json(obj: dict) -> "QueryResult":
        conf = obj["confidences"]
        return QueryResult(
            tuple(int(v) for v in obj["labels"]),
            None if conf is None else tuple(float(v) for v in conf),
            QueryMode(obj["mode"], int(obj["r"])),
        )


class QueryLog:
    """Thread-safe record of every model evaluation the oracle performed."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_id: dict[str, list[str]] = {}
        self._count = 0

    def record(self, example_id: str, mode: QueryMode) -> None:
        with self._lock:
            self._by_id.setdefault(example_id, []).append(mode.key)
            self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def modes_for(self, example_id: str) -> list[str]:
        return list(self._by_id.get(example_id, []))

    def ids(self) -> list[str]:
        return list(self._by_id)


def _truncate(probs: np.ndarray, mode: QueryMode) -> QueryResult:
    k = probs.shape[0]
    # stable top-r: sort by probability descending, ties by lowest class index
    order = np.lexsort((np.arange(k), -probs))
    if mode.kind == HARD:
        return QueryResult((int(order[0]),), None, mode)
    top = order[: mode.r]
    return QueryResult(
        tuple(int(i) for i in top),
        tuple(float(probs[i]) for i in top),
        mode,
    )


class BlackBoxOracle:
    """Wraps a trained source model behind a truncated prediction API.

    Nothing public on this object reaches the wrapped parameters or full
    probability vectors.  ``_test_only_full_probs`` exists for verification
    suites; production modules must not call it.
    """

    def __init__(self, model: SourceModel, log: QueryLog | None = None):
        self.__model = model.eval()
        self.num_classes = int(model.num_classes)
        self.log = log or QueryLog()
        self.__fingerprint = state_checksum(model)

    @property
    def fingerprint(self) -> str:
        return self.__fingerprint

    def _check_mode(self, mode: QueryMode) -> None:
        if mode.kind == SOFT_TOP_R and mode.r >= self.num_classes:
            raise QueryModeError(
                f"r={mode.r} would expose the full distribution for K={self.num_classes}"
            )

    def __full_probs(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        with torch.no_grad():
            logits = self.__model(torch.as_tensor(x)).double().numpy()
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p[0] if squeeze else p

    def query(self, x: np.ndarray, mode: QueryMode, example_id: str = "") -> QueryResult:
        """One truncated prediction for one input vector."""
        self._check_mode(mode)
        x = np.asarray(x)
        if x.ndim != 1:
            raise ValueError(f"query takes one input vector, got shape {x.shape}")
        probs = self.__full_probs(x)
        if example_id:
            self.log.record(example_id, mode)
        return _truncate(probs, mode)

    def query_many(
        self, xs: np.ndarray, mode: QueryMode, example_ids: Iterable[str]
    ) -> dict[str, QueryResult]:
        """Batched :meth:`query`; still one log entry per example."""
        self._check_mode(mode)
        ids = list(example_ids)
        xs = np.asarray(xs)
        if xs.ndim != 2 or len(ids) != xs.shape[0]:
            raise ValueError("query_many needs a (n, dim) array and n ids")
        probs = self.__full_probs(xs)
        out = {}
        for i, ex_id in enumerate(ids):
            self.log.record(ex_id, mode)
            out[ex_id] = _truncate(probs[i], mode)
        return out

    def _test_only_full_probs(self, x: np.ndarray) -> np.ndarray:
        """Full softmax output. Verification backdoor; never used by the pipeline."""
        return self.__full_probs(np.asarray(x))


# ---------------------------------------------------------------------------
# disk cache


def _cache_header(dataset_fp: str, oracle_fp: str, mode: QueryMode) -> dict:
    return {
        "kind": "oracle-cache",
        "protocol": PROTOCOL_VERSION,
        "dataset_fp": dataset_fp,
        "oracle_fp": oracle_fp,
        "mode": mode.kind,
        "r": mode.r,
    }


def _load_cache(path: Path, header: dict) -> dict[str, QueryResult]:
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise OracleCacheError(f"{path}: empty cache file; delete it to requery")
    found = json.loads(lines[0])
    for key in ("kind", "protocol", "mode", "r", "dataset_fp", "oracle_fp"):
        if found.get(key) != header[key]:
            raise OracleCacheError(
                f"{path}: cache was built with {key}={found.get(key)!r}, "
                f"this run needs {header[key]!r}; delete the cache to requery"
            )
    out = {}
    for ln in lines[1:]:
        rec = json.loads(ln)
        out[rec["id"]] = QueryResult.from_json(rec)
    return out


def query_dataset(
    oracle: BlackBoxOracle,
    dataset,
    mode: QueryMode,
    cache_path: str | Path | None = None,
) -> dict[str, QueryResult]:
    """Query every example once, reading and extending the disk cache.

    With a warm, matching cache no query reaches the oracle at all.  A cache
    written under a different mode or fingerprint is refused outright.
    """
    oracle._check_mode(mode)
    header = _cache_header(dataset.fingerprint(), oracle.fingerprint, mode)
    results: dict[str, QueryResult] = {}
    cache_path = Path(cache_path) if cache_path is not None else None
    if cache_path is not None and cache_path.exists():
        results = _load_cache(cache_path, header)

    ids = dataset.ids
    missing = [i for i, ex_id in enumerate(ids) if ex_id not in results]
    fresh: dict[str, QueryResult] = {}
    if missing:
        inputs = dataset.inputs_array()
        fresh = oracle.query_many(inputs[missing], mode, [ids[i] for i in missing])
        results.update(fresh)

    if cache_path is not None and (fresh or not cache_path.exists()):
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        with open(cache_path, "w") as f:
            f.write(json.dumps(header) + "\n")
            for ex_id in ids:
                if ex_id in results:
                    f.write(json.dumps({"id": ex_id, **results[ex_id].to_json()}) + "\n")
    return {ex_id: results[ex_id] for ex_id in ids}


# ---------------------------------------------------------------------------
# wire protocol: length-delimited JSON over HTTP


def _handle_query(oracle: BlackBoxOracle, payload: dict) -> tuple[int, dict]:
    if payload.get("protocol") != PROTOCOL_VERSION:
        return 400, {
            "status": "protocol-mismatch",
            "error": f"server speaks protocol {PROTOCOL_VERSION}",
        }
    try:
        mode = QueryMode(payload.get("mode", SOFT_TOP_R), int(payload.get("r", 1)))
        x = np.asarray(payload["input"], dtype=np.float32)
        result = oracle.query(x, mode, example_id=str(payload.get("id", "")))
    except QueryModeError as e:
        return 400, {"status": "invalid-mode", "error": str(e)}
    except (KeyError, ValueError, TypeError) as e:
        return 400, {"status": "bad-request", "error": str(e)}
    return 200, {"protocol": PROTOCOL_VERSION, "id": payload.get("id", ""), **result.to_json()}


class _OracleHandler(BaseHTTPRequestHandler):
    oracle: BlackBoxOracle = None  # set by make_server

    def do_POST(self):
        if self.path != "/query":
            self._reply(404, {"status": "bad-request", "error": "POST /query only"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length))
        except (ValueError, json.JSONDecodeError):
            self._reply(400, {"status": "bad-request", "error": "malformed JSON body"})
            return
        status, body = _handle_query(self.oracle, payload)
        self._reply(status, body)

    def _reply(self, status: int, body: dict):
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt, *args):  # quiet by default
        pass


def make_server(oracle: BlackBoxOracle, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Build a threaded HTTP server for ``oracle``. Stateless across requests."""
    handler = type("BoundOracleHandler", (_OracleHandler,), {"oracle": oracle})
    return ThreadingHTTPServer((host, port), handler)


def serve(oracle: BlackBoxOracle, host: str = "127.0.0.1", port: int = 8781) -> None:
    """Serve until interrupted. CLI entry point."""
    server = make_server(oracle, host, port)
    print(f"[oracle] serving on {host}:{server.server_address[1]} (K={oracle.num_classes})")
    try:
        server.serve_forever()
    finally:
        server.server_close()


class OracleClient:
    """Client for a served oracle, mirroring :meth:`BlackBoxOracle.query`."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def query(self, x: np.ndarray, mode: QueryMode, example_id: str = "") -> QueryResult:
        import http.client

        body = json.dumps(
            {
                "protocol": PROTOCOL_VERSION,
                "id": example_id,
                "input": np.asarray(x, dtype=float).tolist(),
                "mode": mode.kind,
                "r": mode.r,
            }
        )
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            conn.request("POST", "/query", body, {"Content-Type": "application/json"})
            resp = conn.getresponse()
            payload = json.loads(resp.read())
        finally:
            conn.close()
        if resp.status != 200:
            raise OracleProtocolError(
                f"server rejected query: {payload.get('status')}: {payload.get('error')}"
            )
        return QueryResult.from_json(payload)


def remote_query(client: OracleClient, x: np.ndarray, mode: QueryMode, example_id: str = "") -> QueryResult:
    """Functional alias for :meth:`OracleClient.query`."""
    return client.query(x, mode, example_id)
