"""Budgeted query-only access to a victim model, in process or over HTTP.

An :class:`OracleHandle` only ever returns victim outputs. Budget is
charged per image, reserved atomically before the backend is called and
released again if the backend fails, so a failed transport never consumes
budget.

Wire protocol (JSON over HTTP)::

    POST /predict  {"inputs": [[[[...]]]], "shape": [n, h, w, c], "exempt": false}
                   -> {"mode": "soft", "outputs": [...], "queries_used": int}
    GET  /health   -> {"status": "ok", "mode": "soft", "queries_used": int,
                       "budget": int | null, "eval_queries": int}
    errors         -> {"error": "budget_exhausted" | "bad_shape" | "too_large" |
                       "not_found" | "internal"}

``"exempt": true`` marks measurement queries; they are counted separately
in ``eval_queries`` and do not touch the attack budget.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Protocol

import numpy as np

from .data import validate_batch
from .model import TrainedModel, load_model, predict

log = logging.getLogger(__name__)

LABEL_MODES = ("soft", "hard", "box")
MAX_REQUEST_BYTES = 64 * 1024 * 1024
REMOTE_CHUNK = 128


class BudgetExhausted(Exception):
    """The query would exceed the oracle's budget.

    ``charged`` is the number of images the oracle answered (and billed)
    before refusing; it is only non-zero when a remote batch is split into
    several requests.
    """

    def __init__(self, message: str = "", charged: int = 0):
        super().__init__(message)
        self.charged = charged


class OracleTransportError(Exception):
    """The remote oracle was unreachable or answered outside the protocol."""


class OracleProtocolError(OracleTransportError):
    """The remote oracle rejected a request (bad shape, oversized, internal)."""

    def __init__(self, code: str, status: int | None = None):
        super().__init__(f"oracle error {code!r}" + (f" (HTTP {status})" if status else ""))
        self.code = code
        self.status = status


@dataclass
class QueryBudget:
    max: int | None = None  # None means unlimited
    used: int = 0

    def __post_init__(self):
        if self.max is not None and self.max < 0:
            raise ValueError("budget max must be >= 0")
        if self.used < 0 or (self.max is not None and self.used > self.max):
            raise ValueError("budget used must lie in [0, max]")

    @property
    def remaining(self) -> float:
        return float("inf") if self.max is None else self.max - self.used


def format_outputs(probs_or_boxes: np.ndarray, label_mode: str) -> np.ndarray:
    """Turn raw model outputs into what the oracle reveals for a label mode."""
    if label_mode == "hard":
        return np.argmax(probs_or_boxes, axis=1).astype(np.int64)
    return np.asarray(probs_or_boxes, dtype=np.float32)


def _check_mode(model: TrainedModel, label_mode: str) -> None:
    if label_mode not in LABEL_MODES:
        raise ValueError(f"unknown label mode {label_mode!r}")
    if (label_mode == "box") != (model.kind == "localizer"):
        raise ValueError(f"label mode {label_mode!r} does not fit a {model.kind}")


class Backend(Protocol):
    label_mode: str

    def run(self, batch: np.ndarray, exempt: bool) -> np.ndarray: ...


class LocalBackend:
    """Victim model in this process; the model object stays private."""

    def __init__(self, model: TrainedModel, label_mode: str):
        _check_mode(model, label_mode)
        self.__model = model
        self.label_mode = label_mode
        self.input_shape = model.spec.input_shape

    def run(self, batch: np.ndarray, exempt: bool) -> np.ndarray:
        return format_outputs(predict(self.__model, batch), self.label_mode)


class RemoteBackend:
    """A victim served by :func:`serve_victim`, reached over HTTP."""

    def __init__(self, url: str, timeout: float = 60.0, chunk: int = REMOTE_CHUNK):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.chunk = chunk
        self._mode: str | None = None

    @property
    def label_mode(self) -> str:
        if self._mode is None:
            self._mode = self.health()["mode"]
        return self._mode

    def _request(self, path: str, body: dict | None = None) -> dict:
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.url + path, data=data, method="POST" if body is not None else "GET",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                code = json.loads(exc.read()).get("error", "internal")
            except (ValueError, AttributeError):
                code = "internal"
            if code == "budget_exhausted":
                raise BudgetExhausted("remote oracle budget exhausted") from None
            raise OracleProtocolError(code, exc.code) from None
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise OracleTransportError(f"cannot reach oracle at {self.url}: {exc}") from None
        if "error" in payload:
            raise OracleProtocolError(payload["error"])
        return payload

    def health(self) -> dict:
        return self._request("/health")

    def run(self, batch: np.ndarray, exempt: bool) -> np.ndarray:
        outs = []
        for start in range(0, len(batch), self.chunk):
            part = batch[start:start + self.chunk]
            try:
                reply = self._request("/predict", {"inputs": part.tolist(), "shape": list(part.shape),
                                                   "exempt": bool(exempt)})
            except BudgetExhausted as exc:
                # earlier chunks were answered and billed by the server
                exc.charged = 0 if exempt else start
                raise
            self._mode = reply["mode"]
            outs.append(np.asarray(reply["outputs"],
                                   dtype=np.int64 if reply["mode"] == "hard" else np.float32))
        return np.concatenate(outs)


@dataclass
class OracleHandle:
    """Query-only, budgeted access to a victim.

    Use :meth:`local` or :meth:`remote` to build one. ``query`` charges the
    budget; ``query(..., exempt=True)`` is for measurement and is tallied
    in ``eval_queries`` instead.
    """

    backend: Backend
    budget: QueryBudget = field(default_factory=QueryBudget)
    query_log: list = field(default_factory=list)
    eval_queries: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def local(cls, model: TrainedModel, label_mode: str | None = None, budget: int | None = None) -> "OracleHandle":
        mode = label_mode or ("soft" if model.kind == "classifier" else "box")
        return cls(LocalBackend(model, mode), QueryBudget(budget))

    @classmethod
    def remote(cls, url: str, budget: int | None = None, timeout: float = 60.0) -> "OracleHandle":
        return cls(RemoteBackend(url, timeout), QueryBudget(budget))

    @property
    def label_mode(self) -> str | None:
        return self.backend.label_mode

    @property
    def used(self) -> int:
        return self.budget.used

    def query(self, batch, exempt: bool = False) -> np.ndarray:
        """Victim outputs for a batch: probabilities, class ids or box corners."""
        x = validate_batch(batch)
        n = len(x)
        if not exempt:
            with self._lock:
                if n > self.budget.remaining:
                    raise BudgetExhausted(
                        f"query of {n} exceeds remaining budget {self.budget.remaining:g}")
                self.budget.used += n
        try:
            out = self.backend.run(x, exempt)
        except BaseException as exc:
            if not exempt:
                charged = getattr(exc, "charged", 0)
                with self._lock:
                    self.budget.used -= n - charged
                    if charged:
                        self.query_log.append((time.time(), charged))
            raise
        with self._lock:
            if exempt:
                self.eval_queries += n
            else:
                self.query_log.append((time.time(), n))
        return out

    def evaluation_view(self) -> "OracleHandle":
        """A handle on the same backend whose queries are all budget-exempt."""
        return _EvaluationOracle(self)


class _EvaluationOracle(OracleHandle):
    def __init__(self, parent: OracleHandle):
        super().__init__(parent.backend, QueryBudget(None))
        self._parent = parent

    def query(self, batch, exempt: bool = True) -> np.ndarray:
        return self._parent.query(batch, exempt=True)


# ------------------------------------------------------------------- serving


class VictimServer(ThreadingHTTPServer):
    """HTTP oracle around one victim model with a server-wide budget."""

    daemon_threads = True

    def __init__(self, address, model: TrainedModel, label_mode: str, budget: int | None,
                 max_request_bytes: int = MAX_REQUEST_BYTES):
        _check_mode(model, label_mode)
        self.model = model
        self.label_mode = label_mode
        self.budget = QueryBudget(budget)
        self.eval_queries = 0
        self.max_request_bytes = max_request_bytes
        self.lock = threading.Lock()
        self.route_log: Counter = Counter()
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def health(self) -> dict:
        with self.lock:
            return {"status": "ok", "mode": self.label_mode, "queries_used": self.budget.used,
                    "budget": self.budget.max, "eval_queries": self.eval_queries}

    def answer(self, body: dict) -> tuple[int, dict]:
        try:
            shape = [int(v) for v in body["shape"]]
            x = np.asarray(body["inputs"], dtype=np.float32)
            if len(shape) != 4 or list(x.shape) != shape:
                raise ValueError("shape mismatch")
            x = validate_batch(x, self.model.spec.input_shape)
        except (KeyError, TypeError, ValueError):
            return 400, {"error": "bad_shape"}
        n = len(x)
        exempt = bool(body.get("exempt", False))
        with self.lock:
            if not exempt:
                if n > self.budget.remaining:
                    return 429, {"error": "budget_exhausted"}
                self.budget.used += n
        try:
            out = format_outputs(predict(self.model, x), self.label_mode)
        except Exception:
            log.exception("prediction failed")
            with self.lock:
                if not exempt:
                    self.budget.used -= n
            return 500, {"error": "internal"}
        with self.lock:
            if exempt:
                self.eval_queries += n
            used = self.budget.used
        return 200, {"mode": self.label_mode, "outputs": out.tolist(), "queries_used": used}


class _Handler(BaseHTTPRequestHandler):
    server: VictimServer

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self.server.route_log[("GET", self.path)] += 1
        if self.path == "/health":
            self._send(200, self.server.health())
        else:
            self._send(404, {"error": "not_found"})

    def do_POST(self):
        self.server.route_log[("POST", self.path)] += 1
        length = int(self.headers.get("Content-Length") or 0)
        if self.path != "/predict":
            self._send(404, {"error": "not_found"})
            return
        if length > self.server.max_request_bytes:
            # drain without buffering so the client sees the reply, not a reset
            while length > 0:
                chunk = self.rfile.read(min(length, 1 << 16))
                if not chunk:
                    break
                length -= len(chunk)
            self.close_connection = True
            self._send(413, {"error": "too_large"})
            return
        try:
            body = json.loads(self.rfile.read(length))
        except ValueError:
            self._send(400, {"error": "bad_shape"})
            return
        status, payload = self.server.answer(body)
        self._send(status, payload)


class ServeError(Exception):
    """The victim service could not start."""


def serve_victim(model_path, host: str = "127.0.0.1", port: int = 8000, label_mode: str | None = None,
                 budget: int | None = None, background: bool = False,
                 max_request_bytes: int = MAX_REQUEST_BYTES) -> VictimServer:
    """Start the HTTP oracle for a saved model.

    With ``background=True`` the server runs in a daemon thread and is
    returned immediately; call ``shutdown()`` then ``server_close()`` to stop
    it. Otherwise this blocks until interrupted.
    """
    model = load_model(model_path)
    mode = label_mode or ("soft" if model.kind == "classifier" else "box")
    try:
        server = VictimServer((host, port), model, mode, budget, max_request_bytes)
    except OSError as exc:
        raise ServeError(f"cannot bind {host}:{port}: {exc}") from None
    if background:
        threading.Thread(target=server.serve_forever, daemon=True, name="victim-server").start()
        return server
    log.info("serving %s on %s (mode=%s, budget=%s)", model_path, server.url, mode, budget)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server
