"""Networked map backend: sessions, ranked landmark queries, sortie uploads.

The backend owns one published map snapshot at a time.  Queries rank
candidate landmarks against the snapshot with the per-vehicle rolling
window and never block behind uploads; uploads run the full sortie
pipeline under a single writer lock and publish a fresh snapshot
atomically, so a query sees either the old map or the new one, never a
half-updated hybrid.

Bandwidth accounting is byte-exact: every request and reply is counted
at the frame level (4-byte length prefix plus JSON body) by the same
code that produces the frames, both in total and attributed to the
session token that caused the traffic.  ``landmarks_sent`` counts the
landmarks inside ``landmarks`` replies, i.e. exactly the selections a
vehicle received instead of the whole map.
"""

from __future__ import annotations

import dataclasses
import json
import socket
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .locsim import DEFAULT_THRESHOLD_M, PipelineConfig, process_sortie
from .mapcore import MultiSessionMap, SessionKind
from .protocol import (
    ERR_BAD_REPORT,
    ERR_BAD_REQUEST,
    ERR_NO_SESSION,
    Message,
    MessageKind,
    ProtocolError,
    decode_body,
    encode_frame,
    read_frame,
)
from .ranking import (
    RankingKind,
    RollingSelectionStats,
    SelectionPolicy,
    parse_policy,
    reference_policy,
    select_from_arrays,
    update_window,
)
from .worldgen import KernelRegistry, sortie_from_doc

DEFAULT_SENSOR_RANGE = 25.0


@dataclass
class BandwidthLedger:
    """Traffic counters for one session or for the whole backend."""

    queries: int = 0
    landmarks_sent: int = 0
    bytes_down: int = 0
    bytes_up: int = 0

    def merge(self, other: "BandwidthLedger") -> None:
        self.queries += other.queries
        self.landmarks_sent += other.landmarks_sent
        self.bytes_down += other.bytes_down
        self.bytes_up += other.bytes_up

    def to_doc(self) -> dict:
        return {
            "queries": self.queries,
            "landmarks_sent": self.landmarks_sent,
            "bytes_down": self.bytes_down,
            "bytes_up": self.bytes_up,
        }


@dataclass
class _Pending:
    """A selection sent to the vehicle and not yet reported back."""

    selected: tuple[int, ...]
    snapshot: MultiSessionMap  # the map the selection was ranked against


@dataclass
class _Session:
    token: int
    policy: SelectionPolicy
    sensor_range: float
    stats: RollingSelectionStats
    seen_version: int
    pending: _Pending | None = None
    n_queries: int = 0
    closed: bool = False
    ledger: BandwidthLedger = field(default_factory=BandwidthLedger)


def _landmark_scores(
    m: MultiSessionMap, policy: SelectionPolicy, stats: RollingSelectionStats, ids: np.ndarray
) -> np.ndarray:
    """Rank scores for candidate ids, mirroring the localization loop."""
    if policy.ranking is RankingKind.CLASS_RATIO:
        index = m.index
        return np.fromiter(
            (stats.class_ratio(index.class_of_landmark(int(i))) for i in ids),
            dtype=np.float64,
            count=len(ids),
        )
    if policy.ranking is RankingKind.SESSION_WEIGHT:
        return np.fromiter(
            (
                max((stats.session_weight(s) for s in m.landmarks[int(i)].sessions), default=0.0)
                for i in ids
            ),
            dtype=np.float64,
            count=len(ids),
        )
    return np.zeros(len(ids))


class MapBackend:
    """Session book-keeping and message handling, transport-agnostic.

    ``handle_frame`` is the single entry point: raw request bytes in, raw
    reply bytes out, with every ledger update applied inside.  A TCP
    server, an in-process test, and the CLI all drive the same code path,
    so the byte counts they observe are identical by construction.
    """

    def __init__(
        self,
        m: MultiSessionMap,
        kernels: KernelRegistry | None = None,
        *,
        threshold_m: float = DEFAULT_THRESHOLD_M,
        default_sensor_range: float = DEFAULT_SENSOR_RANGE,
        update_policy: SelectionPolicy | None = None,
        on_session_close: Callable[[dict], None] | None = None,
    ):
        m.validate()
        self._snapshot = m
        self.kernels: KernelRegistry = dict(kernels) if kernels else {}
        self.threshold_m = threshold_m
        self.default_sensor_range = default_sensor_range
        # Map updates are decided from an unranked full-selection run so the
        # rich/observation choice never depends on which vehicle uploaded.
        self.update_policy = update_policy if update_policy is not None else reference_policy()
        self.on_session_close = on_session_close
        self.ledger = BandwidthLedger()
        self.sessions: dict[int, _Session] = {}
        self._next_token = 1
        self._session_lock = threading.Lock()
        self._write_lock = threading.Lock()

    # -- Snapshot access --

    @property
    def snapshot(self) -> MultiSessionMap:
        return self._snapshot

    @property
    def map_version(self) -> int:
        return self._snapshot.version

    # -- Transport entry point --

    def handle_frame(self, raw: bytes) -> bytes:
        """Process one request frame body and return the reply frame.

        Both directions are charged to the ledgers here: the request at
        its on-wire size (prefix + body) and the reply likewise, so a
        transport that ships these exact bytes needs no accounting of
        its own.
        """
        bytes_up = 4 + len(raw)
        try:
            msg = decode_body(raw)
        except ProtocolError as exc:
            reply = Message(MessageKind.ERROR, cid=0, token=None,
                            body={"code": ERR_BAD_REQUEST, "detail": str(exc)})
            return self._account(None, bytes_up, reply)
        session = self._resolve(msg.token)
        reply = self.handle_message(msg, session)
        return self._account(session, bytes_up, reply)

    def handle_message(self, msg: Message, session: _Session | None = None) -> Message:
        """Dispatch one decoded request; always returns exactly one reply."""
        if session is None:
            session = self._resolve(msg.token)
        if msg.kind is MessageKind.OPEN_SESSION:
            return self._open_session(msg)
        if msg.kind is MessageKind.QUERY:
            return self._query(msg, session)
        if msg.kind is MessageKind.REPORT:
            return self._report(msg, session)
        if msg.kind is MessageKind.UPLOAD_SORTIE:
            return self._upload(msg, session)
        if msg.kind is MessageKind.CLOSE:
            return self._close(msg, session)
        return msg.error(ERR_BAD_REQUEST, f"{msg.kind.value} is not a request kind")

    # -- Accounting --

    def _resolve(self, token: int | None) -> _Session | None:
        if token is None:
            return None
        with self._session_lock:
            session = self.sessions.get(token)
        if session is None or session.closed:
            return None
        return session

    def _account(self, session: _Session | None, bytes_up: int, reply: Message) -> bytes:
        frame = encode_frame(reply)
        n_landmarks = (
            len(reply.body["landmark_ids"]) if reply.kind is MessageKind.LANDMARKS else 0
        )
        if session is None and reply.token is not None:
            # open_session: the reply names the token it just created.
            session = self._resolve(reply.token)
        for ledger in (self.ledger,) + ((session.ledger,) if session else ()):
            ledger.bytes_up += bytes_up
            ledger.bytes_down += len(frame)
            ledger.landmarks_sent += n_landmarks
        return frame

    # -- Request handlers --

    def _open_session(self, msg: Message) -> Message:
        body = msg.body
        try:
            policy = parse_policy(str(body.get("policy", "all@1")),
                                  seed=int(body.get("seed", 0)),
                                  window_len=int(body.get("window_len", 10)))
            if "max_selected" in body:
                policy = dataclasses.replace(policy, max_selected=int(body["max_selected"]))
            sensor_range = float(body.get("sensor_range", self.default_sensor_range))
            if not (sensor_range > 0 and np.isfinite(sensor_range)):
                raise ValueError("sensor_range must be finite and positive")
        except (TypeError, ValueError) as exc:
            return msg.error(ERR_BAD_REQUEST, f"bad session parameters: {exc}")
        with self._session_lock:
            token = self._next_token
            self._next_token += 1
            self.sessions[token] = _Session(
                token=token,
                policy=policy,
                sensor_range=sensor_range,
                stats=RollingSelectionStats(policy.window_len),
                seen_version=self._snapshot.version,
            )
        snap = self._snapshot
        return Message(
            MessageKind.UPDATE_ACK,
            cid=msg.cid,
            token=token,
            body={
                "policy": policy.name,
                "map_version": snap.version,
                "n_landmarks": len(snap.landmarks),
            },
        )

    def _query(self, msg: Message, session: _Session | None) -> Message:
        # Query traffic is counted even when the query itself is rejected.
        self.ledger.queries += 1
        if session is None:
            return msg.error(ERR_NO_SESSION, "unknown or closed session token")
        session.ledger.queries += 1
        pose = msg.body.get("pose")
        if (
            not isinstance(pose, (list, tuple))
            or len(pose) not in (2, 3)
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pose)
            or not all(np.isfinite(v) for v in pose)
        ):
            return msg.error(ERR_BAD_REQUEST, "pose must be [x, y] or [x, y, heading]")
        if session.pending is not None:
            return msg.error(ERR_BAD_REQUEST, "previous selection still awaits its report")

        snap = self._snapshot
        if session.seen_version != snap.version:
            # Class numbering moved with the map, so the window restarts.
            session.stats.clear()
            session.seen_version = snap.version
        candidates = snap.candidate_set((float(pose[0]), float(pose[1])), session.sensor_range)
        scores = _landmark_scores(snap, session.policy, session.stats, candidates)
        salt = session.n_queries
        session.n_queries += 1
        selected = select_from_arrays(session.policy, candidates, scores, salt=salt)
        session.pending = _Pending(tuple(int(i) for i in selected), snap)
        index = snap.index
        return Message(
            MessageKind.LANDMARKS,
            cid=msg.cid,
            token=session.token,
            body={
                "landmark_ids": [int(i) for i in selected],
                "positions": [[float(x) for x in snap.landmarks[int(i)].position] for i in selected],
                "class_ids": [index.class_of_landmark(int(i)) for i in selected],
                "n_candidates": int(len(candidates)),
                "map_version": snap.version,
            },
        )

    def _report(self, msg: Message, session: _Session | None) -> Message:
        if session is None:
            return msg.error(ERR_NO_SESSION, "unknown or closed session token")
        if session.pending is None:
            return msg.error(ERR_BAD_REPORT, "no selection awaits a report")
        observed = msg.body.get("observed")
        if not isinstance(observed, list) or not all(
            isinstance(i, int) and not isinstance(i, bool) for i in observed
        ):
            return msg.error(ERR_BAD_REQUEST, "observed must be a list of landmark ids")
        pending = session.pending
        if not set(observed) <= set(pending.selected):
            # Reject without touching the window; the selection stays pending.
            return msg.error(ERR_BAD_REPORT, "observed ids are not a subset of the selection")
        update_window(session.stats, pending.selected, observed, pending.snapshot.index, pending.snapshot)
        session.pending = None
        return Message(
            MessageKind.UPDATE_ACK,
            cid=msg.cid,
            token=session.token,
            body={"n_recorded": len(set(observed)), "window_fill": len(session.stats)},
        )

    def _upload(self, msg: Message, session: _Session | None) -> Message:
        if session is None:
            return msg.error(ERR_NO_SESSION, "unknown or closed session token")
        doc = msg.body.get("sortie")
        if not isinstance(doc, dict):
            return msg.error(ERR_BAD_REQUEST, "upload body must carry a sortie object")
        try:
            dataset = sortie_from_doc(doc)
        except (KeyError, TypeError, ValueError) as exc:
            return msg.error(ERR_BAD_REQUEST, f"malformed sortie: {exc}")
        with self._write_lock:
            base = self._snapshot
            cfg = PipelineConfig(kernels=self.kernels, threshold_m=self.threshold_m)
            try:
                new_map, report = process_sortie(base, dataset, self.update_policy, cfg)
            except (TypeError, ValueError) as exc:
                return msg.error(ERR_BAD_REQUEST, f"sortie rejected: {exc}")
            new_ids = (
                new_map.landmarks_created_by(report.session_id)
                if report.session_kind is SessionKind.RICH and report.session_id is not None
                else []
            )
            self._snapshot = new_map  # atomic publish; readers hold old refs
        return Message(
            MessageKind.UPDATE_ACK,
            cid=msg.cid,
            token=session.token,
            body={
                "session_kind": report.session_kind.value,
                "map_version": new_map.version,
                "n_landmarks": len(new_map.landmarks),
                "new_landmark_ids": [int(i) for i in new_ids],
                "rms_m": report.rms_m,
                "summarized": report.summarized,
            },
        )

    def _close(self, msg: Message, session: _Session | None) -> Message:
        if session is None:
            return msg.error(ERR_NO_SESSION, "unknown or closed session token")
        session.closed = True
        session.pending = None
        doc = {"token": session.token, "ledger": session.ledger.to_doc()}
        if self.on_session_close is not None:
            self.on_session_close(doc)
        return Message(MessageKind.UPDATE_ACK, cid=msg.cid, token=session.token, body=doc)

    def ledger_doc(self) -> dict:
        """Total and per-session traffic, for logs and the serve verb."""
        with self._session_lock:
            sessions = {str(t): s.ledger.to_doc() for t, s in sorted(self.sessions.items())}
        return {"total": self.ledger.to_doc(), "sessions": sessions}


class MapServer:
    """Threaded TCP front end for a MapBackend.

    One thread per connection; each connection carries any number of
    length-prefixed frames and may serve several session tokens.  Closing
    a connection does not close its sessions (tokens outlive transports).
    """

    def __init__(self, backend: MapBackend, host: str = "127.0.0.1", port: int = 0,
                 log: Callable[[str], None] | None = None):
        self.backend = backend
        self.log = log or (lambda line: None)
        if backend.on_session_close is None:
            backend.on_session_close = self._log_session_close
        self._listener = socket.create_server((host, port))
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self._accept_thread: threading.Thread | None = None

    def _log_session_close(self, doc: dict) -> None:
        self.log(json.dumps({"event": "session_closed", **doc}, sort_keys=True))

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "MapServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        self.log(json.dumps({"event": "listening", "host": self.address[0],
                             "port": self.address[1]}, sort_keys=True))
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            t = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_connection(self, conn: socket.socket) -> None:
        stream = conn.makefile("rb")
        try:
            while True:
                try:
                    raw = read_frame(stream)
                except ProtocolError:
                    return  # unframeable stream: drop the connection
                if raw is None:
                    return
                conn.sendall(self.backend.handle_frame(raw))
        except OSError:
            return
        finally:
            stream.close()
            conn.close()

    def serve_forever(self) -> None:
        self.start()
        assert self._accept_thread is not None
        try:
            while self._accept_thread.is_alive():
                self._accept_thread.join(timeout=0.5)
        except KeyboardInterrupt:
            pass
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self.log(json.dumps({"event": "stopped", "ledger": self.backend.ledger_doc()},
                            sort_keys=True))

    def __enter__(self) -> "MapServer":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.shutdown()
