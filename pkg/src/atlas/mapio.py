"""Map persistence.

A map is one self-describing JSON document with sorted keys and no
insignificant whitespace, so saving the same map twice produces identical
bytes.  A sha256 checksum over the canonical payload (computed with the
checksum field absent) guards against torn or corrupted files: a load either
returns a fully validated map or raises, never a partial map.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from atlas.mapcore import (
    Landmark,
    MapValidationError,
    MultiSessionMap,
    SessionKind,
    SessionRecord,
    Vertex,
)


class MapFormatError(MapValidationError):
    """The byte stream is not a well-formed map document."""


class ChecksumMismatchError(MapFormatError):
    """The document parsed but its checksum does not match its content."""


class UnsupportedVersionError(MapFormatError):
    """The document declares a format version this code does not read."""


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def map_to_document(m: MultiSessionMap) -> dict:
    doc = {
        "format_version": MultiSessionMap.FORMAT_VERSION,
        "landmark_cap": m.landmark_cap,
        "sessions": [
            {"id": s.id, "kind": s.kind.value, "timestamp": s.timestamp, "label": s.label}
            for s in m.sessions
        ],
        "vertices": [
            {"id": v.id, "pose": [float(x) for x in v.pose], "session": v.session}
            for v in sorted(m.vertices.values(), key=lambda v: v.id)
        ],
        "landmarks": [
            {
                "id": lm.id,
                "position": [float(x) for x in lm.position],
                "origin_session": lm.origin_session,
                "sessions": list(lm.sessions),
                "obs_counts": {str(vid): int(c) for vid, c in sorted(lm.obs_counts.items())},
            }
            for lm in sorted(m.landmarks.values(), key=lambda lm: lm.id)
        ],
    }
    doc["checksum"] = hashlib.sha256(_canonical(doc)).hexdigest()
    return doc


def dumps_map(m: MultiSessionMap) -> bytes:
    """Serialize to canonical bytes (deterministic for equal map content)."""
    return _canonical(map_to_document(m))


def save_map(m: MultiSessionMap, path: str | Path) -> None:
    Path(path).write_bytes(dumps_map(m))


def map_from_document(doc: dict) -> MultiSessionMap:
    if not isinstance(doc, dict):
        raise MapFormatError("map document must be a JSON object")
    version = doc.get("format_version")
    if version != MultiSessionMap.FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported map format version {version!r}")
    expected = doc.get("checksum")
    if expected is not None:
        body = {k: v for k, v in doc.items() if k != "checksum"}
        actual = hashlib.sha256(_canonical(body)).hexdigest()
        if actual != expected:
            raise ChecksumMismatchError("map checksum does not match content")
    try:
        m = MultiSessionMap(landmark_cap=int(doc["landmark_cap"]))
        m.sessions = [
            SessionRecord(
                id=int(s["id"]),
                kind=SessionKind(s["kind"]),
                timestamp=int(s["timestamp"]),
                label=str(s.get("label", "")),
            )
            for s in doc["sessions"]
        ]
        m.vertices = {
            int(v["id"]): Vertex(
                id=int(v["id"]),
                pose=np.asarray(v["pose"], dtype=np.float64),
                session=int(v["session"]),
            )
            for v in doc["vertices"]
        }
        m.landmarks = {
            int(l["id"]): Landmark(
                id=int(l["id"]),
                position=np.asarray(l["position"], dtype=np.float64),
                origin_session=int(l["origin_session"]),
                sessions=[int(s) for s in l["sessions"]],
                obs_counts={int(k): int(c) for k, c in l["obs_counts"].items()},
            )
            for l in doc["landmarks"]
        }
    except MapValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MapFormatError(f"malformed map document: {exc}") from exc
    m._next_vertex_id = max(m.vertices, default=0) + 1
    m._next_landmark_id = max(m.landmarks, default=0) + 1
    m._mutated()
    m.validate()
    return m


def loads_map(data: bytes | str) -> MultiSessionMap:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"not a JSON map document: {exc}") from exc
    return map_from_document(doc)


def load_map(path: str | Path) -> MultiSessionMap:
    return loads_map(Path(path).read_bytes())
