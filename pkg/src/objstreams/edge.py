"""Edge-side services: on-demand reprocessing and the HTTP front for a session."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx
from fastapi import FastAPI, Header
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, ConfigDict, Field

from .pipeline import EdgeSession, PipelineError, load_inputs, load_session
from .policy.client import AccessDenied, PolicyClient
from .policy.store import AuthError, Denial, PolicyError, PolicyStore
from .scene import SyntheticDetectorConfig, run_synthetic_detector
from .segments import KIND_SUPPLEMENTAL, chunk_ranges, encode_metadata_segment, metadata_record

PERFECT = SyntheticDetectorConfig(name="reprocess", p_fn={"*": 0.0}, sigma=0.0)


class ReprocessDenied(PermissionError):
    def __init__(self, offending: list[str]):
        super().__init__(f"not authorized for {', '.join(offending)}")
        self.offending = offending


@dataclass
class ReprocessResult:
    class_name: str
    run: int
    segments: list[str]
    detections: int

    def to_json(self) -> dict:
        return {"class": self.class_name, "run": self.run, "segments": self.segments, "detections": self.detections}


def authorize(policy: PolicyStore | PolicyClient, credential: str | None, class_name: str) -> None:
    """Raise unless the policy engine would grant ``class_name`` to ``credential``."""
    if isinstance(policy, PolicyStore):
        answer = policy.request_streams(credential, [class_name])
        if isinstance(answer, Denial):
            raise ReprocessDenied(answer.offending)
        return
    try:
        PolicyClient(http=policy.http, token=credential).request_streams([class_name])
    except AccessDenied as exc:
        raise ReprocessDenied(exc.offending) from None


def reprocess(
    session: EdgeSession,
    class_name: str,
    credential: str | None,
    policy: PolicyStore | PolicyClient,
    frames: Sequence[int] | None = None,
    detector: SyntheticDetectorConfig | None = None,
) -> ReprocessResult:
    """Re-run a stronger detector for one class and publish supplemental metadata.

    Supplemental segments reuse the index and key epoch of the video segment
    covering the same frames, so any consumer holding that class key can read
    them. Later runs supersede earlier ones frame by frame. ``frames=None``
    reprocesses the whole session; an empty list is acknowledged as a no-op.
    """
    universe = session.universe
    if class_name not in universe:
        raise PolicyError(f"unknown class {class_name!r}")
    authorize(policy, credential, class_name)
    m = session.manifest
    run = len({Path(e.uri).stem.split("_")[1] for e in m.supplemental.get(class_name, [])})
    wanted = set(range(m.n_frames)) if frames is None else set(frames)
    if any(not 0 <= t < m.n_frames for t in wanted):
        raise PolicyError(f"frame index outside [0, {m.n_frames})")
    if not wanted:
        return ReprocessResult(class_name, run, [], 0)
    _, _, truth = load_inputs(session.config)
    if truth is None:
        raise PipelineError("session has no ground truth to reprocess from")
    detector = detector or session.config.reprocess_detector or PERFECT
    dets = run_synthetic_detector(truth, detector)
    cls = universe.id(class_name)
    threshold = session.config.disclose_threshold
    uris, found = [], 0
    for index, (t0, t1) in enumerate(chunk_ranges(m.n_frames, m.segment_length)):
        ts = [t for t in range(t0, t1) if t in wanted]
        if not ts:
            continue
        ep = session.epoch_for_segment(index)
        records = [metadata_record(t, dets.frames[t], cls, threshold) for t in ts]
        found += sum(len(r.entries) for r in records)
        seg = encode_metadata_segment(
            class_name, cls, records, ep.keys[cls], index, ep.epoch, os.urandom(16), kind=KIND_SUPPLEMENTAL
        )
        uri = f"segments/supplemental/{class_name}/{index:06d}_{run}.cseg"
        target = session.root / "public" / uri
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(seg.to_bytes())
        m.add(KIND_SUPPLEMENTAL, class_name, seg, uri)
        uris.append(uri)
    session.save_manifest()
    return ReprocessResult(class_name, run, uris, found)


class ReprocessIn(BaseModel):
    model_config = ConfigDict(populate_by_name=True)
    class_name: str = Field(alias="class")
    frames: list[int] | None = None


def create_edge_app(root: str | os.PathLike, policy: PolicyStore | PolicyClient) -> FastAPI:
    """Serve ``<root>/public`` under ``/session`` and accept reprocessing requests."""
    root = Path(root)
    app = FastAPI(title="objstreams edge")

    @app.post("/reprocess")
    def post_reprocess(body: ReprocessIn, authorization: str | None = Header(default=None)):
        token = authorization.split(" ", 1)[1] if authorization and authorization.lower().startswith("bearer ") else None
        session = load_session(root)
        try:
            result = reprocess(session, body.class_name, token, policy, body.frames)
        except ReprocessDenied as exc:
            return JSONResponse({"denied": True, "offending": exc.offending}, status_code=403)
        except AuthError as exc:
            return JSONResponse({"error": "unauthorized", "detail": str(exc)}, status_code=401)
        except PolicyError as exc:
            return JSONResponse({"error": exc.kind, "detail": str(exc)}, status_code=exc.status)
        except PipelineError as exc:
            return JSONResponse({"error": "unavailable", "detail": str(exc)}, status_code=409)
        return result.to_json()

    app.mount("/session", StaticFiles(directory=root / "public"), name="session")
    return app


def request_reprocess(
    edge_url: str,
    credential: str,
    class_name: str,
    frames: Sequence[int] | None = None,
    http: httpx.Client | None = None,
) -> dict:
    """Consumer-side call to an edge's reprocessing endpoint."""
    client = http or httpx.Client(base_url=edge_url, timeout=60.0)
    body = {"class": class_name, "frames": None if frames is None else list(frames)}
    resp = client.post("/reprocess", json=body, headers={"Authorization": f"Bearer {credential}"})
    body = resp.json()
    if resp.status_code == 403:
        raise ReprocessDenied(list(body.get("offending", [])))
    if resp.status_code >= 400:
        raise RuntimeError(f"edge returned {resp.status_code}: {body}")
    return body
