"""HTTP front end of the policy engine."""
from __future__ import annotations

from typing import Optional

from fastapi import Depends, FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.security import HTTPAuthorizationCredentials, HTTPBearer

from ..scene import ClassUniverse
from ..segments import KeyEpoch
from .schemas import DenialOut, EpochOut, GrantOut, ProfileIn, ProfileOut, RotateIn, StreamRequest, WarrantIn
from .store import Denial, PolicyError, PolicyStore

bearer = HTTPBearer(auto_error=False)


def _token(creds: Optional[HTTPAuthorizationCredentials] = Depends(bearer)) -> Optional[str]:
    return creds.credentials if creds else None


def _profile_out(p) -> ProfileOut:
    return ProfileOut(id=p.id, mode=p.mode, classes=sorted(p.classes), credential=p.credential)


def _epoch_out(ep: KeyEpoch, universe: ClassUniverse, with_keys: bool) -> EpochOut:
    keys = {universe.label_name(label): key.hex() for label, key in ep.keys.items()} if with_keys else None
    return EpochOut(epoch=ep.epoch, first_segment=ep.first_segment, last_segment=ep.last_segment, keys=keys)


def create_app(store: PolicyStore) -> FastAPI:
    app = FastAPI(title="objstreams policy engine")
    app.state.store = store

    @app.exception_handler(PolicyError)
    async def _policy_error(request: Request, exc: PolicyError):
        return JSONResponse({"error": exc.kind, "detail": str(exc)}, status_code=exc.status)

    # -- admin --------------------------------------------------------------

    @app.get("/admin/consumers", response_model=list[ProfileOut])
    def list_consumers(token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return [_profile_out(p) for p in store.list_profiles()]

    @app.post("/admin/consumers/{consumer_id}", response_model=ProfileOut, status_code=201)
    def create_consumer(consumer_id: str, body: ProfileIn, token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return _profile_out(store.upsert_profile(consumer_id, body.mode, body.classes, body.credential, create_only=True))

    @app.put("/admin/consumers/{consumer_id}", response_model=ProfileOut)
    def upsert_consumer(consumer_id: str, body: ProfileIn, token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return _profile_out(store.upsert_profile(consumer_id, body.mode, body.classes, body.credential))

    @app.delete("/admin/consumers/{consumer_id}", status_code=204)
    def delete_consumer(consumer_id: str, token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        store.delete_profile(consumer_id)

    @app.get("/admin/classes", response_model=list[str])
    def requested_classes(token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return store.requested_classes()

    @app.post("/admin/rotate", response_model=EpochOut)
    def rotate(body: RotateIn = RotateIn(), token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return _epoch_out(store.rotate(body.first_segment), store.universe, with_keys=False)

    @app.get("/admin/keys/{segment}", response_model=EpochOut)
    def keys_for_segment(segment: int, rotate_every: Optional[int] = None, token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return _epoch_out(store.keys_for_segment(segment, rotate_every), store.universe, with_keys=True)

    @app.get("/admin/epochs", response_model=list[EpochOut])
    def epochs(token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return [_epoch_out(ep, store.universe, with_keys=False) for ep in store.epochs]

    @app.post("/admin/warrant", response_model=GrantOut)
    def warrant(body: WarrantIn, token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        grant = store.grant_retroactive(body.consumer, body.class_, body.first_epoch, body.last_epoch, body.reason)
        return grant.to_json()

    @app.get("/admin/audit")
    def audit(token: Optional[str] = Depends(_token)):
        store.check_admin(token)
        return {"entries": list(store.audit), "verified": store.verify_audit()}

    # -- consumer -------------------------------------------------------------

    @app.post(
        "/consumer/streams",
        response_model=GrantOut,
        responses={403: {"model": DenialOut}},
    )
    def request_streams(body: StreamRequest, token: Optional[str] = Depends(_token)):
        result = store.request_streams(token, body.classes)
        if isinstance(result, Denial):
            return JSONResponse(result.to_json(), status_code=403)
        return result.to_json()

    @app.get("/consumer/warrants", response_model=list[GrantOut])
    def my_warrants(token: Optional[str] = Depends(_token)):
        return [g.to_json() for g in store.warrants_for(token)]

    @app.get("/classes", response_model=list[str])
    def universe():
        return list(store.universe.names)

    return app
