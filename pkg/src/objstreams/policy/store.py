"""Consumer profiles, per-class key epochs and the signed audit log."""
from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..scene import BACKGROUND_NAME, ClassUniverse
from ..segments import KeyEpoch

WHITELIST = "whitelist"
BLACKLIST = "blacklist"


class PolicyError(Exception):
    status = 400
    kind = "policy"


class AuthError(PolicyError):
    status = 401
    kind = "unauthorized"


class ValidationError(PolicyError):
    status = 422
    kind = "validation"


class ConflictError(PolicyError):
    status = 409
    kind = "conflict"


class NotFound(PolicyError):
    status = 404
    kind = "not-found"


@dataclass
class ConsumerProfile:
    id: str
    credential: str
    mode: str
    classes: frozenset[str]

    def permits(self, name: str) -> bool:
        if self.mode == WHITELIST:
            return name in self.classes
        return name not in self.classes


@dataclass
class Grant:
    consumer: str
    keys: dict[str, dict[int, bytes]]  # class name -> epoch -> key
    epochs: dict[int, tuple[int, int | None]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "consumer": self.consumer,
            "classes": [
                {
                    "class": name,
                    "epochs": [
                        {
                            "epoch": e,
                            "first_segment": self.epochs[e][0],
                            "last_segment": self.epochs[e][1],
                            "key": key.hex(),
                        }
                        for e, key in sorted(by_epoch.items())
                    ],
                }
                for name, by_epoch in sorted(self.keys.items())
            ],
        }


@dataclass
class Denial:
    consumer: str
    offending: list[str]

    def to_json(self) -> dict:
        return {"consumer": self.consumer, "denied": True, "offending": self.offending}


def _audit_signature(secret: bytes, prev: str, body: dict) -> str:
    payload = prev.encode() + json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hmac.new(secret, payload, hashlib.sha256).hexdigest()


class PolicyStore:
    """Single-writer policy state. Every public method holds the store lock."""

    def __init__(
        self,
        classes: ClassUniverse | Iterable[str],
        admin_token: str | None = None,
        random_bytes: Callable[[int], bytes] = secrets.token_bytes,
        audit_secret: bytes | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.universe = classes if isinstance(classes, ClassUniverse) else ClassUniverse(classes)
        self.admin_token = admin_token or secrets.token_urlsafe(24)
        self._random = random_bytes
        self._audit_secret = audit_secret or os.urandom(32)
        self._clock = clock
        self._lock = threading.RLock()
        self.profiles: dict[str, ConsumerProfile] = {}
        self.epochs: list[KeyEpoch] = []
        self.audit: list[dict] = []
        self.warrants: dict[str, list[Grant]] = {}
        self.segment_cursor = -1
        self._new_epoch(0)

    # -- helpers ------------------------------------------------------------

    def check_admin(self, token: str | None) -> None:
        if not token or not hmac.compare_digest(token, self.admin_token):
            raise AuthError("admin credential required")

    def _log(self, action: str, **detail) -> dict:
        body = {"seq": len(self.audit), "time": self._clock(), "action": action, **detail}
        prev = self.audit[-1]["signature"] if self.audit else ""
        entry = {**body, "signature": _audit_signature(self._audit_secret, prev, body)}
        self.audit.append(entry)
        return entry

    def verify_audit(self) -> bool:
        prev = ""
        for i, entry in enumerate(self.audit):
            body = {k: v for k, v in entry.items() if k != "signature"}
            if body["seq"] != i or entry["signature"] != _audit_signature(self._audit_secret, prev, body):
                return False
            prev = entry["signature"]
        return True

    def _validate_classes(self, names: Iterable[str], allow_background: bool) -> frozenset[str]:
        out = set()
        unknown = []
        for name in names:
            if name == BACKGROUND_NAME and allow_background:
                out.add(name)
            elif name in self.universe:
                out.add(name)
            else:
                unknown.append(name)
        if unknown:
            raise ValidationError(f"unknown class: {', '.join(sorted(unknown))}")
        return frozenset(out)

    def _new_epoch(self, first_segment: int) -> KeyEpoch:
        labels = self.universe.labels()
        keys = {}
        for label in labels:
            keys[label] = self._random(16)
        ep = KeyEpoch(len(self.epochs), first_segment, keys)
        if self.epochs:
            self.epochs[-1].last_segment = first_segment - 1
        self.epochs.append(ep)
        return ep

    def _profile_for(self, credential: str | None) -> ConsumerProfile:
        if credential:
            for p in self.profiles.values():
                if hmac.compare_digest(p.credential, credential):
                    return p
        raise AuthError("unknown consumer credential")

    # -- admin API ------------------------------------------------------------

    def upsert_profile(
        self,
        consumer_id: str,
        mode: str,
        classes: Iterable[str],
        credential: str | None = None,
        create_only: bool = False,
    ) -> ConsumerProfile:
        if mode not in (WHITELIST, BLACKLIST):
            raise ValidationError(f"mode must be {WHITELIST!r} or {BLACKLIST!r}")
        names = self._validate_classes(classes, allow_background=mode == WHITELIST)
        with self._lock:
            existing = self.profiles.get(consumer_id)
            if existing is not None and create_only:
                raise ConflictError(f"consumer {consumer_id!r} already exists")
            if credential is None:
                credential = existing.credential if existing else secrets.token_urlsafe(24)
            for other in self.profiles.values():
                if other.id != consumer_id and other.credential == credential:
                    raise ConflictError("credential already in use")
            profile = ConsumerProfile(consumer_id, credential, mode, names)
            self.profiles[consumer_id] = profile
            self._log("upsert", consumer=consumer_id, mode=mode, classes=sorted(names))
            return profile

    def delete_profile(self, consumer_id: str) -> None:
        with self._lock:
            if consumer_id not in self.profiles:
                raise NotFound(f"no consumer {consumer_id!r}")
            del self.profiles[consumer_id]
            self._log("delete", consumer=consumer_id)

    def list_profiles(self) -> list[ConsumerProfile]:
        with self._lock:
            return sorted(self.profiles.values(), key=lambda p: p.id)

    def requested_classes(self) -> list[str]:
        """Object classes some profile names; drives which streams the edge splits out."""
        with self._lock:
            names = set()
            for p in self.profiles.values():
                names |= set(p.classes)
            names.discard(BACKGROUND_NAME)
            return [n for n in self.universe.names if n in names]

    # -- consumer API ---------------------------------------------------------

    def request_streams(self, credential: str | None, requested: Iterable[str]) -> Grant | Denial:
        requested = list(requested)
        with self._lock:
            profile = self._profile_for(credential)
            if not requested:
                raise ValidationError("empty class request")
            names = self._validate_classes(requested, allow_background=True)
            offending = sorted(n for n in names if not profile.permits(n))
            if offending:
                self._log("deny", consumer=profile.id, classes=sorted(names), offending=offending)
                return Denial(profile.id, offending)
            grant = self._grant(profile.id, names, range(len(self.epochs)))
            self._log("grant", consumer=profile.id, classes=sorted(names), epochs=[0, len(self.epochs) - 1])
            return grant

    def _grant(self, consumer_id: str, names: Iterable[str], epoch_ids: Iterable[int]) -> Grant:
        keys: dict[str, dict[int, bytes]] = {}
        spans = {}
        for e in epoch_ids:
            ep = self.epochs[e]
            spans[e] = (ep.first_segment, ep.last_segment)
            for name in names:
                keys.setdefault(name, {})[e] = ep.keys[self.universe.label(name)]
        return Grant(consumer_id, keys, spans)

    def warrants_for(self, credential: str | None) -> list[Grant]:
        with self._lock:
            profile = self._profile_for(credential)
            return list(self.warrants.get(profile.id, []))

    # -- key management -------------------------------------------------------

    @property
    def current_epoch(self) -> KeyEpoch:
        return self.epochs[-1]

    def rotate(self, first_segment: int | None = None) -> KeyEpoch:
        """Issue fresh keys for every label, effective from ``first_segment``.

        Without an explicit boundary the new keys apply from the segment
        after the last one the edge has sealed.
        """
        with self._lock:
            floor = max(self.current_epoch.first_segment + 1, self.segment_cursor + 1)
            if first_segment is None:
                first_segment = floor
            elif first_segment < floor:
                raise ValidationError(f"rotation boundary {first_segment} is not after segment {floor - 1}")
            ep = self._new_epoch(first_segment)
            self._log("rotate", epoch=ep.epoch, first_segment=first_segment)
            return ep

    def keys_for_segment(self, index: int, rotate_every: int | None = None) -> KeyEpoch:
        """Edge-side lookup of the epoch that seals segment ``index``.

        With ``rotate_every`` set, a new epoch is started at ``index`` once
        the current one has covered that many segments.
        """
        with self._lock:
            current = self.current_epoch
            if rotate_every and index > self.segment_cursor and index - current.first_segment >= rotate_every:
                self.rotate(index)
            self.segment_cursor = max(self.segment_cursor, index)
            for ep in reversed(self.epochs):
                if ep.covers(index):
                    return ep
            raise ValidationError(f"no epoch covers segment {index}")

    def grant_retroactive(self, consumer_id: str, class_name: str, first_epoch: int, last_epoch: int, reason: str = "") -> Grant:
        with self._lock:
            if consumer_id not in self.profiles:
                raise NotFound(f"no consumer {consumer_id!r}")
            names = self._validate_classes([class_name], allow_background=True)
            if not 0 <= first_epoch <= last_epoch < len(self.epochs):
                raise ValidationError(
                    f"epochs [{first_epoch}, {last_epoch}] outside issued range [0, {len(self.epochs) - 1}]"
                )
            grant = self._grant(consumer_id, names, range(first_epoch, last_epoch + 1))
            self.warrants.setdefault(consumer_id, []).append(grant)
            self._log(
                "warrant",
                consumer=consumer_id,
                classes=sorted(names),
                epochs=[first_epoch, last_epoch],
                reason=reason,
            )
            return grant
