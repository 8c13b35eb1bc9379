import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from objstreams.policy import AuthError, ConflictError, Denial, Grant, NotFound, PolicyStore, ValidationError
from objstreams.policy.app import create_app
from objstreams.policy.client import AccessDenied, PolicyClient, PolicyRequestError

CLASSES = ["car", "truck", "person", "bicycle", "motorbike"]


def counter_bytes():
    state = {"n": 0}

    def draw(n):
        state["n"] += 1
        return state["n"].to_bytes(n, "big")

    return draw


@pytest.fixture
def store():
    return PolicyStore(CLASSES, admin_token="admin", random_bytes=counter_bytes(), audit_secret=b"s" * 32)


@pytest.fixture
def client(store):
    return TestClient(create_app(store))


def granted(grant: Grant) -> set[str]:
    return set(grant.keys)


# -- store ------------------------------------------------------------------------


def test_whitelist_denial_names_offending(store):
    store.upsert_profile("bike", "whitelist", ["bicycle"], credential="b")
    answer = store.request_streams("b", ["bicycle", "motorbike"])
    assert isinstance(answer, Denial) and answer.offending == ["motorbike"]


def test_denial_lists_every_offending_class(store):
    store.upsert_profile("bike", "whitelist", ["bicycle"], credential="b")
    answer = store.request_streams("b", ["car", "person", "bicycle", "truck"])
    assert answer.offending == ["car", "person", "truck"]


def test_blacklist_grants_complement(store):
    store.upsert_profile("traffic", "blacklist", ["person"], credential="t")
    grant = store.request_streams("t", ["car", "background"])
    assert granted(grant) == {"car", "background"}
    assert isinstance(store.request_streams("t", ["person", "car"]), Denial)


def test_background_requestable_under_whitelist(store):
    store.upsert_profile("surv", "whitelist", CLASSES + ["background"], credential="s")
    assert granted(store.request_streams("s", ["background"])) == {"background"}
    store.upsert_profile("plain", "whitelist", ["car"], credential="p")
    assert store.request_streams("p", ["background"]).offending == ["background"]


def test_request_errors(store):
    store.upsert_profile("a", "whitelist", ["car"], credential="a")
    with pytest.raises(ValidationError):
        store.request_streams("a", [])
    with pytest.raises(AuthError):
        store.request_streams("nope", ["car"])
    with pytest.raises(ValidationError):
        store.request_streams("a", ["unicorn"])


def test_profile_validation(store):
    with pytest.raises(ValidationError):
        store.upsert_profile("x", "whitelist", ["unicorn"])
    with pytest.raises(ValidationError):
        store.upsert_profile("x", "greylist", ["car"])
    with pytest.raises(ValidationError):
        store.upsert_profile("x", "blacklist", ["background"])
    store.upsert_profile("x", "whitelist", ["car"], credential="c")
    with pytest.raises(ConflictError):
        store.upsert_profile("x", "whitelist", ["car"], create_only=True)
    with pytest.raises(ConflictError):
        store.upsert_profile("y", "whitelist", ["car"], credential="c")


def test_delete_revokes_future_grants(store):
    store.upsert_profile("a", "whitelist", ["car"], credential="a")
    store.delete_profile("a")
    with pytest.raises(AuthError):
        store.request_streams("a", ["car"])
    with pytest.raises(NotFound):
        store.delete_profile("a")


def test_rotation_produces_fresh_keys(store):
    store.rotate()
    store.rotate()
    key_sets = [tuple(sorted(ep.keys.values())) for ep in store.epochs]
    assert len(key_sets) == 3
    flat = [k for ks in key_sets for k in ks]
    assert len(set(flat)) == len(flat)


def test_rotation_boundaries(store):
    store.keys_for_segment(0)
    store.keys_for_segment(1)
    ep = store.rotate()
    assert ep.first_segment == 2 and store.epochs[0].last_segment == 1
    with pytest.raises(ValidationError):
        store.rotate(first_segment=1)


def test_keys_for_segment_rotates_on_period(store):
    epochs = [store.keys_for_segment(i, rotate_every=2).epoch for i in range(6)]
    assert epochs == [0, 0, 1, 1, 2, 2]
    # looking up an old segment does not rotate again
    assert store.keys_for_segment(1, rotate_every=2).epoch == 0


def test_grant_covers_all_issued_epochs(store):
    store.upsert_profile("a", "whitelist", ["car"], credential="a")
    store.rotate()
    grant = store.request_streams("a", ["car"])
    assert sorted(grant.keys["car"]) == [0, 1]


def test_warrant_scope(store):
    store.upsert_profile("a", "whitelist", ["car"], credential="a")
    for _ in range(6):
        store.rotate()
    grant = store.grant_retroactive("a", "person", 3, 5, reason="court order")
    assert set(grant.keys) == {"person"} and sorted(grant.keys["person"]) == [3, 4, 5]
    assert store.warrants_for("a") == [grant]
    with pytest.raises(ValidationError):
        store.grant_retroactive("a", "person", 5, 9)
    with pytest.raises(NotFound):
        store.grant_retroactive("ghost", "person", 0, 0)
    assert store.audit[-1]["action"] == "warrant" and store.audit[-1]["reason"] == "court order"


def test_audit_chain(store):
    store.upsert_profile("a", "whitelist", ["car"], credential="a")
    store.request_streams("a", ["car"])
    store.request_streams("a", ["person"])
    actions = [e["action"] for e in store.audit]
    assert actions == ["upsert", "grant", "deny"]
    assert store.verify_audit()
    store.audit[1]["classes"] = ["person"]
    assert not store.verify_audit()


def test_requested_classes(store):
    store.upsert_profile("a", "whitelist", ["car", "background"], credential="a")
    store.upsert_profile("b", "blacklist", ["person"], credential="b")
    assert store.requested_classes() == ["car", "person"]


# -- key-flow soundness against a reference oracle ---------------------------

ids = st.sampled_from(["a", "b", "c"])
class_sets = st.sets(st.sampled_from(CLASSES + ["background"]), min_size=1, max_size=4)
ops = st.one_of(
    st.tuples(st.just("upsert"), ids, st.sampled_from(["whitelist", "blacklist"]), class_sets),
    st.tuples(st.just("delete"), ids),
    st.tuples(st.just("rotate")),
    st.tuples(st.just("request"), ids, class_sets),
    st.tuples(st.just("warrant"), ids, st.sampled_from(CLASSES), st.integers(0, 3), st.integers(0, 3)),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(ops, max_size=25))
def test_key_flow_soundness(sequence):
    store = PolicyStore(CLASSES, admin_token="admin", random_bytes=counter_bytes())
    oracle: dict[str, tuple[str, set[str]]] = {}
    epoch_keys: list[dict[str, bytes]] = []

    def sync_epochs():
        for ep in store.epochs[len(epoch_keys):]:
            epoch_keys.append({store.universe.label_name(label): k for label, k in ep.keys.items()})

    sync_epochs()
    for op in sequence:
        kind = op[0]
        if kind == "upsert":
            _, cid, mode, classes = op
            if mode == "blacklist":
                classes = classes - {"background"} or {"person"}
            store.upsert_profile(cid, mode, classes, credential=f"tok-{cid}")
            oracle[cid] = (mode, set(classes))
        elif kind == "delete":
            if op[1] in oracle:
                store.delete_profile(op[1])
                del oracle[op[1]]
        elif kind == "rotate":
            store.rotate()
            sync_epochs()
        elif kind == "request":
            _, cid, classes = op
            if cid not in oracle:
                with pytest.raises(AuthError):
                    store.request_streams(f"tok-{cid}", classes)
                continue
            mode, listed = oracle[cid]
            permitted = {c for c in classes if (c in listed) == (mode == "whitelist")}
            answer = store.request_streams(f"tok-{cid}", classes)
            if permitted != set(classes):
                assert isinstance(answer, Denial)
                assert set(answer.offending) == set(classes) - permitted
                continue
            assert set(answer.keys) == set(classes)
            for name, by_epoch in answer.keys.items():
                assert sorted(by_epoch) == list(range(len(epoch_keys)))
                for e, key in by_epoch.items():
                    assert key == epoch_keys[e][name]
        elif kind == "warrant":
            _, cid, name, a, b = op
            a, b = min(a, b), max(a, b)
            if cid not in oracle or b >= len(epoch_keys):
                with pytest.raises((NotFound, ValidationError)):
                    store.grant_retroactive(cid, name, a, b)
                continue
            grant = store.grant_retroactive(cid, name, a, b)
            assert set(grant.keys) == {name}
            assert {e: k for e, k in grant.keys[name].items()} == {e: epoch_keys[e][name] for e in range(a, b + 1)}
    assert store.verify_audit()
    requests = sum(op[0] == "request" for op in sequence)
    logged = sum(e["action"] in ("grant", "deny") for e in store.audit)
    assert logged == requests - _unauthenticated_requests(sequence)


def _unauthenticated_requests(sequence) -> int:
    live: set[str] = set()
    count = 0
    for op in sequence:
        if op[0] == "upsert":
            live.add(op[1])
        elif op[0] == "delete":
            live.discard(op[1])
        elif op[0] == "request" and op[1] not in live:
            count += 1
    return count


# -- HTTP API ---------------------------------------------------------------------

ADMIN = {"Authorization": "Bearer admin"}


def test_api_profile_crud(client):
    r = client.put("/admin/consumers/traffic", json={"mode": "whitelist", "classes": ["car", "truck"]}, headers=ADMIN)
    assert r.status_code == 200
    body = r.json()
    assert body["classes"] == ["car", "truck"] and body["credential"]
    assert client.get("/admin/consumers", headers=ADMIN).json()[0]["id"] == "traffic"
    r = client.post("/admin/consumers/traffic", json={"mode": "whitelist", "classes": ["car"]}, headers=ADMIN)
    assert r.status_code == 409 and r.json()["error"] == "conflict"
    r = client.put("/admin/consumers/x", json={"mode": "whitelist", "classes": ["unicorn"]}, headers=ADMIN)
    assert r.status_code == 422 and r.json()["error"] == "validation"
    assert client.delete("/admin/consumers/traffic", headers=ADMIN).status_code == 204
    assert client.delete("/admin/consumers/traffic", headers=ADMIN).status_code == 404


def test_api_requires_admin(client):
    assert client.get("/admin/consumers").status_code == 401
    assert client.get("/admin/consumers", headers={"Authorization": "Bearer wrong"}).status_code == 401
    assert client.post("/admin/rotate", json={}).status_code == 401


def test_api_stream_request_flow(client):
    client.put("/admin/consumers/t", json={"mode": "blacklist", "classes": ["person"], "credential": "tok"}, headers=ADMIN)
    r = client.post("/consumer/streams", json={"classes": ["car", "background"]}, headers={"Authorization": "Bearer tok"})
    assert r.status_code == 200
    body = r.json()
    assert [c["class"] for c in body["classes"]] == ["background", "car"]
    assert len(bytes.fromhex(body["classes"][0]["epochs"][0]["key"])) == 16
    r = client.post("/consumer/streams", json={"classes": ["person"]}, headers={"Authorization": "Bearer tok"})
    assert r.status_code == 403 and r.json() == {"consumer": "t", "denied": True, "offending": ["person"]}
    r = client.post("/consumer/streams", json={"classes": []}, headers={"Authorization": "Bearer tok"})
    assert r.status_code == 422
    r = client.post("/consumer/streams", json={"classes": ["car"]})
    assert r.status_code == 401


def test_api_rotate_and_warrant(client):
    client.put("/admin/consumers/t", json={"mode": "whitelist", "classes": ["car"], "credential": "tok"}, headers=ADMIN)
    assert client.post("/admin/rotate", json={}, headers=ADMIN).json()["epoch"] == 1
    r = client.post("/admin/warrant", json={"consumer": "t", "class": "person", "first_epoch": 0, "last_epoch": 1}, headers=ADMIN)
    assert r.status_code == 200 and r.json()["classes"][0]["class"] == "person"
    assert len(client.get("/consumer/warrants", headers={"Authorization": "Bearer tok"}).json()) == 1
    r = client.post("/admin/warrant", json={"consumer": "t", "class": "person", "first_epoch": 0, "last_epoch": 7}, headers=ADMIN)
    assert r.status_code == 422
    audit = client.get("/admin/audit", headers=ADMIN).json()
    assert audit["verified"] and audit["entries"][-1]["action"] == "warrant"
    epochs = client.get("/admin/epochs", headers=ADMIN).json()
    assert [e["epoch"] for e in epochs] == [0, 1] and epochs[0]["keys"] is None


def test_api_keys_endpoint_and_classes(client):
    doc = client.get("/admin/keys/0", headers=ADMIN).json()
    assert set(doc["keys"]) == set(CLASSES) | {"background"}
    assert client.get("/classes").json() == CLASSES


def test_client_wrapper(client):
    admin = PolicyClient(http=client, token="admin")
    prof = admin.upsert_consumer("bike", "whitelist", ["bicycle"], credential="b")
    assert prof["id"] == "bike"
    consumer = PolicyClient(http=client, token="b")
    with pytest.raises(AccessDenied) as err:
        consumer.request_streams(["bicycle", "motorbike"])
    assert err.value.offending == ["motorbike"]
    assert consumer.request_streams(["bicycle"])["consumer"] == "bike"
    with pytest.raises(PolicyRequestError):
        PolicyClient(http=client, token="bad").request_streams(["car"])
    assert admin.requested_classes() == ["bicycle"]
