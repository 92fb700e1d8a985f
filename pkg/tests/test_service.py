import httpx
import pytest
from fastapi.testclient import TestClient

from masattn.chatdata import ASST_BEGIN, EOS, render_system, render_user
from masattn.engine import generate
from masattn.errors import MasError, RemoteError
from masattn.masking import SENTINEL, SegmentedTokens
from masattn.model import ModelConfig, init_weights, save_model
from masattn.service import client as remote
from masattn.service.app import SnapshotStore, create_app

CFG = ModelConfig(d=16, h=2, n_layers=2, d_m=32, max_seq=128)


@pytest.fixture(scope="module")
def weights():
    return init_weights(CFG, seed=5, std=0.2)


@pytest.fixture
def api(weights):
    return TestClient(create_app(None, model=(weights, CFG, None)))


def test_health(api):
    body = api.get("/health").json()
    assert body["status"] == "ok" and body["layers"] == 2 and body["adapters"] is False


def test_mask_endpoint(api):
    r = api.post("/mask", json={"segment_ids": [0, 0, 1, -1], "mode": "mas"})
    assert r.status_code == 200
    assert r.json() == {"n": 4, "rows": ["1100", "1100", "1110", "1111"]}
    assert api.post("/mask", json={"segment_ids": [0, 0, 1, -1], "mode": "causal"}).json()["rows"][0] == "1000"


def test_mask_contract_error(api):
    r = api.post("/mask", json={"segment_ids": [0, 1, 0]})
    assert r.status_code == 422 and r.json()["code"] == "E_VALIDATION"
    assert api.post("/mask", json={"segment_ids": [0], "mode": "full"}).status_code == 422


def test_generate_matches_local_engine_and_reuses_system(api, weights):
    req = {"system": "Pick a letter.", "user": "a=1 | a?", "mode": "mas", "max_new": 5}
    first = api.post("/generate", json=req).json()
    second = api.post("/generate", json={**req, "user": "b=2 | b?"}).json()
    assert first["system_cache_hit"] is False and second["system_cache_hit"] is True
    header = SegmentedTokens((ASST_BEGIN,), (SENTINEL,), ("assistant",))
    seg = render_system("Pick a letter.") + render_user("a=1 | a?") + header
    assert first["tokens"] == generate(seg, weights, CFG, "mas", 5, EOS)
    # a different mode is a different snapshot
    assert api.post("/generate", json={**req, "mode": "causal"}).json()["system_cache_hit"] is False


def test_generate_rejects_bad_requests(api):
    assert api.post("/generate", json={"user": ""}).status_code == 422
    assert api.post("/generate", json={"user": "x", "max_new": 999}).status_code == 422


def test_atlas_endpoint(api):
    heads = api.post("/atlas", json={"system": "s", "user": "a=1 | a?", "mode": "causal"}).json()["heads"]
    assert len(heads) == CFG.n_layers * CFG.h
    assert all(h["label"] != "ForwardLooking" for h in heads)
    assert set(heads[0]["scores"]) == {"forward", "vertical", "band", "offset"}


def test_app_loads_from_disk(tmp_path, weights):
    save_model(tmp_path / "m.masw", weights, CFG)
    api = TestClient(create_app(tmp_path / "m.masw"))
    assert api.get("/health").json()["d"] == 16


def test_snapshot_store_evicts_oldest():
    store = SnapshotStore(capacity=2)
    for k in "abc":
        store.get_or_build(k, lambda k=k: k)
    assert store.get_or_build("a", lambda: "new") == ("new", False)
    assert store.get_or_build("c", lambda: "x") == ("c", True)


def test_client_round_trip(api, monkeypatch):
    monkeypatch.setattr(remote.httpx, "post", lambda url, json, timeout: api.post(url, json=json))
    out = remote.generate_remote("http://testserver", "sys", "a=1 | a?", "mas", 3)
    assert len(out["tokens"]) <= 3 and out["mode"] == "mas"


def test_client_maps_errors(monkeypatch):
    def refuse(*a, **k):
        raise httpx.ConnectError("refused")

    monkeypatch.setattr(remote.httpx, "post", refuse)
    with pytest.raises(RemoteError) as e:
        remote.generate_remote("http://127.0.0.1:9", "", "x", "mas", 1)
    assert str(e.value).startswith("E_REMOTE:")

    monkeypatch.setattr(remote.httpx, "post", lambda *a, **k: httpx.Response(
        422, json={"code": "E_VALIDATION", "detail": "E_VALIDATION: bad ids"}))
    with pytest.raises(MasError) as e:
        remote.generate_remote("http://x", "", "x", "mas", 1)
    assert e.value.code == "E_VALIDATION" and str(e.value) == "E_VALIDATION: bad ids"
