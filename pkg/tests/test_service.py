import pytest
from fastapi.testclient import TestClient

from pdds.fixtures import reference_day
from pdds.service import create_app
from pdds.snn import SpikingNet, save_weights

META = {"timesteps": 50, "noise_sigma": 0.05, "axonal_delay": 2, "seed": 0}


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    p = tmp_path_factory.mktemp("w") / "net.bin"
    save_weights(SpikingNet.init(seed=1, gain=3.0), p, META)
    return p


@pytest.fixture()
def client(weights):
    return TestClient(create_app(weights))


def test_health(client, weights):
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["weights"] == str(weights)


def test_session_lifecycle(client):
    r = client.post("/sessions", json={"mode": "diabetic", "classifier": "rule"})
    assert r.status_code == 201
    sid = r.json()["session_id"]
    tr = reference_day()
    readings = [{"t": float(t), "glucose_mgdl": float(g)} for t, g in zip(tr.t, tr.glucose)]
    r = client.post(f"/sessions/{sid}/readings", json={"readings": readings})
    assert r.status_code == 200
    kinds = [e["kind"] for e in r.json()["events"]]
    assert kinds.count("NoOp") > 250 and "Injection" in kinds
    info = client.get(f"/sessions/{sid}").json()
    assert info["readings"] == 288 and info["wakes"] == kinds.count("BellWake")
    s = client.post(f"/sessions/{sid}/sync").json()
    assert s["pending_records"] == 0
    assert client.delete(f"/sessions/{sid}").status_code == 204
    assert client.get(f"/sessions/{sid}").status_code == 404


def test_prediabetic_session_never_injects(client):
    sid = client.post("/sessions", json={"mode": "prediabetic", "classifier": "snn"}).json()["session_id"]
    vs = [{"t": float(i * 5), "v": v} for i, v in enumerate([1.0] * 10 + [1.6, 1.7, 2.4])]
    kinds = [e["kind"] for e in client.post(f"/sessions/{sid}/readings", json={"readings": vs}).json()["events"]]
    assert "Injection" not in kinds and "Notification" in kinds


def test_failing_cloud_keeps_records(client):
    sid = client.post("/sessions", json={"classifier": "rule", "cloud_fail_on": [0, 1, 2, 3]}).json()["session_id"]
    vs = [{"t": float(i * 5), "v": v} for i, v in enumerate([1.0] * 10 + [1.6])]
    client.post(f"/sessions/{sid}/readings", json={"readings": vs})
    s = client.post(f"/sessions/{sid}/sync").json()
    assert s["status"] == "retryable" and s["pending_records"] > 0


def test_reading_validation(client):
    sid = client.post("/sessions", json={"classifier": "rule"}).json()["session_id"]
    bad = [{"t": 0.0}, {"t": 0.0, "v": 1.0, "glucose_mgdl": 100.0}, {"t": 0.0, "v": 3.5}]
    for b in bad:
        assert client.post(f"/sessions/{sid}/readings", json={"readings": [b]}).status_code == 422
    client.post(f"/sessions/{sid}/readings", json={"readings": [{"t": 5.0, "v": 1.0}]})
    r = client.post(f"/sessions/{sid}/readings", json={"readings": [{"t": 5.0, "v": 1.0}]})
    assert r.status_code == 422  # non-monotone timestamp


def test_dose_endpoint(client):
    r = client.post("/dose", json={"v": 1.0, "slope": 0.0, "severity": 2}).json()
    assert r["units"] == pytest.approx(0.476, abs=5e-4)
    assert client.post("/dose", json={"v": 1.0, "slope": 0.0, "severity": 3}).status_code == 422


def test_classify_endpoint(client):
    f = [0.25, 0.25, 0.25, 0.25, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]
    r = client.post("/classify", json={"features": f, "repeats": 5, "seed": 3}).json()
    assert r["severity"] in (0, 1, 2) and r["rule_severity"] == 0 and len(r["counts"]) == 3
    again = client.post("/classify", json={"features": f, "repeats": 5, "seed": 3}).json()
    assert again == r
    assert client.post("/classify", json={"features": f[:9]}).status_code == 422
    assert client.post("/classify", json={"features": [2.0] * 10}).status_code == 422


def test_snn_needs_weights(monkeypatch):
    import pdds.service.app as app_mod
    monkeypatch.setattr(app_mod, "bundled_weights", lambda: None)
    c = TestClient(app_mod.create_app())
    assert c.post("/sessions", json={"classifier": "snn"}).status_code == 409
    assert c.post("/sessions", json={"classifier": "rule"}).status_code == 201


def test_scenarios_endpoint(client):
    r = client.get("/scenarios").json()
    assert r["passed"] == r["total"] == 15


def test_energy_endpoint(client):
    r = client.post("/energy", json={"synops": 20000, "calibrate": True}).json()
    assert r["computed"]["snn_energy_J"] == pytest.approx(1551e-15)
    assert client.post("/energy", json={"synops": 0, "calibrate": True}).status_code == 422
