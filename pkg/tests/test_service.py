"""Endpoint tests for the HTTP service.

Everything runs in-process against the ASGI app.  Config and parse problems
must come back as HTTP 400; checks that ran but did not hold come back as
200 with ok=false.  The heavier numeric behaviour is covered elsewhere, so
these tests pin the wire contract: field names, status codes, and the
skip-vs-fail distinction for the analytic comparison.
"""

import json
import warnings

import pytest

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from starlette.testclient import TestClient

from pipelab.config import ModelConfig
from pipelab.costs import DurationTable
from pipelab.generators import METHODS, generate
from pipelab.schedule import dumps
from pipelab.service import RUNTIME_CHECK_ELEMENT_LIMIT, create_app

DIMS = {"L": 4, "h": 8, "s": 8, "b": 1, "heads": 2, "p": 2, "m": 4}

SWEEP_CONFIG = """\
[model]
h = 8
b = 1
heads = 2

[run]
methods = 1f1b, zb1p
mode = unit
unit_times = 1, 3, 2
comm = zero

[sweep]
p = 2
L = 2p
s = 8
m = 2p
"""


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app(), raise_server_exceptions=False) as c:
        yield c


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert body["version"]


def test_simulate_zero_comm_reports_analytic(client):
    r = client.post("/simulate", json={"method": "1f1b", "dims": DIMS})
    assert r.status_code == 200
    body = r.json()
    assert body["method"] == "1f1b"
    assert body["makespan"] > 0
    assert len(body["per_stage_bubble"]) == DIMS["p"]
    assert body["analytic_ok"] is True
    assert any("bubble" in line for line in body["analytic_lines"])
    # neither extra was requested
    assert body["steady_state_wait"] is None
    assert body["trace"] is None


def test_simulate_trace_and_overlap_on_request(client):
    r = client.post("/simulate", json={
        "method": "helix_twofold", "dims": DIMS,
        "include_trace": True, "include_overlap": True,
    })
    assert r.status_code == 200
    body = r.json()
    assert body["steady_state_wait"] == 0            # zero comm: nothing to wait on
    assert isinstance(body["trace"], list) and body["trace"]
    ev = body["trace"][0]
    assert {"name", "ph", "ts", "dur", "pid"} <= set(ev)


def test_simulate_nonzero_comm_skips_comparison(client):
    r = client.post("/simulate", json={
        "method": "1f1b", "dims": DIMS,
        "comm": {"mode": "uniform", "cost": 2},
    })
    assert r.status_code == 200
    body = r.json()
    assert body["analytic_ok"] is None
    assert body["analytic_lines"] == []


def test_simulate_rejects_unknown_method(client):
    r = client.post("/simulate", json={"method": "gpipe", "dims": DIMS})
    assert r.status_code == 400
    assert "gpipe" in r.json()["detail"]


def test_simulate_rejects_bad_dims(client):
    bad = dict(DIMS, L=5)                            # 5 layers over 2 stages
    r = client.post("/simulate", json={"method": "1f1b", "dims": bad})
    assert r.status_code == 400


def test_simulate_rejects_unknown_comm_mode(client):
    r = client.post("/simulate", json={
        "method": "1f1b", "dims": DIMS, "comm": {"mode": "carrier_pigeon"},
    })
    assert r.status_code == 400


def test_validate_generated(client):
    for method in METHODS:
        r = client.post("/validate", json={"method": method, "dims": DIMS})
        assert r.status_code == 200
        body = r.json()
        assert body["ok"] is True
        assert body["method"] == method
        assert body["stages"] == DIMS["p"]
        assert body["tasks"] > 0
        assert body["error"] is None


def test_validate_round_trips_schedule_text(client):
    cfg = ModelConfig(L=4, h=8, s=8, b=1, num_heads=2, p=2, m=4)
    sched = generate("zb1p", cfg, DurationTable.from_units(1, 3, 2))
    r = client.post("/validate", json={"schedule_text": dumps(sched)})
    assert r.status_code == 200
    body = r.json()
    assert body["ok"] is True
    assert body["method"] == "zb1p"
    assert body["tasks"] == len(sched.tasks)


def test_validate_semantic_failure_is_200(client):
    # Parseable text whose memory ledger no longer balances: 200 + ok=false.
    cfg = ModelConfig(L=4, h=8, s=8, b=1, num_heads=2, p=2, m=4)
    text = dumps(generate("1f1b", cfg, DurationTable.from_units(1, 3, 2)))
    assert "mem=-2048" in text
    tampered = text.replace("mem=-2048", "mem=-2047", 1)
    r = client.post("/validate", json={"schedule_text": tampered})
    assert r.status_code == 200
    body = r.json()
    assert body["ok"] is False
    assert "ends at" in body["error"]


def test_validate_unparseable_text_is_400(client):
    r = client.post("/validate", json={"schedule_text": "not a schedule\n"})
    assert r.status_code == 400


def test_validate_needs_exactly_one_input(client):
    both = client.post("/validate", json={
        "schedule_text": "# pipelab schedule v1\n", "method": "1f1b", "dims": DIMS,
    })
    neither = client.post("/validate", json={})
    assert both.status_code == 400
    assert neither.status_code == 400


def test_runtime_check_all_methods(client):
    r = client.post("/runtime-check", json={})
    assert r.status_code == 200
    body = r.json()
    assert body["ok"] is True
    assert set(body["per_method"]) == set(METHODS)
    assert all(body["per_method"].values())
    assert len(body["losses"]) == 4                  # default m
    assert all("bitwise equal" in line for line in body["detail"])


def test_runtime_check_rejects_unknown_method(client):
    r = client.post("/runtime-check", json={"methods": ["1f1b", "dreams"]})
    assert r.status_code == 400
    assert "dreams" in r.json()["detail"]


def test_runtime_check_rejects_oversized_problem(client):
    huge = {"L": 8, "h": 1024, "s": 4096, "b": 4, "heads": 8, "p": 2, "m": 4}
    assert huge["s"] * huge["b"] * huge["h"] * huge["L"] * huge["m"] \
        > RUNTIME_CHECK_ELEMENT_LIMIT
    r = client.post("/runtime-check", json={"dims": huge})
    assert r.status_code == 400
    assert "too large" in r.json()["detail"]


def test_sweep(client, tmp_path):
    r = client.post("/sweep", json={"config_text": SWEEP_CONFIG,
                                    "outdir": str(tmp_path)})
    assert r.status_code == 200
    body = r.json()
    assert body["exit_code"] == 0
    assert body["ok"] is True
    assert len(body["rows"]) == 2                    # one grid point, two methods
    assert any(a.endswith("metrics.csv") for a in body["artifacts"])
    assert (tmp_path / "metrics.csv").exists()


def test_sweep_rejects_bad_config(client):
    r = client.post("/sweep", json={"config_text": "[model]\nh = 8\n"})
    assert r.status_code == 400


def test_overlap_threshold(client):
    r = client.post("/overlap-threshold", json={
        "device": "h20_like", "h": 4096, "heads": 32,
        "lo": 1024, "hi": 1 << 20,
    })
    assert r.status_code == 200
    body = r.json()
    assert body["crossover_s"] == 1414
    assert body["attn_ns"] is not None and body["comm_ns"] is not None
    assert body["lines"]


def test_overlap_threshold_bandwidth_override(client):
    req = {"device": "h20_like", "h": 4096, "heads": 32,
           "lo": 1024, "hi": 1 << 20}
    ideal = client.post("/overlap-threshold",
                        json=dict(req, link_bandwidth=10**18)).json()
    assert ideal["device"].endswith("*")
    assert ideal["crossover_s"] == 1024              # covered already at lo
    slow = client.post("/overlap-threshold",
                       json=dict(req, link_bandwidth=10**9)).json()
    assert slow["crossover_s"] is None or slow["crossover_s"] > 1414


def test_overlap_threshold_rejects_bad_range(client):
    r = client.post("/overlap-threshold", json={
        "device": "h20_like", "h": 4096, "heads": 32, "lo": 4096, "hi": 1024,
    })
    assert r.status_code == 400


def test_unvalidated_body_is_422(client):
    r = client.post("/simulate", json={"dims": DIMS})  # method missing
    assert r.status_code == 422


def test_openapi_lists_all_endpoints(client):
    spec = client.get("/openapi.json").json()
    assert {"/simulate", "/validate", "/runtime-check", "/sweep",
            "/overlap-threshold"} <= set(spec["paths"])
    assert json.dumps(spec)                          # serializable contract
