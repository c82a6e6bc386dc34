import json
import threading
import urllib.error
import urllib.request

import pytest

from bootalign.ensemble import BaggingPlan
from bootalign.harness import Config, Detector
from bootalign.service import AnalysisService, make_server

CFG = Config(plan=BaggingPlan(m=8, n=20), max_len=300)


@pytest.fixture(scope="module")
def service(tiny_store):
    return AnalysisService(tiny_store, CFG)


def body(**kw):
    return json.dumps(kw).encode()


def test_health(service):
    status, out = service.handle("GET", "/v1/health")
    assert status == 200
    assert out["apps"] == 2 and out["samples"] == {"app00": 9, "app01": 9}


def test_analyze_legitimate_like(service, tiny_corpus):
    # a typical stored sample; the stored-sample sweep lives in test_harness
    s = tiny_corpus.legitimate("app00")[0]
    status, out = service.handle("POST", "/v1/analyze",
                                 body(app_id="app00", device_id=s.device_id, syscalls=s.names()))
    assert status == 200
    assert set(out) == {"label", "p_value", "I", "n_effective"}
    assert out["label"] == "legitimate" and out["I"] == CFG.confidence


def test_analyze_matches_detector(service, tiny_corpus, tiny_store):
    s = tiny_corpus.malicious("app01")[2]
    _, out = service.handle("POST", "/v1/analyze", body(app_id="app01", syscalls=s.names()))
    v = Detector(tiny_store, CFG).analyze(s.names(), "app01").verdict
    assert out["label"] == v.label and out["p_value"] == v.p_value


@pytest.mark.parametrize("payload,code", [
    (b"{not json", "malformed_json"),
    (b"[1, 2]", "invalid_request"),
    (body(device_id="d", syscalls=["read"]), "invalid_request"),
    (body(app_id="app00", syscalls="read"), "invalid_request"),
    (body(app_id="app00", syscalls=[1, 2]), "invalid_request"),
    (body(app_id="app00", syscalls=[]), "empty_input"),
])
def test_validation_errors(service, payload, code):
    status, out = service.handle("POST", "/v1/analyze", payload)
    assert status == 400 and out["error"]["code"] == code


def test_unknown_app_and_routes(service):
    status, out = service.handle("POST", "/v1/analyze", body(app_id="ghost", syscalls=["read"]))
    assert status == 404 and out["error"]["code"] == "unknown_app"
    assert service.handle("GET", "/v1/nothing")[0] == 404
    assert service.handle("GET", "/v1/analyze")[0] == 405
    assert service.handle("POST", "/v1/health")[0] == 405


def test_http_roundtrip_concurrent(service, tiny_corpus):
    server = make_server(service, port=0)
    port = server.server_address[1]
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    try:
        url = f"http://127.0.0.1:{port}"
        with urllib.request.urlopen(f"{url}/v1/health") as r:
            assert json.load(r)["apps"] == 2
        samples = tiny_corpus.legitimate("app01")[:3] + tiny_corpus.malicious("app01")[:3]
        results = [None] * len(samples)

        def hit(k):
            req = urllib.request.Request(f"{url}/v1/analyze", method="POST",
                                         data=body(app_id="app01", syscalls=samples[k].names()),
                                         headers={"Content-Type": "application/json"})
            with urllib.request.urlopen(req) as r:
                results[k] = json.load(r)

        threads = [threading.Thread(target=hit, args=(k,)) for k in range(len(samples))]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        for s, res in zip(samples, results):
            assert res == service.handle("POST", "/v1/analyze",
                                         body(app_id="app01", syscalls=s.names()))[1]
        with pytest.raises(urllib.error.HTTPError) as exc:
            urllib.request.urlopen(urllib.request.Request(f"{url}/v1/analyze", method="POST",
                                                          data=b"{}"))
        assert exc.value.code == 400
    finally:
        server.shutdown()
        server.server_close()
