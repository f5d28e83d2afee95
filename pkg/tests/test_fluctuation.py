import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from gifdl.errors import (
    BackendError,
    ConfigError,
    GenerationExhaustedError,
    ShapeError,
    SizeError,
)
from gifdl.fluctuation import (
    DEFAULT_SWEEP,
    DatasetManifest,
    GenerationRequest,
    HttpBackend,
    ProceduralBackend,
    RecordedBackend,
    build_dataset,
    build_fluctuation_set,
    check_disjoint,
    mse,
    read_manifest,
    split_manifest,
    write_manifest,
)
from gifdl.image import encode_pgm


def loop_mse(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            d = float(a[i, j]) - float(b[i, j])
            total += d * d
    return total / (a.shape[0] * a.shape[1])


class StubBackend:
    """Cover is a fixed random image; every other cfg adds +1 to one pixel."""

    def __init__(self, outliers=(), size=(16, 16)):
        self.base = np.random.default_rng(0).integers(10, 240, size).astype(np.uint8)
        self.outliers = {round(c, 6) for c in outliers}
        self.calls = []

    def generate(self, req):
        self.calls.append(req.cfg_scale)
        img = self.base.copy()
        if round(req.cfg_scale, 6) != 7.5:
            img[0, 0] += 1
        if round(req.cfg_scale, 6) in self.outliers:
            img = 255 - img
        return img


def test_mse_trivial_cases():
    z = np.zeros((2, 2), np.uint8)
    assert mse(z, z) == 0
    assert mse(z, np.ones((2, 2), np.uint8)) == 1


def test_mse_against_loop_oracle(rng):
    a, b = rng.integers(0, 256, (2, 8, 8), dtype=np.uint8)
    assert mse(a, b) == pytest.approx(loop_mse(a, b), rel=1e-15)
    assert mse(a, b) == mse(b, a)


def test_mse_shape_error():
    with pytest.raises(ShapeError):
        mse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_request_validation():
    with pytest.raises(ConfigError):
        GenerationRequest("x", 0, 0.0)
    with pytest.raises(ConfigError):
        GenerationRequest("x", -1, 7.5)


def test_all_accepted_first_pass():
    b = StubBackend()
    fs = build_fluctuation_set(b, "cat", 3, tau=100)
    assert fs.n == 10 and not fs.rejected
    assert len(b.calls) == 11
    assert fs.cfg_values == [7.5, *DEFAULT_SWEEP]


def test_outlier_rejected_and_replaced():
    b = StubBackend(outliers=[7.498])
    fs = build_fluctuation_set(b, "cat", 3, tau=25)
    assert fs.n == 10
    assert [c for c, _ in fs.rejected] == [7.498]
    assert 7.498 not in fs.cfg_values
    assert fs.cfg_values[-1] == pytest.approx(7.506)
    assert len(set(fs.cfg_values)) == 11
    assert all(mse(fs.cover, f) <= 25 for f in fs.fluctuations)


def test_exhausted_carries_accepted_count():
    with pytest.raises(GenerationExhaustedError) as info:
        build_fluctuation_set(ProceduralBackend(), "dog", 0, tau=0.0, max_retries=3)
    assert info.value.accepted == 0 and info.value.tried == 13


def test_sweep_validation():
    with pytest.raises(ConfigError):
        build_fluctuation_set(StubBackend(), "x", 0, sweep=[7.5, 7.501])
    with pytest.raises(ConfigError):
        build_fluctuation_set(StubBackend(), "x", 0, sweep=[])


def test_backend_failure_echoes_request():
    class Broken:
        def generate(self, req):
            raise RuntimeError("GPU on fire")

    with pytest.raises(BackendError) as info:
        build_fluctuation_set(Broken(), "owl", 5)
    assert info.value.request == GenerationRequest("owl", 5, 7.5)
    assert "GPU on fire" in str(info.value)


def test_concurrent_requests_match_serial():
    a = build_fluctuation_set(ProceduralBackend(), "fox", 1, max_in_flight=1)
    b = build_fluctuation_set(ProceduralBackend(), "fox", 1, max_in_flight=4)
    assert a.cfg_values == b.cfg_values
    assert all(np.array_equal(x, y) for x, y in zip(a.fluctuations, b.fluctuations))


def test_procedural_backend_is_deterministic_and_small_noise():
    b = ProceduralBackend()
    r = GenerationRequest("bee", 2, 7.501)
    assert np.array_equal(b.generate(r), b.generate(r))
    cover = b.generate(GenerationRequest("bee", 2, 7.5))
    assert 0 < mse(cover, b.generate(r)) < 25


def test_recorded_backend_replays_default_sweep(tmp_path):
    src = ProceduralBackend(size=(32, 32))
    rec = RecordedBackend(tmp_path / "rec")
    for c in (7.5, *DEFAULT_SWEEP):
        req = GenerationRequest("a lighthouse", 4, c)
        rec.record(req, src.generate(req))
    fs = build_fluctuation_set(rec, "a lighthouse", 4)
    assert fs.cfg_values == [7.5, 7.495, 7.496, 7.497, 7.498, 7.499, 7.501, 7.502, 7.503, 7.504, 7.505]
    with pytest.raises(BackendError):
        rec.generate(GenerationRequest("a lighthouse", 4, 9.0))


@pytest.fixture
def http_server():
    seen = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.append((body, self.headers.get("Authorization")))
            if body["prompt"] == "fail":
                self.send_response(500)
                self.end_headers()
                return
            req = GenerationRequest(body["prompt"], body["seed"], body["cfg_scale"])
            data = encode_pgm(ProceduralBackend(size=(40, 40)).generate(req))
            self.send_response(200)
            self.send_header("Content-Type", "image/x-portable-graymap")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/generate", seen
    server.shutdown()


def test_http_backend_round_trip(http_server, monkeypatch):
    url, seen = http_server
    monkeypatch.setenv("GIFDL_BACKEND_URL", url)
    monkeypatch.setenv("GIFDL_BACKEND_TOKEN", "s3cret")
    b = HttpBackend(size=(32, 32))
    img = b.generate(GenerationRequest("kite", 1, 7.5))
    assert img.shape == (32, 32)
    assert seen[0] == ({"prompt": "kite", "seed": 1, "cfg_scale": 7.5}, "Bearer s3cret")


def test_http_backend_errors(http_server):
    url, seen = http_server
    with pytest.raises(BackendError) as info:
        HttpBackend(url=url, retries=1, timeout=5).generate(GenerationRequest("fail", 0, 7.5))
    assert info.value.request.prompt == "fail"
    assert len(seen) == 2


def test_http_backend_needs_url(monkeypatch):
    monkeypatch.delenv("GIFDL_BACKEND_URL", raising=False)
    with pytest.raises(ConfigError):
        HttpBackend()


def test_dataset_manifest_round_trip_and_split(tmp_path):
    prompts = ["red fox", "tabby cat", "barn owl"]
    manifest, stats = build_dataset(ProceduralBackend(size=(32, 32)), prompts, [0, 1], tmp_path, name="toy")
    assert len(manifest) == 6 and stats.sets == 6
    assert stats.candidates == 60 + stats.rejected
    manifest.validate()
    back = read_manifest(tmp_path / "toy.tsv")
    assert back.entries == manifest.entries and back.image_size == (32, 32)
    s = back.load_set(2)
    assert s.n == 10 and s.prompt == "tabby cat"

    parts = split_manifest(back, (3, 1, 2), rng_seed=7)
    assert [p.role for p in parts] == ["train", "val", "test"]
    assert [len(p) for p in parts] == [3, 1, 2]
    check_disjoint(*parts)
    again = split_manifest(back, (3, 1, 2), rng_seed=7)
    assert [p.entries for p in parts] == [p.entries for p in again]
    with pytest.raises(ConfigError):
        check_disjoint(parts[0], DatasetManifest("x", "test", parts[0].entries, (32, 32), parts[0].root))
    with pytest.raises(SizeError):
        split_manifest(back, (5, 1, 1))

    write_manifest(parts[2], tmp_path / "test.tsv")
    assert read_manifest(tmp_path / "test.tsv").role == "test"


def test_manifest_validation_catches_missing_file(tmp_path):
    manifest, _ = build_dataset(ProceduralBackend(size=(16, 16)), ["x"], [0], tmp_path)
    (tmp_path / manifest.entries[0].fluctuations[3]).unlink()
    with pytest.raises(ConfigError, match="missing file"):
        manifest.validate()


def test_manifest_role_checked():
    with pytest.raises(ConfigError):
        DatasetManifest("x", "holdout", [], (16, 16))


def test_not_a_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("hello\n")
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "m.tsv")
