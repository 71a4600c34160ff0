import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from bonecheck import data as dat
from bonecheck import evaluation as ev
from bonecheck.models import ARCHITECTURES, ArchConfig, save_checkpoint
from bonecheck.service import ServiceConfig, create_app, resolve_registry


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc_models")
    paths = {}
    for i, arch in enumerate(("micro_mobile", "micro_cell", "micro_xception")):
        model = ARCHITECTURES[arch](ArchConfig(input_size=(1, 32, 32), seed=i))
        path = root / f"{arch}.ckpt"
        save_checkpoint(model, path)
        paths[arch] = str(path)
    return paths


@pytest.fixture(scope="module")
def client(checkpoints):
    config = ServiceConfig(registry=checkpoints, max_upload_bytes=64 * 1024)
    return TestClient(create_app(config))


def _png_bytes(seed=0, size=32):
    arr = (np.random.default_rng(seed).random((size, size)) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


class TestEndpoints:
    def test_health(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        assert r.json() == {"status": "ok"}

    def test_models_listing(self, client, checkpoints):
        r = client.get("/models")
        assert r.status_code == 200
        models = r.json()["models"]
        assert {m["name"] for m in models} == set(checkpoints)
        assert all(m["input_size"] == [1, 32, 32] for m in models)

    def test_predict_three_models(self, client):
        r = client.post("/predict",
                        files={"image": ("x.png", _png_bytes(), "image/png")},
                        data={"models": "micro_mobile,micro_cell,micro_xception"})
        assert r.status_code == 200
        body = r.json()
        assert [e["model"] for e in body] == ["micro_mobile", "micro_cell",
                                              "micro_xception"]
        for entry in body:
            assert entry["probability_normal"] + entry["probability_abnormal"] == 1.0
            assert entry["decision"] == ev.decide(entry["probability_normal"])
            assert entry["elapsed_ms"] >= 0

    def test_predict_default_is_all_models(self, client):
        r = client.post("/predict", files={"image": ("x.png", _png_bytes())})
        assert r.status_code == 200
        assert len(r.json()) == 3

    def test_cam_field_is_decodable_png(self, client):
        r = client.post("/predict", files={"image": ("x.png", _png_bytes())},
                        data={"models": "micro_mobile", "cam": "true"})
        assert r.status_code == 200
        blob = base64.b64decode(r.json()[0]["cam_png_base64"])
        with Image.open(io.BytesIO(blob)) as im:
            assert im.size == (32, 32)
            assert im.mode == "RGB"

    def test_unknown_model_404(self, client):
        r = client.post("/predict", files={"image": ("x.png", _png_bytes())},
                        data={"models": "nope"})
        assert r.status_code == 404
        assert "nope" in r.json()["error"]

    def test_undecodable_image_400(self, client):
        r = client.post("/predict", files={"image": ("x.png", b"not a png")},
                        data={"models": "micro_mobile"})
        assert r.status_code == 400

    def test_oversize_upload_413(self, client):
        r = client.post("/predict",
                        files={"image": ("x.png", b"\x00" * (65 * 1024))},
                        data={"models": "micro_mobile"})
        assert r.status_code == 413
        assert "limit" in r.json()["error"]


class TestParity:
    def test_service_matches_cli_inference_bitwise(self, client, checkpoints, tmp_path):
        blob = _png_bytes(3)
        path = tmp_path / "img.png"
        path.write_bytes(blob)
        from bonecheck.models import load_checkpoint
        model = load_checkpoint(checkpoints["micro_mobile"])
        direct = ev.predict_image(model, dat.load_image(path, (32, 32)))
        r = client.post("/predict", files={"image": ("img.png", blob)},
                        data={"models": "micro_mobile"})
        assert r.json()[0]["probability_normal"] == direct


class TestStartup:
    def test_missing_checkpoint_refuses_to_start(self):
        with pytest.raises(Exception):
            create_app(ServiceConfig(registry={"m": "/nonexistent.ckpt"}))

    def test_empty_registry_rejected(self):
        with pytest.raises(ValueError):
            ServiceConfig(registry={})

    def test_resolve_registry_flags(self):
        reg = resolve_registry(["a=/tmp/a.ckpt", "b=/tmp/b.ckpt"], None)
        assert reg == {"a": "/tmp/a.ckpt", "b": "/tmp/b.ckpt"}

    def test_resolve_registry_env_dir(self, tmp_path, monkeypatch, checkpoints):
        import shutil
        shutil.copy(checkpoints["micro_mobile"], tmp_path / "m1.ckpt")
        monkeypatch.setenv("BONECHECK_MODELS_DIR", str(tmp_path))
        reg = resolve_registry([], None)
        assert "m1" in reg

    def test_resolve_registry_nothing(self, monkeypatch):
        monkeypatch.delenv("BONECHECK_MODELS_DIR", raising=False)
        with pytest.raises(ValueError):
            resolve_registry([], None)
