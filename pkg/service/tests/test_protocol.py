"""Wire-protocol conformance: the engine's remote client against a live
mock-mode service. Exercises all four endpoints plus health, and the
structured rejection of malformed requests."""

import socket
import threading
import time

import numpy as np
import pytest
import requests
import uvicorn

from gaussedit.errors import ServiceError
from gaussedit.guidance import (
    GuidanceRequest,
    MULTI_VIEW,
    RemoteGuidance,
    SINGLE_VIEW,
)

from diffusion_service import create_app


def _serve(app):
    """Run the app in a daemon thread on a free local port; yield its URL."""
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    config = uvicorn.Config(app, host="127.0.0.1", port=port,
                            log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + 10.0
    while time.monotonic() < deadline:
        try:
            requests.get(f"{url}/healthz", timeout=0.5)
            return server, thread, url
        except requests.RequestException:
            time.sleep(0.05)
    raise RuntimeError("service did not come up")


@pytest.fixture(scope="module")
def service_url(tmp_path_factory):
    app = create_app(mock=True,
                     weights_dir=str(tmp_path_factory.mktemp("weights")))
    server, thread, url = _serve(app)
    yield url
    server.should_exit = True
    thread.join(timeout=5.0)


@pytest.fixture(scope="module")
def client(service_url):
    return RemoteGuidance(service_url, timeout=10.0)


def sample_image(seed=0, size=16):
    return np.random.default_rng(seed).random((size, size, 3))


def test_health_reports_ok_and_backends(client):
    body = client.health()
    assert body["status"] == "ok"
    assert set(body["backends"]) >= {SINGLE_VIEW, MULTI_VIEW}


def test_residual_single_view_round_trip(client):
    img = sample_image(1)
    req = GuidanceRequest(images=[img], prompt_text="a photo of a toy",
                          timestep=0.5, seed=3)
    resp = client.residual(req, SINGLE_VIEW)
    assert len(resp.residuals) == 1
    assert resp.residuals[0].shape == (16, 16, 3)
    assert np.all(resp.residuals[0] == 0.0)


def test_residual_multi_view_round_trip(client):
    images = [sample_image(i, size=12) for i in range(4)]
    poses = [{"azimuth": float(a), "elevation": 15.0, "radius": 2.0}
             for a in (0.0, 90.0, 180.0, 270.0)]
    req = GuidanceRequest(images=images, prompt_text="a toy", timestep=0.3,
                          seed=1, view_poses=poses)
    resp = client.residual(req, MULTI_VIEW)
    assert len(resp.residuals) == 4
    for arr in resp.residuals:
        assert arr.shape == (12, 12, 3)
        assert np.all(np.isfinite(arr))


def test_img2img_strength_zero_echoes_within_quantization(client):
    img = sample_image(2)
    out = client.img2img(img, "a toy", strength=0.0, seed=5)
    assert out.shape == img.shape
    assert np.max(np.abs(out - img)) <= 1.0 / 255.0


def test_embed_round_trips_with_advertised_dims(client):
    dims = client.health()["encoders"]
    text_vec = client.embed("clip_text", "a small toy")
    assert text_vec.shape == (dims["clip_text"],)
    assert np.array_equal(client.embed("clip_text", "a small toy"), text_vec)

    img = sample_image(3, size=10)
    assert client.embed("clip_image", img).shape == (dims["clip_image"],)
    assert client.embed("dino_image", img).shape == (dims["dino_image"],)


def test_personalize_round_trip(client):
    refs = [sample_image(i, size=8) for i in range(2)]
    token, adapter_id = client.personalize(refs, "horse")
    assert token == "V*"
    assert adapter_id
    again_token, again_id = client.personalize(refs, "horse")
    assert (again_token, again_id) == (token, adapter_id)


def test_malformed_requests_rejected_with_structured_errors(client,
                                                            service_url):
    # wrong arity through the engine client's own validation is bypassed by
    # posting directly, so the service-side rejection is what's observed
    resp = requests.post(f"{service_url}/v1/residual", json={
        "backend": "mv",
        "prompt": "a toy",
        "images": ["AAAA"],
        "timestep": 0.5,
    }, timeout=5.0)
    assert resp.status_code == 400
    assert "error" in resp.json()

    resp = requests.post(f"{service_url}/v1/embed",
                         json={"kind": "clip_text"}, timeout=5.0)
    assert resp.status_code == 400
    assert "error" in resp.json()

    # through the engine client: a 400 surfaces as a non-retryable error
    # (strength is validated service-side, so it reaches the wire)
    with pytest.raises(ServiceError, match="400") as err:
        client.img2img(sample_image(4), "a toy", strength=2.0, seed=0)
    assert not err.value.retryable


def test_degraded_service_yields_retryable_errors(tmp_path_factory):
    app = create_app(mock=False,
                     weights_dir=str(tmp_path_factory.mktemp("no-weights")))
    server, thread, url = _serve(app)
    try:
        client = RemoteGuidance(url, timeout=10.0)
        assert client.health()["status"] == "degraded"
        with pytest.raises(ServiceError) as err:
            client.embed("clip_text", "a")
        assert err.value.retryable
    finally:
        server.should_exit = True
        thread.join(timeout=5.0)
