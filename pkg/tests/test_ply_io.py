"""PLY persistence: round-trips, layout tolerance, malformed inputs."""

import numpy as np
import pytest

from gaussedit import FormatError, GaussianScene, InvalidParameterError
from gaussedit.ply import load_ply, save_ply


def random_scene(n, seed=0, float32_exact=True):
    rng = np.random.default_rng(seed)
    values = {
        "mu": rng.normal(size=(n, 3)),
        "log_scale": rng.normal(size=(n, 3)) * 0.4,
        "rot": rng.normal(size=(n, 4)),
        "sh0": rng.normal(size=(n, 3)) * 0.3,
        "opacity_logit": rng.normal(size=n),
    }
    if float32_exact:
        values = {k: v.astype(np.float32).astype(np.float64) for k, v in values.items()}
    return GaussianScene(editable_start=n, **values)


def test_roundtrip_preserves_fields_bit_exactly(tmp_path):
    scene = random_scene(3, seed=1)
    path = tmp_path / "scene.ply"
    save_ply(scene, path)
    loaded = load_ply(path)
    assert len(loaded) == 3
    np.testing.assert_array_equal(loaded.mu, scene.mu)
    np.testing.assert_array_equal(loaded.log_scale, scene.log_scale)
    np.testing.assert_array_equal(loaded.rot, scene.rot)
    np.testing.assert_array_equal(loaded.sh0, scene.sh0)
    np.testing.assert_array_equal(loaded.opacity_logit, scene.opacity_logit)


def test_editable_range_not_persisted(tmp_path):
    scene = random_scene(6, seed=2)
    scene.editable_start = 2
    path = tmp_path / "scene.ply"
    save_ply(scene, path)
    loaded = load_ply(path)
    assert loaded.n_editable == 0


def test_save_load_save_is_byte_stable(tmp_path):
    # Arbitrary float64 values quantize once on the first save, then stay fixed.
    scene = random_scene(10, seed=3, float32_exact=False)
    p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
    save_ply(scene, p1)
    save_ply(load_ply(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_scene_roundtrip(tmp_path):
    path = tmp_path / "empty.ply"
    save_ply(GaussianScene(), path)
    assert len(load_ply(path)) == 0


def test_missing_opacity_property_is_format_error(tmp_path):
    scene = random_scene(2, seed=4)
    path = tmp_path / "scene.ply"
    save_ply(scene, path)
    raw = path.read_bytes()
    stripped = raw.replace(b"property float opacity\n", b"", 1)
    bad = tmp_path / "bad.ply"
    bad.write_bytes(stripped)
    with pytest.raises(FormatError, match="opacity"):
        load_ply(bad)


def test_extra_f_rest_properties_are_dropped(tmp_path):
    scene = random_scene(2, seed=5)
    path = tmp_path / "scene.ply"
    save_ply(scene, path)
    raw = path.read_bytes()
    header_end = raw.index(b"end_header\n")
    header = raw[:header_end].decode("ascii")
    body = raw[header_end + len(b"end_header\n") :]
    # Append three f_rest_* columns to the header and widen each vertex record.
    extra = "property float f_rest_0\nproperty float f_rest_1\nproperty float f_rest_2\n"
    new_header = (header + extra + "end_header\n").encode("ascii")
    n_fields = 17
    rows = np.frombuffer(body, dtype="<f4").reshape(2, n_fields)
    widened = np.concatenate([rows, np.full((2, 3), 7.0, dtype="<f4")], axis=1)
    wide = tmp_path / "wide.ply"
    wide.write_bytes(new_header + widened.tobytes())
    loaded = load_ply(wide)
    np.testing.assert_array_equal(loaded.mu, scene.mu)
    np.testing.assert_array_equal(loaded.sh0, scene.sh0)


def test_not_a_ply_file(tmp_path):
    bad = tmp_path / "noise.ply"
    bad.write_bytes(b"PK\x03\x04 definitely not ply")
    with pytest.raises(FormatError):
        load_ply(bad)


def test_ascii_format_rejected(tmp_path):
    bad = tmp_path / "ascii.ply"
    bad.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nend_header\n")
    with pytest.raises(FormatError, match="binary_little_endian"):
        load_ply(bad)


def test_truncated_payload_rejected(tmp_path):
    scene = random_scene(4, seed=6)
    path = tmp_path / "scene.ply"
    save_ply(scene, path)
    raw = path.read_bytes()
    cut = tmp_path / "cut.ply"
    cut.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_ply(cut)


def test_nan_payload_is_validation_error(tmp_path):
    scene = random_scene(2, seed=7)
    path = tmp_path / "scene.ply"
    save_ply(scene, path)
    raw = bytearray(path.read_bytes())
    header_len = raw.index(b"end_header\n") + len(b"end_header\n")
    nan = np.array([np.nan], dtype="<f4").tobytes()
    raw[header_len : header_len + 4] = nan
    bad = tmp_path / "nan.ply"
    bad.write_bytes(bytes(raw))
    with pytest.raises(InvalidParameterError):
        load_ply(bad)


def test_save_rejects_non_finite_scene(tmp_path):
    scene = random_scene(2, seed=8)
    scene.sh0[0, 0] = np.inf
    with pytest.raises(InvalidParameterError):
        save_ply(scene, tmp_path / "never.ply")
