import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyraflow import flowio
from pyraflow.errors import ConfigError, FormatError, NumericError


def test_flo_round_trip_random(tmp_path):
    flow = np.random.default_rng(0).normal(0, 5, (2, 7, 9)).astype(np.float32)
    flowio.write_flo(flow, tmp_path / "a.flo")
    back = flowio.read_flo(tmp_path / "a.flo")
    assert back.dtype == np.float32
    assert back.tobytes() == flow.tobytes()


def test_flo_one_pixel_is_20_bytes(tmp_path):
    path = tmp_path / "one.flo"
    flowio.write_flo(np.array([[[1.0]], [[-2.0]]], np.float32), path)
    blob = path.read_bytes()
    assert len(blob) == 20
    assert struct.unpack("<fiiff", blob) == (202021.25, 1, 1, 1.0, -2.0)


def test_flo_layout_is_interleaved_row_major(tmp_path):
    flow = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    flowio.write_flo(flow, tmp_path / "f.flo")
    payload = np.frombuffer((tmp_path / "f.flo").read_bytes()[12:], "<f4")
    expect = [flow[c, y, x] for y in range(2) for x in range(3) for c in range(2)]
    assert payload.tolist() == expect


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 2**32 - 1), min_size=2, max_size=24).filter(lambda b: len(b) % 2 == 0))
def test_flo_round_trip_is_identity_on_bit_patterns(tmp_path_factory, bits):
    # every finite float32 pattern, including -0.0 and denormals, survives
    raw = np.array(bits, np.uint32)
    vals = raw.view(np.float32)
    vals = np.where(np.isfinite(vals), vals, np.float32(0)).astype(np.float32)
    flow = vals.reshape(2, 1, -1)
    path = tmp_path_factory.mktemp("flo") / "x.flo"
    flowio.write_flo(flow, path)
    assert flowio.read_flo(path).view(np.uint32).tobytes() == flow.view(np.uint32).tobytes()


def test_flo_negative_zero_and_denormal(tmp_path):
    tiny = np.float32(1e-45)  # smallest positive denormal
    flow = np.array([[[-0.0, tiny]], [[-tiny, 0.0]]], np.float32)
    flowio.write_flo(flow, tmp_path / "d.flo")
    back = flowio.read_flo(tmp_path / "d.flo")
    assert back.view(np.uint32).tolist() == flow.view(np.uint32).tolist()
    assert math.copysign(1.0, back[0, 0, 0]) == -1.0


def test_flo_bad_sentinel(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(struct.pack("<fiiff", 0.0, 1, 1, 0.0, 0.0))
    with pytest.raises(FormatError, match="not a flo file"):
        flowio.read_flo(path)


@pytest.mark.parametrize("cut", [4, 12, 16, 19])
def test_flo_truncated(tmp_path, cut):
    path = tmp_path / "t.flo"
    flowio.write_flo(np.zeros((2, 1, 1), np.float32), path)
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(FormatError, match="corrupt flo"):
        flowio.read_flo(path)


def test_flo_refuses_non_finite(tmp_path):
    flow = np.zeros((2, 2, 2), np.float32)
    flow[1, 0, 1] = np.nan
    with pytest.raises(NumericError):
        flowio.write_flo(flow, tmp_path / "n.flo")
    assert not (tmp_path / "n.flo").exists()


def test_flo_rejects_wrong_shape(tmp_path):
    with pytest.raises(ConfigError):
        flowio.write_flo(np.zeros((3, 2, 2), np.float32), tmp_path / "s.flo")


# ---------------------------------------------------------------------------
# netpbm


def test_ppm_round_trip_after_quantization(tmp_path):
    img = np.random.default_rng(1).random((3, 5, 4))
    q = np.rint(img * 255) / 255
    flowio.write_ppm(q, tmp_path / "a.ppm")
    back = flowio.read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(np.rint(back.astype(np.float64) * 255), np.rint(q * 255))


def test_ppm_2x2_size(tmp_path):
    flowio.write_ppm(np.zeros((3, 2, 2)), tmp_path / "s.ppm")
    header = b"P6\n2 2\n255\n"
    blob = (tmp_path / "s.ppm").read_bytes()
    assert blob.startswith(header) and len(blob) == len(header) + 12


def test_ppm_rounds_to_nearest(tmp_path):
    img = np.full((3, 1, 1), 0.5)  # 127.5 -> 128 under round-half-even of rint
    img[1] = 100.4 / 255
    img[2] = 100.6 / 255
    flowio.write_ppm(img, tmp_path / "r.ppm")
    assert list((tmp_path / "r.ppm").read_bytes()[-3:]) == [128, 100, 101]


def test_pgm_round_trip(tmp_path):
    g = np.rint(np.random.default_rng(2).random((1, 3, 6)) * 255) / 255
    flowio.write_pgm(g, tmp_path / "g.pgm")
    back = flowio.read_pgm(tmp_path / "g.pgm")
    assert back.shape == (1, 3, 6)
    assert np.array_equal(np.rint(back * 255), np.rint(g * 255))


def test_reads_pillow_fixtures(fixtures):
    rgb = flowio.read_ppm(fixtures / "pillow_3x2.ppm")
    expect = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]],
                       [[12, 34, 56], [128, 128, 128], [255, 255, 255]]]).transpose(2, 0, 1)
    assert np.array_equal(np.rint(rgb * 255), expect)
    gray = flowio.read_pgm_bytes(fixtures / "pillow_3x2.pgm")
    assert gray.tolist() == [[0, 17, 34], [100, 200, 255]]


def test_header_comments_and_whitespace(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2  1\n# another\n255\n\x07\x09")
    assert flowio.read_pgm_bytes(path).tolist() == [[7, 9]]


@pytest.mark.parametrize("blob", [
    b"P5\n2 1\n65535\n\x00\x00\x00\x00",  # 16-bit maxval unsupported
    b"P5\n2 x\n255\n\x00\x00",
    b"P5\n2 1\n255",  # no separator after maxval
    b"# lead\nP5\n2 1\n255\n\x00\x00",
    b"P5\n2 1\n255\n\x00",  # short payload
    b"P6\n2 1\n255\n\x00\x00",  # wrong magic for PGM
])
def test_malformed_pgm(tmp_path, blob):
    path = tmp_path / "m.pgm"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        flowio.read_pgm_bytes(path)


def test_write_rejects_out_of_range(tmp_path):
    with pytest.raises(ConfigError):
        flowio.write_ppm(np.full((3, 1, 1), 1.5), tmp_path / "x.ppm")


# ---------------------------------------------------------------------------
# color wheel


def _oracle_wheel():
    # piecewise-linear walk through the six primary/secondary anchors
    anchors = [(255, 0, 0), (255, 255, 0), (0, 255, 0), (0, 255, 255), (0, 0, 255), (255, 0, 255)]
    counts = [15, 6, 4, 11, 13, 6]
    rows = []
    for i, n in enumerate(counts):
        a = np.array(anchors[i], float)
        b = np.array(anchors[(i + 1) % 6], float)
        for j in range(n):
            rows.append(a + np.floor(255 * j / n) / 255 * (b - a))
    return np.array(rows)


def _oracle_color(u, v, max_norm):
    wheel = _oracle_wheel()
    n = len(wheel)
    rad = min(math.hypot(u, v) / max_norm, 1.0)
    pos = (math.atan2(-v, -u) / math.pi + 1) / 2 * (n - 1)
    lo = int(math.floor(pos))
    frac = pos - lo
    c = (1 - frac) * wheel[lo] + frac * wheel[(lo + 1) % n]
    return 255 * (1 - rad * (1 - c / 255))


def test_colorwheel_matches_oracle_table():
    assert np.array_equal(flowio.make_colorwheel(), _oracle_wheel())


@pytest.mark.parametrize("u,v", [(1.0, 0.0), (0.0, 1.0), (-0.6, 0.3), (0.2, -0.9), (0.5, 0.5)])
def test_flow_to_color_matches_oracle(u, v):
    img = flowio.flow_to_color(np.array([[[u]], [[v]]], np.float32), max_norm=1.0)
    expect = _oracle_color(np.float32(u), np.float32(v), 1.0)
    assert np.abs(img[:, 0, 0].astype(float) - expect).max() <= 1


def test_zero_flow_is_white():
    img = flowio.flow_to_color(np.zeros((2, 4, 5), np.float32))
    assert img.dtype == np.uint8 and np.all(img == 255)


def test_scale_invariance_of_hue():
    flow = np.random.default_rng(3).normal(size=(2, 6, 6)).astype(np.float32)
    a = flowio.flow_to_color(flow, max_norm=2.0)
    b = flowio.flow_to_color(flow * np.float32(4), max_norm=8.0)
    assert np.array_equal(a, b)


def test_saturation_clamps_beyond_max_norm():
    d = np.array([0.6, -0.8], np.float32)
    flows = np.stack([d * s for s in (1, 3, 50)], axis=1)[:, :, None]  # (2, 3, 1)
    img = flowio.flow_to_color(flows, max_norm=1.0)
    assert np.array_equal(img[:, 0], img[:, 1]) and np.array_equal(img[:, 1], img[:, 2])


def test_auto_max_norm_floor():
    assert flowio.auto_max_norm(np.zeros((2, 3, 3))) == 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_color_channels_in_range(seed, scale):
    flow = (np.random.default_rng(seed).normal(size=(2, 5, 5)) * scale).astype(np.float32)
    img = flowio.flow_to_color(flow)
    assert img.dtype == np.uint8 and img.shape == (3, 5, 5)


def test_flow_to_color_rejects_nan():
    flow = np.zeros((2, 2, 2), np.float32)
    flow[0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        flowio.flow_to_color(flow)
