import math

import numpy as np
import pytest

from oikg.errors import DegeneratePose, InvalidArgument
from oikg.geometry import (
    TWO_PI,
    angular_distance,
    apply_pose,
    nearest_view,
    relative_pose,
    trig_embed,
    wrap_angle,
)


def brute_min_circular(a, b, k_range=4):
    """Independent oracle: min over k in [-k_range, k_range] of |a - b + 2k*pi|."""
    ks = np.arange(-k_range, k_range + 1)
    return np.min(np.abs(a - b + 2.0 * np.pi * ks))


def test_wrap_identity():
    assert wrap_angle(0.0) == 0.0


def test_wrap_periodicity():
    assert wrap_angle(TWO_PI + 0.5) == pytest.approx(0.5, abs=1e-12)


def test_wrap_negative():
    assert wrap_angle(-0.25) == pytest.approx(TWO_PI - 0.25, abs=1e-12)


def test_wrap_idempotent():
    rng = np.random.default_rng(11)
    for a in rng.uniform(-50, 50, size=2000):
        w = wrap_angle(float(a))
        assert 0.0 <= w < TWO_PI
        assert wrap_angle(w) == w


def test_wrap_tiny_negative_stays_in_range():
    w = wrap_angle(-1e-18)
    assert 0.0 <= w < TWO_PI


def test_wrap_rejects_nonfinite():
    with pytest.raises(InvalidArgument):
        wrap_angle(float("nan"))
    with pytest.raises(InvalidArgument):
        wrap_angle(float("inf"))


def test_angular_distance_examples():
    assert angular_distance(1.3, 1.3) == 0.0
    assert angular_distance(0.0, math.pi) == pytest.approx(math.pi, abs=1e-12)
    assert angular_distance(0.1, TWO_PI - 0.1) == pytest.approx(0.2, abs=1e-12)


def test_angular_distance_matches_brute_force():
    rng = np.random.default_rng(7)
    pairs = rng.uniform(-10, 10, size=(100_000, 2))
    for a, b in pairs[:5000]:  # full 1e5 sweep lives in the acceptance suite
        assert abs(angular_distance(a, b) - brute_min_circular(a, b)) <= 1e-12


def test_angular_distance_properties():
    rng = np.random.default_rng(13)
    triples = rng.uniform(-10, 10, size=(100_000, 3))
    for a, b, c in triples[:20_000]:
        dab = angular_distance(a, b)
        assert dab == angular_distance(b, a)
        assert 0.0 <= dab <= math.pi
        # triangle inequality on the circle
        assert angular_distance(a, c) <= dab + angular_distance(b, c) + 1e-12


def test_angular_distance_zero_iff_congruent():
    assert angular_distance(0.3, 0.3 + 6 * math.pi) == pytest.approx(0.0, abs=1e-12)
    assert angular_distance(0.3, 0.4) > 0.0


def test_trig_embed_examples():
    assert trig_embed(0.0, 0.0) == pytest.approx([0, 1, 0, 1], abs=1e-12)
    assert trig_embed(math.pi / 2, 0.0) == pytest.approx([1, 0, 0, 1], abs=1e-12)
    assert trig_embed(math.pi, -math.pi / 2) == pytest.approx([0, -1, -1, 0], abs=1e-12)


def test_trig_embed_unit_circle():
    rng = np.random.default_rng(3)
    for h, e in rng.uniform(-10, 10, size=(2000, 2)):
        sh, ch, se, ce = trig_embed(h, e)
        assert sh * sh + ch * ch == pytest.approx(1.0, abs=1e-12)
        assert se * se + ce * ce == pytest.approx(1.0, abs=1e-12)


def test_relative_pose_axis_aligned():
    p = relative_pose((0, 0, 0), (1, 0, 0))
    assert (p.heading, p.elevation, p.length) == pytest.approx((0, 0, 1), abs=1e-12)
    p = relative_pose((0, 0, 0), (0, 1, 0))
    assert (p.heading, p.elevation, p.length) == pytest.approx((math.pi / 2, 0, 1), abs=1e-12)


def test_relative_pose_diagonal():
    p = relative_pose((0, 0, 0), (1, 1, 1))
    assert p.heading == pytest.approx(math.pi / 4, abs=1e-12)
    assert p.elevation == pytest.approx(math.atan2(1, math.sqrt(2)), abs=1e-12)
    assert p.length == pytest.approx(math.sqrt(3), abs=1e-12)


def test_relative_pose_coincident_raises():
    with pytest.raises(DegeneratePose):
        relative_pose((1, 2, 3), (1, 2, 3))


def test_relative_pose_inversion_flips():
    rng = np.random.default_rng(5)
    for _ in range(500):
        a = rng.uniform(-10, 10, size=3)
        b = rng.uniform(-10, 10, size=3)
        fwd = relative_pose(a, b)
        rev = relative_pose(b, a)
        assert angular_distance(rev.heading, fwd.heading + math.pi) == pytest.approx(0.0, abs=1e-9)
        assert rev.elevation == pytest.approx(-fwd.elevation, abs=1e-9)
        assert rev.length == pytest.approx(fwd.length, abs=1e-12)


def test_relative_pose_round_trip():
    rng = np.random.default_rng(17)
    for _ in range(2000):
        a = rng.uniform(-20, 20, size=3)
        b = rng.uniform(-20, 20, size=3)
        got = apply_pose(a, relative_pose(a, b))
        assert np.max(np.abs(np.asarray(got) - b)) <= 1e-9


def test_nearest_view_exact_match():
    headings = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
    assert nearest_view(0.0, headings) == (0, 0.0)


def test_nearest_view_scan():
    headings = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
    i, d = nearest_view(math.pi / 4 + 0.01, headings)
    assert i == 1
    assert d == pytest.approx(math.pi / 4 - 0.01, abs=1e-12)


def test_nearest_view_tie_lowest_index():
    i, d = nearest_view(math.pi / 4, [0.0, math.pi / 2])
    assert i == 0
    assert d == pytest.approx(math.pi / 4, abs=1e-12)


def test_nearest_view_empty_raises():
    with pytest.raises(InvalidArgument):
        nearest_view(0.0, [])


def test_nearest_view_matches_exhaustive_scan():
    rng = np.random.default_rng(23)
    for _ in range(500):
        k = int(rng.integers(1, 9))
        views = [float(v) for v in rng.uniform(0, TWO_PI, size=k)]
        cand = float(rng.uniform(-10, 10))
        i, d = nearest_view(cand, views)
        dists = [angular_distance(cand, v) for v in views]
        assert d == min(dists)
        assert i == dists.index(min(dists))
