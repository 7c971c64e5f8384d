import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiva.metrics import bin_index, calibration_from_proba, dice, dice_per_label, ece, reliability_svg


def test_dice_fixtures():
    t = np.zeros((4, 4), int)
    t[:2] = 1
    assert dice(t, t, 1) == 1.0
    p = np.zeros_like(t)
    p[2:] = 1
    assert dice(p, t, 1) == 0.0
    half = np.zeros_like(t)
    half[0] = 1
    assert dice(half, t, 1) == pytest.approx(2 / 3, abs=1e-15)
    assert dice(np.zeros_like(t), np.zeros_like(t), 1) is None
    with pytest.raises(ValueError):
        dice(t, t[:2], 1)


def test_dice_per_label_skips_absent():
    t = np.array([[0, 1], [1, 0]])
    p = np.array([[2, 1], [0, 0]])
    assert dice_per_label(p, t, [1, 2]) == {1: pytest.approx(2 / 3)}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_symmetry_and_erosion(seed):
    rng = np.random.default_rng(seed)
    p = rng.integers(0, 2, (6, 6))
    t = rng.integers(0, 2, (6, 6))
    d = dice(p, t, 1)
    assert d == dice(t, p, 1)
    tp = np.argwhere((p == 1) & (t == 1))
    if len(tp) and d is not None:
        p2 = p.copy()
        p2[tuple(tp[0])] = 0
        d2 = dice(p2, t, 1)
        assert d2 is None or d2 <= d + 1e-15


def test_ece_fixtures():
    assert ece(np.ones(50), np.ones(50, bool)).ece == 0.0
    assert ece(np.ones(50), np.zeros(50, bool)).ece == 1.0
    with pytest.raises(ValueError):
        ece(np.array([]), np.array([], bool))
    with pytest.raises(ValueError):
        ece(np.array([1.2]), np.array([True]))


def test_bernoulli_calibrated_predictor():
    rng = np.random.default_rng(0)
    conf = rng.uniform(0, 1, 10**6)
    rep = ece(conf, rng.random(conf.size) < conf)
    assert rep.ece < 0.02


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=200))
def test_bin_partition(conf):
    idx = bin_index(np.array(conf))
    assert np.all((idx >= 0) & (idx < 10))
    rep = ece(np.array(conf), np.zeros(len(conf), bool))
    assert rep.bin_count.sum() == len(conf)
    assert 0 <= rep.ece <= 1


def test_right_inclusive_edges():
    assert bin_index(np.array([0.0, 0.1, 0.1000001, 1.0])).tolist() == [0, 0, 1, 9]


def test_label_ece_from_proba():
    proba = np.zeros((1, 3, 2, 2))
    proba[0, 1] = 1.0
    target = np.array([[[1, 1], [2, 2]]])
    rep = calibration_from_proba(proba, target)
    assert rep.ece == pytest.approx(0.5)
    assert rep.label_ece == {1: pytest.approx(0.5)}


def test_reliability_svg(tmp_path):
    rng = np.random.default_rng(1)
    conf = rng.uniform(0.5, 1, 400)
    rep = ece(conf, rng.random(400) < conf)
    a = reliability_svg(rep, tmp_path / "a.svg", "demo")
    b = reliability_svg(rep, tmp_path / "b.svg", "demo")
    text = a.read_text()
    assert text == b.read_text()
    assert text.count('class="bar"') == 10
    assert 'class="diagonal"' in text
    # bins below 0.5 are empty and drawn with zero height
    heights = [float(h) for h in re.findall(r'class="bar"[^>]*height="([0-9.]+)"', text)]
    assert heights[:5] == [0.0] * 5
    shown = float(re.search(r"ECE = ([0-9.]+)", text).group(1))
    assert shown == pytest.approx(rep.ece, abs=5e-5)
