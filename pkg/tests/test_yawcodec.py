import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from decktrack.exceptions import DimensionMismatch, InvalidBinConfig
from decktrack.yawcodec import (
    YawBinCodec,
    YawPrediction,
    bin_selection_loss,
    decode,
    encode,
    make_bins,
    offset_loss,
    oracle_prediction,
    total_loss,
)

from oracles import angdiff, bin_members, central_gradient, relative_error

ROUNDTRIP_CONFIGS = [(4, 90.0), (8, 60.0), (12, 30.1), (36, 12.0)]
GRID = np.round(np.arange(0.0, 360.0, 0.1), 10)


def membership_prediction(theta, bins):
    t = encode(theta, bins)
    return YawPrediction(t.membership.astype(float), np.nan_to_num(t.offsets))


@pytest.fixture
def bins():
    return make_bins(12, 30.0)


# --------------------------------------------------------------------- bins


def test_default_centers(bins):
    np.testing.assert_array_equal(bins.centers, np.arange(0, 360, 30))


@pytest.mark.parametrize("n, hw", [(12, 30.0), (4, 90.0)])
def test_every_yaw_in_exactly_two_bins(n, hw):
    b = make_bins(n, hw)
    counts = [b.membership(th).sum() for th in GRID]
    assert set(counts) == {2}


@pytest.mark.parametrize("n, hw", [(12, 15.0), (12, 10.0), (1, 270.0), (4, 180.0), (2.5, 90.0)])
def test_invalid_configs(n, hw):
    with pytest.raises(InvalidBinConfig):
        make_bins(n, hw)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 72), st.floats(0.01, 1.0), st.floats(0, 360, exclude_max=True))
def test_coverage(n, frac, theta):
    lo = 180.0 / n
    hw = lo + frac * (180.0 - lo)
    if not lo < hw < 180.0:
        return
    b = make_bins(n, hw)
    members = encode(theta, b).members
    assert len(members) >= 1
    # the next center is up to 360/n away, so double coverage needs that width
    if hw >= 360.0 / n:
        assert len(members) >= 2
    assert [i for i, _ in bin_members(theta, n, hw)] == sorted(members.tolist())


def test_narrow_overlap_leaves_single_member_near_centers():
    b = make_bins(12, 20.0)
    assert encode(0.0, b).members.tolist() == [0]
    assert encode(15.0, b).members.tolist() == [0, 1]


# ------------------------------------------------------------------- encode


def test_encode_zero(bins):
    t = encode(0.0, bins)
    assert t.members.tolist() == [0, 1]
    assert t.offsets[0] == 0.0
    assert t.offsets[1] == -30.0
    assert np.all(np.isnan(t.offsets[2:]))


@pytest.mark.parametrize("theta", [15.0, 375.0, -345.0])
def test_encode_fifteen(bins, theta):
    t = encode(theta, bins)
    assert t.members.tolist() == [0, 1]
    np.testing.assert_allclose(t.offsets[[0, 1]], [15.0, -15.0], atol=1e-12)


def test_encode_matches_oracle(bins, rng):
    for theta in rng.uniform(-720, 720, 500):
        t = encode(theta, bins)
        expected = bin_members(theta % 360.0, bins.n, bins.half_width)
        assert t.members.tolist() == [i for i, _ in expected]
        np.testing.assert_allclose(t.offsets[t.members], [d for _, d in expected], atol=1e-9)
        assert np.all(np.abs(t.offsets[t.members]) <= bins.half_width)


def test_encode_rejects_nonfinite(bins):
    with pytest.raises(ValueError):
        encode(math.inf, bins)


# ------------------------------------------------------------------- decode


def test_decode_one_hot(bins):
    scores = np.zeros(12)
    scores[3] = 1.0
    offsets = np.zeros(12)
    offsets[3] = 7.0
    assert decode(YawPrediction(scores, offsets), bins) == pytest.approx(97.0)


def test_decode_wraps_large_offset(bins):
    offsets = np.zeros(12)
    offsets[0] = -200.0
    yaw = decode(YawPrediction(np.eye(12)[0], offsets), bins)
    assert yaw == pytest.approx(160.0)
    assert 0.0 <= yaw < 360.0


def test_decode_tie_picks_lowest_index(bins):
    offsets = np.arange(12.0)
    assert decode(YawPrediction(np.ones(12), offsets), bins) == 0.0


def test_decode_dimension_mismatch(bins):
    with pytest.raises(DimensionMismatch):
        decode(YawPrediction(np.zeros(4), np.zeros(4)), bins)
    with pytest.raises(DimensionMismatch):
        YawPrediction(np.zeros(4), np.zeros(5))
    with pytest.raises(ValueError):
        YawPrediction(np.array([np.nan, 0.0]), np.zeros(2))


@pytest.mark.parametrize("n, hw", ROUNDTRIP_CONFIGS)
def test_roundtrip_grid(n, hw):
    b = make_bins(n, hw)
    worst = max(angdiff(decode(membership_prediction(th, b), b), th) for th in GRID)
    assert worst < 1e-9


@pytest.mark.parametrize("n, hw", ROUNDTRIP_CONFIGS)
def test_oracle_prediction_roundtrip(n, hw, rng):
    b = make_bins(n, hw)
    for th in rng.uniform(0, 360, 300):
        assert angdiff(decode(oracle_prediction(th, b), b), th) < 1e-9


@given(st.lists(st.floats(-50, 50), min_size=12, max_size=12), st.floats(-1e3, 1e3))
def test_decode_shift_invariant(scores, shift):
    b = make_bins(12, 30.0)
    offsets = np.linspace(-20, 20, 12)
    shifted = np.asarray(scores) + shift
    # only a shift that preserves the ordering exactly is meaningful in floating point
    if np.argmax(shifted) != np.argmax(scores):
        return
    assert decode(YawPrediction(shifted, offsets), b) == decode(YawPrediction(scores, offsets), b)


# ------------------------------------------------------------------- losses


def test_uniform_scores_give_log_n(bins):
    loss, grad = bin_selection_loss(np.zeros(12), encode(15.0, bins))
    assert loss == pytest.approx(math.log(12))
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)


def test_selection_loss_entropy_floor(bins):
    target = encode(15.0, bins)
    scores = np.where(target.membership, 40.0, 0.0)
    loss, _ = bin_selection_loss(scores, target)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=50)
@given(st.lists(st.floats(-20, 20), min_size=12, max_size=12), st.floats(0, 360))
def test_selection_loss_bounded_below(scores, theta):
    b = make_bins(12, 30.0)
    loss, _ = bin_selection_loss(scores, encode(theta, b))
    assert loss >= math.log(2) - 1e-12


def test_selection_loss_dimension_mismatch(bins):
    with pytest.raises(DimensionMismatch):
        bin_selection_loss(np.zeros(11), encode(0.0, bins))


def test_offset_loss_zero_at_target(bins):
    t = encode(47.0, bins)
    loss, grad = offset_loss(np.nan_to_num(t.offsets) + 99.0 * ~t.membership, 47.0, bins)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_offset_loss_single_member():
    # two bins just past the overlap threshold leave yaw 0 in bin 0 alone
    single = make_bins(2, 91.0)
    t = encode(0.0, single)
    assert t.members.tolist() == [0]
    loss, grad = offset_loss(np.array([3.0, 0.0]), 0.0, single)
    assert loss == pytest.approx(9.0)
    np.testing.assert_array_equal(grad, [6.0, 0.0])


def test_offset_loss_dimension_mismatch(bins):
    with pytest.raises(DimensionMismatch):
        offset_loss(np.zeros(3), 0.0, bins)


@pytest.mark.parametrize("soft", [False, True])
def test_selection_gradient_finite_differences(soft):
    rng = np.random.default_rng(101 + soft)
    for _ in range(100):
        n = int(rng.integers(3, 40))
        b = make_bins(n, rng.uniform(180.0 / n + 1e-3, min(179.9, 540.0 / n)))
        target = encode(rng.uniform(0, 360), b)
        s = rng.normal(0, 3, n)
        _, g = bin_selection_loss(s, target, b, soft)
        fd = central_gradient(lambda x: bin_selection_loss(x, target, b, soft)[0], s)
        assert relative_error(g, fd) < 1e-5


def test_offset_gradient_finite_differences():
    rng = np.random.default_rng(202)
    for _ in range(100):
        n = int(rng.integers(3, 40))
        b = make_bins(n, rng.uniform(180.0 / n + 1e-3, min(179.9, 540.0 / n)))
        theta = rng.uniform(0, 360)
        o = rng.normal(0, 30, n)
        _, g = offset_loss(o, theta, b)
        fd = central_gradient(lambda x: offset_loss(x, theta, b)[0], o)
        assert relative_error(g, fd) < 1e-5


def test_total_loss_weights(bins, rng):
    pred = YawPrediction(rng.normal(size=12), rng.normal(0, 20, 12))
    theta = 123.4
    l_bin, g_bin = bin_selection_loss(pred.scores, encode(theta, bins))
    l_off, g_off = offset_loss(pred.offsets, theta, bins)
    loss, g = total_loss(pred, theta, bins, 1.0, 0.0)
    assert loss == l_bin
    np.testing.assert_array_equal(g["scores"], g_bin)
    np.testing.assert_array_equal(g["offsets"], 0.0)
    loss, g = total_loss(pred, theta, bins, 0.0, 1.0)
    assert loss == l_off
    np.testing.assert_array_equal(g["offsets"], g_off)
    with pytest.raises(ValueError):
        total_loss(pred, theta, bins, -1.0, 1.0)


def test_total_loss_gradient_finite_differences(bins):
    rng = np.random.default_rng(303)
    for _ in range(100):
        theta = rng.uniform(0, 360)
        x = np.concatenate([rng.normal(0, 3, 12), rng.normal(0, 30, 12)])

        def f(v):
            return total_loss(YawPrediction(v[:12], v[12:]), theta, bins, 0.5, 2.0)[0]

        _, g = total_loss(YawPrediction(x[:12], x[12:]), theta, bins, 0.5, 2.0)
        assert relative_error(np.concatenate([g["scores"], g["offsets"]]), central_gradient(f, x)) < 1e-5


# ------------------------------------------------------------------ codec API


def test_codec_transformer(rng):
    codec = YawBinCodec(n_bins=8, half_width=60.0).fit()
    assert codec.get_params() == {"n_bins": 8, "half_width": 60.0}
    theta = rng.uniform(0, 360, 50)
    rows = codec.transform(theta)
    assert rows.shape == (50, 16)
    back = codec.inverse_transform(rows)
    assert max(angdiff(a, b) for a, b in zip(back, theta)) < 1e-9
    assert not hasattr(clone(codec), "bins_")
    with pytest.raises(DimensionMismatch):
        codec.inverse_transform(np.zeros((2, 10)))
