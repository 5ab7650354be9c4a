"""Overlapping yaw-bin head: target encoding, decoding and training losses.

All angles are in degrees. Bin ``i`` is centered at ``i * 360 / n`` and
contains the yaws whose wrapped offset ``d = wrap(theta - c_i)`` satisfies
``-half_width <= d < half_width``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionMismatch, InvalidBinConfig
from .geom import wrap_deg, wrap_deg_signed


@dataclass(frozen=True, eq=False)
class YawBins:
    n: int
    half_width: float

    @property
    def centers(self) -> np.ndarray:
        return np.arange(self.n) * (360.0 / self.n)

    def offsets(self, theta: float) -> np.ndarray:
        """Wrapped ``theta - c_i`` for every bin, in ``(-180, 180]``."""
        return wrap_deg_signed(float(theta) - self.centers)

    def membership(self, theta: float) -> np.ndarray:
        d = self.offsets(theta)
        return (d >= -self.half_width) & (d < self.half_width)


@dataclass(frozen=True, eq=False)
class YawTarget:
    membership: np.ndarray
    offsets: np.ndarray  # NaN outside member bins

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self.membership)


@dataclass(frozen=True, eq=False)
class YawPrediction:
    scores: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float).reshape(-1)
        offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
        if scores.shape != offsets.shape:
            raise DimensionMismatch("scores and offsets differ in length")
        if not (np.all(np.isfinite(scores)) and np.all(np.isfinite(offsets))):
            raise ValueError("prediction must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "offsets", offsets)


def make_bins(n: int = 12, half_width: float = 30.0) -> YawBins:
    if int(n) != n or n < 2:
        raise InvalidBinConfig(f"need at least 2 bins, got {n}")
    n = int(n)
    # wider than 360/n only adds members; at 180 a bin's edge meets the wrap seam
    if not (180.0 / n < half_width < 180.0):
        raise InvalidBinConfig(f"half_width must lie in ({180.0 / n:g}, 180) for {n} bins, got {half_width}")
    return YawBins(n, float(half_width))


def encode(theta: float, bins: YawBins) -> YawTarget:
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    theta = wrap_deg(theta)
    d = bins.offsets(theta)
    member = (d >= -bins.half_width) & (d < bins.half_width)
    return YawTarget(member, np.where(member, d, np.nan))


def decode(pred: YawPrediction, bins: YawBins) -> float:
    """Yaw of the highest-scoring bin (lowest index on ties), in ``[0, 360)``."""
    if len(pred.scores) != bins.n:
        raise DimensionMismatch(f"expected {bins.n} bins, got {len(pred.scores)}")
    i = int(np.argmax(pred.scores))
    return wrap_deg(bins.centers[i] + pred.offsets[i])


def target_distribution(target: YawTarget, bins: YawBins | None = None, soft: bool = False) -> np.ndarray:
    """Label distribution over bins: uniform over members, or triangular when ``soft``."""
    m = target.membership.astype(float)
    if soft:
        if bins is None:
            raise ValueError("soft labels need the bin configuration")
        m = np.where(target.membership, 1.0 - np.abs(np.nan_to_num(target.offsets)) / bins.half_width, 0.0)
    return m / m.sum()


def bin_selection_loss(scores, target: YawTarget, bins: YawBins | None = None, soft: bool = False):
    """Cross-entropy between ``softmax(scores)`` and the member-bin distribution.

    Returns ``(loss, d loss / d scores)``.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.shape != target.membership.shape:
        raise DimensionMismatch(f"{scores.size} scores for {target.membership.size} bins")
    q = target_distribution(target, bins, soft)
    loss = float(-np.sum(q * log_softmax(scores)))
    return loss, softmax(scores) - q


def offset_loss(offsets, theta: float, bins: YawBins):
    """Mean squared wrapped-offset error over member bins (degrees squared).

    Returns ``(loss, d loss / d offsets)``; the gradient is zero off-member.
    """
    offsets = np.asarray(offsets, dtype=float).reshape(-1)
    if offsets.size != bins.n:
        raise DimensionMismatch(f"{offsets.size} offsets for {bins.n} bins")
    target = encode(theta, bins)
    member = target.membership
    err = np.where(member, offsets - np.nan_to_num(target.offsets), 0.0)
    k = member.sum()
    return float(np.sum(err**2) / k), 2.0 * err / k


def total_loss(pred: YawPrediction, theta: float, bins: YawBins, w_bin: float = 1.0, w_off: float = 1.0, soft: bool = False):
    """Weighted sum of the selection and offset losses.

    Returns ``(loss, {"scores": grad, "offsets": grad})``.
    """
    if w_bin < 0 or w_off < 0:
        raise ValueError("loss weights must be non-negative")
    l_bin, g_bin = bin_selection_loss(pred.scores, encode(theta, bins), bins, soft)
    l_off, g_off = offset_loss(pred.offsets, theta, bins)
    return w_bin * l_bin + w_off * l_off, {"scores": w_bin * g_bin, "offsets": w_off * g_off}


def oracle_prediction(theta: float, bins: YawBins) -> YawPrediction:
    """Prediction a perfectly trained head would emit for ``theta``.

    Member bins score by closeness to their center; every bin carries its
    wrapped offset so any selected bin decodes back to ``theta``.
    """
    d = bins.offsets(wrap_deg(theta))
    member = (d >= -bins.half_width) & (d < bins.half_width)
    scores = np.where(member, 1.0 - np.abs(d) / bins.half_width, -1.0)
    return YawPrediction(scores, d)


class YawBinCodec(TransformerMixin, BaseEstimator):
    """scikit-learn transformer between yaw angles and bin-head targets.

    ``transform`` maps a column of yaws (degrees) to ``[membership | offsets]``
    rows of width ``2 * n_bins`` (offsets are 0 outside member bins);
    ``inverse_transform`` decodes ``[scores | offsets]`` rows back to yaws.
    """

    def __init__(self, n_bins=12, half_width=30.0):
        self.n_bins = n_bins
        self.half_width = half_width

    def fit(self, X=None, y=None):
        self.bins_ = make_bins(self.n_bins, self.half_width)
        return self

    def transform(self, X):
        check_is_fitted(self, "bins_")
        theta = np.asarray(X, dtype=float).reshape(-1)
        out = np.zeros((len(theta), 2 * self.bins_.n))
        for row, th in zip(out, theta):
            t = encode(th, self.bins_)
            row[: self.bins_.n] = t.membership
            row[self.bins_.n :] = np.nan_to_num(t.offsets)
        return out

    def inverse_transform(self, X):
        check_is_fitted(self, "bins_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = self.bins_.n
        if X.shape[1] != 2 * n:
            raise DimensionMismatch(f"expected {2 * n} columns, got {X.shape[1]}")
        return np.array([decode(YawPrediction(r[:n], r[n:]), self.bins_) for r in X])
