"""Deck-plane localization of image pixels and bounding boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .exceptions import IntersectionBehindCamera, RayParallelToDeck
from .geom import CameraModel, backproject

PARALLEL_TOL = 1e-9


@dataclass(frozen=True)
class DeckPlane:
    z0: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.z0):
            raise ValueError("deck height must be finite")


@dataclass(frozen=True)
class BoundingBox:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.u_min, self.v_min, self.u_max, self.v_max)):
            raise ValueError("bounding box must be finite")
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"empty bounding box {self}")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.u_min + self.u_max) / 2.0, (self.v_min + self.v_max) / 2.0])

    @classmethod
    def around(cls, pixels, pad: float = 0.5) -> "BoundingBox":
        """Tight box around pixel coordinates, padded so single points are valid."""
        p = np.atleast_2d(pixels)
        lo, hi = p.min(axis=0), p.max(axis=0)
        return cls(float(lo[0] - pad), float(lo[1] - pad), float(hi[0] + pad), float(hi[1] + pad))


def intersect_deck(camera: CameraModel, pixel, deck: DeckPlane = DeckPlane()) -> np.ndarray:
    """Intersect the ray through ``pixel`` with the plane ``Z = deck.z0``.

    Raises
    ------
    RayParallelToDeck
        The viewing ray has no vertical component.
    IntersectionBehindCamera
        The plane is hit at a non-positive ray parameter (e.g. above the horizon).
    """
    ray = backproject(camera, pixel)
    dz = ray.direction[2]
    if abs(dz) < PARALLEL_TOL:
        raise RayParallelToDeck(f"ray through {tuple(pixel)} is parallel to the deck")
    s = (deck.z0 - ray.origin[2]) / dz
    if s <= 0:
        raise IntersectionBehindCamera(f"deck lies behind the camera along the ray through {tuple(pixel)}")
    point = ray.at(s)
    point[2] = deck.z0
    return point


def locate_bbox_center(camera: CameraModel, bbox: BoundingBox, deck: DeckPlane = DeckPlane()) -> tuple[float, float]:
    """Deck (x, y) under the assumption that the asset sits at the box center pixel."""
    p = intersect_deck(camera, bbox.center, deck)
    return float(p[0]), float(p[1])


class DeckLocator(BaseEstimator):
    """Batch bounding-box localizer with a scikit-learn style interface.

    ``predict`` takes an (n, 4) array of ``u_min, v_min, u_max, v_max`` rows and
    returns (n, 2) deck positions. With ``on_invalid="nan"`` rows without a
    valid deck intersection become NaN instead of raising.
    """

    def __init__(self, camera=None, z0=0.0, on_invalid="raise"):
        self.camera = camera
        self.z0 = z0
        self.on_invalid = on_invalid

    def fit(self, X=None, y=None):
        if not isinstance(self.camera, CameraModel):
            raise TypeError("camera must be a CameraModel")
        if self.on_invalid not in ("raise", "nan"):
            raise ValueError("on_invalid must be 'raise' or 'nan'")
        self.deck_ = DeckPlane(float(self.z0))
        return self

    def predict(self, X):
        if not hasattr(self, "deck_"):
            self.fit()
        X = check_array(X)
        if X.shape[1] != 4:
            raise ValueError("expected (n, 4) bounding boxes")
        out = np.full((len(X), 2), np.nan)
        for i, row in enumerate(X):
            try:
                out[i] = locate_bbox_center(self.camera, BoundingBox(*row), self.deck_)
            except (RayParallelToDeck, IntersectionBehindCamera):
                if self.on_invalid == "raise":
                    raise
        return out
