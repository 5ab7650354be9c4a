"""The two geometric pipeline kinds, run over detection records.

``keypoint-pnp-svd``
    keypoints -> PnP -> world keypoints -> SVD alignment -> (x, y, yaw)
``bbox-dlt-yaw``
    bounding-box center -> deck intersection for (x, y); yaw-bin head decode for yaw

Fusion across cameras is out of scope: each (frame, object) is solved from
a single view, the one with the most usable keypoints (keypoint pipeline)
or the largest box (bbox pipeline), falling back to the next view when a
solve fails.
"""

from __future__ import annotations

import time
from collections import defaultdict

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator

from .exceptions import DeckTrackError
from .geom import CameraModel
from .locate import BoundingBox, DeckPlane, locate_bbox_center
from .pose import KeypointObservation, PoseConfig, SkeletonModel, estimate_asset_pose, load_skeleton
from .yawcodec import YawPrediction, decode, make_bins

KEYPOINT_PNP_SVD = "keypoint-pnp-svd"
BBOX_DLT_YAW = "bbox-dlt-yaw"
PIPELINE_KINDS = (KEYPOINT_PNP_SVD, BBOX_DLT_YAW)


def observations_from_record(record: dict) -> list[KeypointObservation]:
    return [
        KeypointObservation(k["name"], k["uv"], float(k.get("conf", 1.0)), bool(k.get("visible", True)))
        for k in record.get("keypoints", [])
    ]


def group_detections(detections) -> dict:
    """``{(frame, object): [records]}`` sorted by frame then object."""
    groups = defaultdict(list)
    for rec in detections:
        groups[(int(rec["frame"]), str(rec["object"]))].append(rec)
    return dict(sorted(groups.items()))


def _missed(frame, obj, cls, kind, reason):
    return {
        "frame": frame,
        "object": obj,
        "class": cls,
        "pipeline": kind,
        "camera": None,
        "x": None,
        "y": None,
        "yaw": None,
        "conf": None,
        "n_keypoints": 0,
        "status": "no-estimate",
        "reason": reason,
    }


class _DetectionPipeline(BaseEstimator):
    kind = ""

    def _check_cameras(self):
        if not self.cameras:
            raise ValueError("no cameras configured")
        for name, cam in self.cameras.items():
            if not isinstance(cam, CameraModel):
                raise TypeError(f"camera {name!r} is not a CameraModel")

    def predict(self, detections) -> list[dict]:
        """One estimate record per (frame, object) present in ``detections``."""
        if not hasattr(self, "cameras_"):
            self.fit()
        out = []
        for (frame, obj), recs in group_detections(detections).items():
            t0 = time.perf_counter()
            est = self.estimate_group(frame, obj, recs)
            if self.record_timing and est["status"] == "ok":
                est["time_ms"] = (time.perf_counter() - t0) * 1000.0
            out.append(est)
        return out


class KeypointPnPSVDPipeline(_DetectionPipeline):
    """Keypoints -> PnP -> SVD alignment, one view per asset.

    Parameters
    ----------
    skeleton : SkeletonModel or str
        Model or a skeleton source accepted by :func:`load_skeleton`.
    cameras : dict
        ``{camera name: CameraModel}``.
    with_scale, weighted, rho, deck_z0, max_iter, n_starts, accept_rms
        Forwarded to :class:`PoseConfig`.
    record_timing : bool
        Add ``time_ms`` to each estimate. Off by default because timings are
        the only non-reproducible output.
    """

    kind = KEYPOINT_PNP_SVD

    def __init__(
        self,
        skeleton="builtin:fa18",
        cameras=None,
        with_scale=False,
        weighted=False,
        rho=1.0,
        deck_z0=0.0,
        max_iter=100,
        n_starts=3,
        accept_rms=5.0,
        record_timing=False,
    ):
        self.skeleton = skeleton
        self.cameras = cameras
        self.with_scale = with_scale
        self.weighted = weighted
        self.rho = rho
        self.deck_z0 = deck_z0
        self.max_iter = max_iter
        self.n_starts = n_starts
        self.accept_rms = accept_rms
        self.record_timing = record_timing

    def fit(self, X=None, y=None):
        self._check_cameras()
        self.skeleton_ = self.skeleton if isinstance(self.skeleton, SkeletonModel) else load_skeleton(self.skeleton)
        self.cameras_ = dict(self.cameras)
        self.config_ = PoseConfig(
            with_scale=self.with_scale,
            weighted=self.weighted,
            rho=self.rho,
            deck_z0=self.deck_z0,
            max_iter=self.max_iter,
            n_starts=self.n_starts,
            accept_rms=self.accept_rms,
        )
        return self

    def estimate_group(self, frame: int, obj: str, records: list[dict]) -> dict:
        cls = records[0].get("class", self.skeleton_.class_name)
        names = list(self.cameras_)
        views = []
        for rec in records:
            if rec["camera"] not in self.cameras_:
                continue
            obs = [o for o in observations_from_record(rec) if o.visible and o.name in self.skeleton_]
            views.append((-len({o.name for o in obs}), names.index(rec["camera"]), rec["camera"], obs))
        views.sort(key=lambda v: (v[0], v[1]))
        reason = "object not seen by any configured camera"
        failed = False
        for neg_n, _, cam_name, obs in views:
            if -neg_n < 4:
                if not failed:
                    reason = f"{-neg_n} usable keypoints, need 4"
                break
            try:
                est = estimate_asset_pose(self.skeleton_, obs, self.cameras_[cam_name], self.config_)
            except (DeckTrackError, np.linalg.LinAlgError) as exc:
                reason = f"solver failed on {cam_name}: {exc}"
                failed = True
                continue
            return {
                "frame": frame,
                "object": obj,
                "class": cls,
                "pipeline": self.kind,
                "camera": cam_name,
                "x": est.x,
                "y": est.y,
                "yaw": est.yaw,
                "conf": est.confidence,
                "n_keypoints": est.n_keypoints,
                "status": "ok",
            }
        return _missed(frame, obj, cls, self.kind, reason)


class BBoxDeckYawPipeline(_DetectionPipeline):
    """Bounding-box center on the deck for position, yaw-bin head for heading."""

    kind = BBOX_DLT_YAW

    def __init__(self, cameras=None, deck_z0=0.0, n_bins=12, half_width=30.0, record_timing=False):
        self.cameras = cameras
        self.deck_z0 = deck_z0
        self.n_bins = n_bins
        self.half_width = half_width
        self.record_timing = record_timing

    def fit(self, X=None, y=None):
        self._check_cameras()
        self.cameras_ = dict(self.cameras)
        self.bins_ = make_bins(self.n_bins, self.half_width)
        self.deck_ = DeckPlane(float(self.deck_z0))
        return self

    def estimate_group(self, frame: int, obj: str, records: list[dict]) -> dict:
        cls = records[0].get("class", "")
        names = list(self.cameras_)
        views = []
        for rec in records:
            if rec["camera"] not in self.cameras_ or not rec.get("bbox") or not rec.get("yaw_pred"):
                continue
            u0, v0, u1, v1 = rec["bbox"]
            views.append((-(u1 - u0) * (v1 - v0), names.index(rec["camera"]), rec))
        views.sort(key=lambda v: (v[0], v[1]))
        reason = "no bounding box"
        for _, _, rec in views:
            cam = self.cameras_[rec["camera"]]
            try:
                x, y = locate_bbox_center(cam, BoundingBox(*rec["bbox"]), self.deck_)
                pred = YawPrediction(rec["yaw_pred"]["scores"], rec["yaw_pred"]["offsets"])
                yaw = decode(pred, self.bins_)
            except (DeckTrackError, ValueError) as exc:
                reason = f"{rec['camera']}: {exc}"
                continue
            return {
                "frame": frame,
                "object": obj,
                "class": cls,
                "pipeline": self.kind,
                "camera": rec["camera"],
                "x": x,
                "y": y,
                "yaw": yaw,
                "conf": float(np.max(softmax(pred.scores))),
                "n_keypoints": len(rec.get("keypoints", [])),
                "status": "ok",
            }
        return _missed(frame, obj, cls, self.kind, reason)


def make_pipeline(kind: str, cameras: dict, **params):
    if kind == KEYPOINT_PNP_SVD:
        return KeypointPnPSVDPipeline(cameras=cameras, **params)
    if kind == BBOX_DLT_YAW:
        return BBoxDeckYawPipeline(cameras=cameras, **params)
    raise ValueError(f"unknown pipeline kind {kind!r}; expected one of {PIPELINE_KINDS}")

