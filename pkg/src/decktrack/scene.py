"""Synthetic flight deck: panoramic rig, scripted trajectories, occlusion and
a noisy keypoint-detection oracle standing in for trained detectors.

Randomness is drawn from a per-frame generator seeded with ``(seed, frame)``
so any frame can be regenerated independently of the others.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import InvalidRig, OutOfRange
from .geom import CameraModel, Pose, as_vector, wrap_deg, wrap_deg_signed
from .locate import BoundingBox
from .pose import SkeletonModel, load_skeleton
from .yawcodec import make_bins, oracle_prediction


@dataclass
class RigConfig:
    """Co-located cameras sharing one optical center on the island."""

    position: tuple = (0.0, -45.0, 12.0)
    heading_deg: float = 90.0
    yaw_offsets_deg: tuple = (-80.0, -40.0, 0.0, 40.0, 80.0)
    pitch_deg: float = 10.0
    fx: float = 960.0 / math.tan(math.radians(20.0))
    fy: float = 960.0 / math.tan(math.radians(20.0))
    cx: float = 960.0
    cy: float = 540.0
    width: int = 1920
    height: int = 1080

    @classmethod
    def from_dict(cls, d: dict) -> "RigConfig":
        d = dict(d)
        if "position" in d:
            d["position"] = tuple(float(v) for v in d["position"])
        if "yaw_offsets_deg" in d:
            d["yaw_offsets_deg"] = tuple(float(v) for v in d["yaw_offsets_deg"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["position"] = [float(v) for v in self.position]
        d["yaw_offsets_deg"] = [float(v) for v in self.yaw_offsets_deg]
        return d


def camera_names(config: RigConfig) -> list[str]:
    return [f"cam{i}" for i in range(len(config.yaw_offsets_deg))]


def build_panoramic_rig(config: RigConfig) -> list[CameraModel]:
    """One pinhole per yaw offset, all sharing ``config.position``.

    Raises :class:`InvalidRig` when adjacent horizontal fields of view leave a gap.
    """
    if not config.yaw_offsets_deg:
        raise InvalidRig("rig has no cameras")
    cams = [
        CameraModel.looking(
            config.position,
            config.heading_deg + off,
            config.pitch_deg,
            config.fx,
            config.fy,
            config.cx,
            config.cy,
            config.width,
            config.height,
        )
        for off in config.yaw_offsets_deg
    ]
    hfov = cams[0].hfov_deg()
    offsets = sorted(config.yaw_offsets_deg)
    for a, b in zip(offsets, offsets[1:]):
        if b - a > hfov + 1e-9:
            raise InvalidRig(f"{b - a - hfov:.3g} deg gap between cameras at {a:g} and {b:g} deg")
    return cams


@dataclass
class Trajectory:
    object_id: str
    class_name: str
    keyframes: list  # (frame, x, y, yaw_deg)

    def __post_init__(self):
        self.keyframes = [(int(f), float(x), float(y), float(yaw)) for f, x, y, yaw in self.keyframes]
        if not self.keyframes:
            raise ValueError(f"trajectory {self.object_id} has no keyframes")
        frames = [k[0] for k in self.keyframes]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"trajectory {self.object_id}: keyframe indices must increase")

    @property
    def span(self) -> tuple[int, int]:
        return self.keyframes[0][0], self.keyframes[-1][0]


def pose_at_frame(traj: Trajectory, frame: int, z0: float = 0.0) -> Pose:
    """Piecewise-linear position, shortest-arc yaw, level on the deck."""
    first, last = traj.span
    if not first <= frame <= last:
        raise OutOfRange(f"frame {frame} outside {traj.object_id} span [{first}, {last}]")
    kf = traj.keyframes
    for (f0, x0, y0, h0), (f1, x1, y1, h1) in zip(kf, kf[1:]):
        if f0 <= frame <= f1:
            a = (frame - f0) / (f1 - f0)
            if a == 0.0:
                return Pose.on_deck(x0, y0, wrap_deg(h0), z0)
            if a == 1.0:
                return Pose.on_deck(x1, y1, wrap_deg(h1), z0)
            yaw = wrap_deg(h0 + a * wrap_deg_signed(h1 - h0))
            return Pose.on_deck(x0 + a * (x1 - x0), y0 + a * (y1 - y0), yaw, z0)
    f, x, y, h = kf[0]
    return Pose.on_deck(x, y, wrap_deg(h), z0)


@dataclass(frozen=True, eq=False)
class OccluderVolume:
    """Body-frame box (length, width, height) centered at ``center``, posed with its owner."""

    owner: str
    extents: np.ndarray
    pose: Pose = field(default_factory=Pose.identity)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        ext = as_vector(self.extents, 3, "extents")
        if np.any(ext <= 0):
            raise ValueError("occluder extents must be positive")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "center", as_vector(self.center, 3, "center"))

    @classmethod
    def around(cls, owner: str, skeleton: SkeletonModel, margin: float = 0.1, extents=None) -> "OccluderVolume":
        lo, hi = skeleton.points.min(axis=0), skeleton.points.max(axis=0)
        ext = hi - lo + 2 * margin if extents is None else extents
        return cls(owner, ext, Pose.identity(), (lo + hi) / 2.0)

    def posed(self, pose: Pose) -> "OccluderVolume":
        return OccluderVolume(self.owner, self.extents, pose, self.center)

    def blocks(self, start, ends) -> np.ndarray:
        """Which segments ``start -> ends[i]`` pass through the box interior."""
        R = self.pose.rotation.matrix
        origin = self.pose.apply(self.center)
        p0 = (np.asarray(start, dtype=float) - origin) @ R
        p1 = (np.atleast_2d(ends) - origin) @ R
        d = p1 - p0
        half = self.extents / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half - p0) / d
            tb = (half - p0) / d
        lo = np.where(d == 0, np.where(np.abs(p0) < half, -np.inf, np.inf), np.minimum(ta, tb))
        hi = np.where(d == 0, np.where(np.abs(p0) < half, np.inf, -np.inf), np.maximum(ta, tb))
        t_in = np.max(lo, axis=1)
        t_out = np.min(hi, axis=1)
        eps = 1e-9
        return (t_in < t_out) & (t_out > eps) & (t_in < 1.0 - eps)


def visible_mask(points_world, camera: CameraModel, occluders, self_id) -> np.ndarray:
    """Vectorised :func:`visible` over an (n, 3) array."""
    uv, z = camera.project_points(points_world)
    ok = (z > 0) & camera.in_image(uv)
    center = camera.center
    for occ in occluders:
        if occ.owner == self_id or not ok.any():
            continue
        ok &= ~occ.blocks(center, points_world)
    return ok


def visible(keypoint_world, camera: CameraModel, occluders, self_id) -> bool:
    """In the image with positive depth and not hidden behind another object's box."""
    p = as_vector(keypoint_world, 3, "keypoint")
    return bool(visible_mask(p[None, :], camera, occluders, self_id)[0])


@dataclass
class NoiseConfig:
    """Detector imperfections. ``confidence_scale`` sets the noise norm (in sigmas) at which confidence hits the floor."""

    pixel_sigma: float = 0.0
    dropout_prob: float = 0.0
    yaw_sigma_deg: float = 0.0
    confidence_floor: float = 0.05
    confidence_scale: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must be in [0, 1]")
        if self.pixel_sigma < 0 or self.yaw_sigma_deg < 0:
            raise ValueError("noise levels must be non-negative")


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame)])


def _clean(x: float) -> float:
    # -0.0 would print differently from 0.0
    return float(x) + 0.0


def render_detections(
    frame_poses: dict,
    skeletons: dict,
    cameras: dict,
    noise: NoiseConfig,
    occluders: dict | None = None,
    classes: dict | None = None,
    bins=None,
    stats: dict | None = None,
) -> list[dict]:
    """Detection records for every frame, object and camera that sees the object.

    Parameters
    ----------
    frame_poses : {frame: {object_id: Pose}}
    skeletons : {object_id: SkeletonModel}
    cameras : {camera_name: CameraModel}, iteration order is preserved
    noise : NoiseConfig
    occluders : {object_id: OccluderVolume} in body frame, or None to disable occlusion
    classes : {object_id: class label}, defaults to the skeleton class
    bins : YawBins for the yaw-head oracle, defaults to 12 bins of half-width 30
    stats : optional dict filled with ``{(frame, object_id): (n_in_view, n_visible)}``

    Returns
    -------
    list of dict
        Records in frame, object, camera order. Each holds the keypoints that
        survived occlusion and dropout, a bounding box around the visible
        keypoints and a yaw-head prediction for the box.
    """
    bins = bins or make_bins(12, 30.0)
    classes = classes or {}
    records = []
    sigma = noise.pixel_sigma
    for frame in sorted(frame_poses):
        rng = frame_rng(noise.seed, frame)
        poses = frame_poses[frame]
        posed = [occluders[o].posed(poses[o]) for o in sorted(poses) if occluders and o in occluders]
        for obj in sorted(poses):
            sk = skeletons[obj]
            pose = poses[obj]
            world = pose.apply(sk.points)
            best_view, best_vis = 0, 0
            for cam_name, cam in cameras.items():
                # draws happen for every keypoint so visibility never shifts the stream
                z = rng.standard_normal((len(sk), 2))
                keep = rng.random(len(sk)) >= noise.dropout_prob
                yaw_noise = rng.standard_normal()
                uv, depth = cam.project_points(world)
                in_view = (depth > 0) & cam.in_image(uv)
                if not in_view.any():
                    continue
                vis = visible_mask(world, cam, posed, obj) if posed else in_view
                best_view = max(best_view, int(in_view.sum()))
                best_vis = max(best_vis, int(vis.sum()))
                noisy = uv + sigma * z
                conf = np.clip(1.0 - np.linalg.norm(z, axis=1) / noise.confidence_scale, noise.confidence_floor, 1.0)
                if sigma == 0:
                    conf = np.ones(len(sk))
                kps = [
                    {
                        "name": sk.names[i],
                        "uv": [_clean(noisy[i, 0]), _clean(noisy[i, 1])],
                        "conf": _clean(conf[i]),
                        "visible": True,
                    }
                    for i in np.flatnonzero(vis & keep)
                ]
                rec = {
                    "frame": int(frame),
                    "camera": cam_name,
                    "object": obj,
                    "class": classes.get(obj, sk.class_name),
                    "keypoints": kps,
                    "bbox": None,
                    "yaw_pred": None,
                }
                if vis.any():
                    box = BoundingBox.around(noisy[vis])
                    rec["bbox"] = [_clean(box.u_min), _clean(box.v_min), _clean(box.u_max), _clean(box.v_max)]
                    pred = oracle_prediction(pose.yaw_deg + noise.yaw_sigma_deg * yaw_noise, bins)
                    rec["yaw_pred"] = {
                        "scores": [_clean(v) for v in pred.scores],
                        "offsets": [_clean(v) for v in pred.offsets],
                    }
                records.append(rec)
            if stats is not None:
                stats[(frame, obj)] = (best_view, best_vis)
    return records


@dataclass
class DeckSpec:
    z0: float = 0.0
    length: float = 330.0
    width: float = 78.0

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return -self.length / 2, self.length / 2, -self.width / 2, self.width / 2


@dataclass
class ObjectSpec:
    id: str
    class_name: str = "fa18"
    skeleton: str = "builtin:fa18"
    occluder: list | None = None  # (length, width, height); None fits the skeleton


@dataclass
class SceneConfig:
    seed: int = 0
    deck: DeckSpec = field(default_factory=DeckSpec)
    rig: RigConfig = field(default_factory=RigConfig)
    objects: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    yaw_bins: dict = field(default_factory=lambda: {"n": 12, "half_width": 30.0})
    occlusion: bool = True
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "SceneConfig":
        known = {"seed", "deck", "rig", "objects", "trajectories", "noise", "yaw_bins", "occlusion"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        objects = [
            ObjectSpec(
                id=o["id"],
                class_name=o.get("class", "fa18"),
                skeleton=o.get("skeleton", "builtin:fa18"),
                occluder=o.get("occluder"),
            )
            for o in d.get("objects", [])
        ]
        by_id = {o.id: o for o in objects}
        trajectories = []
        for t in d.get("trajectories", []):
            if t["object"] not in by_id:
                raise ValueError(f"trajectory for unknown object {t['object']!r}")
            trajectories.append(Trajectory(t["object"], by_id[t["object"]].class_name, t["keyframes"]))
        seed = int(d.get("seed", 0))
        noise = NoiseConfig(**{**d.get("noise", {}), "seed": seed})
        return cls(
            seed=seed,
            deck=DeckSpec(**d.get("deck", {})),
            rig=RigConfig.from_dict(d.get("rig", {})),
            objects=objects,
            trajectories=trajectories,
            noise=noise,
            yaw_bins={"n": 12, "half_width": 30.0, **d.get("yaw_bins", {})},
            occlusion=bool(d.get("occlusion", True)),
            base_dir=str(base_dir),
        )

    def to_dict(self) -> dict:
        noise = asdict(self.noise)
        noise.pop("seed")
        return {
            "seed": self.seed,
            "deck": asdict(self.deck),
            "rig": self.rig.to_dict(),
            "objects": [
                {"id": o.id, "class": o.class_name, "skeleton": self.resolve(o.skeleton), "occluder": o.occluder}
                for o in self.objects
            ],
            "trajectories": [{"object": t.object_id, "keyframes": [list(k) for k in t.keyframes]} for t in self.trajectories],
            "noise": noise,
            "yaw_bins": dict(self.yaw_bins),
            "occlusion": self.occlusion,
        }

    def resolve(self, source: str) -> str:
        if source.startswith("builtin:"):
            return source
        p = Path(source)
        return str(p if p.is_absolute() else (Path(self.base_dir) / p).resolve())

    def frames(self) -> list[int]:
        if not self.trajectories:
            return []
        lo = min(t.span[0] for t in self.trajectories)
        hi = max(t.span[1] for t in self.trajectories)
        return list(range(lo, hi + 1))


def load_scene(source) -> SceneConfig:
    """Scene from a JSON file or a packaged scene via ``builtin:<name>``."""
    source = str(source)
    if source.startswith("builtin:"):
        name = source[len("builtin:"):]
        text = resources.files("decktrack").joinpath("data").joinpath("scenes").joinpath(f"{name}.json").read_text()
        return SceneConfig.from_dict(json.loads(text))
    path = Path(source)
    return SceneConfig.from_dict(json.loads(path.read_text()), base_dir=path.parent)


@dataclass
class SimulationResult:
    detections: list
    truth: list
    cameras: dict
    skeletons: dict


def simulate(config: SceneConfig) -> SimulationResult:
    """Run the scene: ground-truth poses per frame and oracle detections."""
    names = camera_names(config.rig)
    cameras = dict(zip(names, build_panoramic_rig(config.rig)))
    skeletons = {o.id: load_skeleton(config.resolve(o.skeleton)) for o in config.objects}
    classes = {o.id: o.class_name for o in config.objects}
    occluders = None
    if config.occlusion:
        occluders = {o.id: OccluderVolume.around(o.id, skeletons[o.id], extents=o.occluder) for o in config.objects}
    bins = make_bins(config.yaw_bins["n"], config.yaw_bins["half_width"])

    frame_poses = {}
    for frame in config.frames():
        poses = {}
        for traj in config.trajectories:
            lo, hi = traj.span
            if lo <= frame <= hi:
                poses[traj.object_id] = pose_at_frame(traj, frame, config.deck.z0)
        if poses:
            frame_poses[frame] = poses

    stats: dict = {}
    detections = render_detections(frame_poses, skeletons, cameras, config.noise, occluders, classes, bins, stats)
    truth = []
    for frame in sorted(frame_poses):
        for obj in sorted(frame_poses[frame]):
            pose = frame_poses[frame][obj]
            n_view, n_vis = stats.get((frame, obj), (0, 0))
            if n_view == 0:
                occlusion = "out-of-view"
            elif n_vis == n_view:
                occlusion = "none"
            elif n_vis == 0:
                occlusion = "full"
            else:
                occlusion = "partial"
            truth.append(
                {
                    "frame": int(frame),
                    "object": obj,
                    "x": _clean(pose.translation[0]),
                    "y": _clean(pose.translation[1]),
                    "yaw": _clean(pose.yaw_deg),
                    "n_in_view": n_view,
                    "n_visible": n_vis,
                    "occlusion": occlusion,
                }
            )
    return SimulationResult(detections, truth, cameras, skeletons)


def sample_visible_pose(rng: np.random.Generator, camera: CameraModel, skeleton: SkeletonModel, deck: DeckSpec, min_visible: int = 17, max_tries: int = 10000) -> Pose:
    """Random deck pose whose keypoints are at least ``min_visible`` in frame."""
    x0, x1, y0, y1 = deck.bounds
    for _ in range(max_tries):
        pose = Pose.on_deck(rng.uniform(x0, x1), rng.uniform(y0, y1), rng.uniform(0.0, 360.0), deck.z0)
        uv, z = camera.project_points(pose.apply(skeleton.points))
        if np.sum((z > 0) & camera.in_image(uv)) >= min_visible:
            return pose
    raise RuntimeError("could not place an object in view; check the rig and deck bounds")
