"""Keypoint-based pose recovery: PnP refinement followed by SVD alignment."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .calib import solve_dlt_arrays
from .exceptions import (
    DegenerateConfiguration,
    DegenerateGeometry,
    IntersectionBehindCamera,
    NoConvergence,
    NoEstimate,
    RayParallelToDeck,
    TooFewPoints,
)
from .geom import MIN_DEPTH, CameraModel, Pose, Rotation, as_vector, backproject, exp_so3, wrap_deg
from .locate import DeckPlane, intersect_deck

GRID_YAWS_DEG = np.arange(24) * 15.0
EXACT_FIT_RMS = 1e-9


@dataclass(frozen=True, eq=False)
class SkeletonModel:
    """Named body-frame keypoints of one asset class, centered on their centroid."""

    class_name: str
    names: tuple[str, ...]
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        names = tuple(self.names)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) != len(names):
            raise ValueError("points must be (n, 3) with one name per point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("skeleton coordinates must be finite")
        if len(set(names)) != len(names):
            raise ValueError("keypoint names must be unique")
        pts = pts - pts.mean(axis=0)
        sv = np.linalg.svd(pts, compute_uv=False)
        if len(sv) < 2 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateGeometry("skeleton keypoints are collinear")
        pts.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "keypoints": [{"name": n, "xyz": [float(v) for v in p]} for n, p in zip(self.names, self.points)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonModel":
        kps = d["keypoints"]
        return cls(d["class"], [k["name"] for k in kps], [k["xyz"] for k in kps])


BUILTIN_PREFIX = "builtin:"


def load_skeleton(source="builtin:fa18") -> SkeletonModel:
    """Load a skeleton JSON file, or a packaged one via ``builtin:<name>``."""
    source = str(source)
    if source.startswith(BUILTIN_PREFIX):
        name = source[len(BUILTIN_PREFIX):]
        text = resources.files("decktrack").joinpath("data").joinpath(f"{name}_skeleton.json").read_text()
    else:
        text = Path(source).read_text()
    return SkeletonModel.from_dict(json.loads(text))


@dataclass(frozen=True)
class KeypointObservation:
    name: str
    pixel: np.ndarray
    confidence: float = 1.0
    visible: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pixel", as_vector(self.pixel, 2, "pixel"))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class PnPResult:
    pose: Pose
    rms: float
    initial_rms: float
    iterations: int
    converged: bool
    seed: str


class Alignment(NamedTuple):
    scale: float
    rotation: Rotation
    translation: np.ndarray
    rms: float


@dataclass
class PoseConfig:
    """Knobs for :func:`estimate_asset_pose`.

    ``rho`` is the reprojection RMS (pixels) at which confidence falls by 1/e.
    """

    with_scale: bool = False
    weighted: bool = False
    rho: float = 1.0
    deck_z0: float = 0.0
    max_iter: int = 100
    n_starts: int = 3
    accept_rms: float = 5.0
    max_deck_offset: float | None = None


@dataclass
class AssetPoseEstimate:
    x: float
    y: float
    yaw: float
    pose: Pose
    confidence: float
    keypoints_world: list = field(default_factory=list)
    scale: float = 1.0
    reprojection_rms: float = 0.0
    alignment_rms: float = 0.0
    n_keypoints: int = 0


def match_observations(model: SkeletonModel, obs: Sequence[KeypointObservation]):
    """Indices into ``model``, pixels and confidences of usable observations."""
    idx, uv, conf, seen = [], [], [], set()
    for o in obs:
        if not o.visible or o.name not in model or o.name in seen:
            continue
        seen.add(o.name)
        idx.append(model.index(o.name))
        uv.append(o.pixel)
        conf.append(o.confidence)
    return np.array(idx, dtype=int), np.array(uv, dtype=float).reshape(-1, 2), np.array(conf, dtype=float)


def _project_body(camera: CameraModel, R: np.ndarray, t: np.ndarray, pts: np.ndarray):
    A = camera.R @ R
    b = camera.R @ t + camera.translation
    pc = pts @ A.T + b
    return pc, A


def _residual(camera, R, t, pts, uv):
    pc, _ = _project_body(camera, R, t, pts)
    z = pc[:, 2]
    if np.any(z <= MIN_DEPTH):
        return None
    proj = np.column_stack([camera.fx * pc[:, 0] / z + camera.cx, camera.fy * pc[:, 1] / z + camera.cy])
    return (proj - uv).reshape(-1)


def _cross(p, q):
    return np.stack(
        [
            p[:, 1] * q[:, 2] - p[:, 2] * q[:, 1],
            p[:, 2] * q[:, 0] - p[:, 0] * q[:, 2],
            p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0],
        ],
        axis=1,
    )


def _jacobian(camera, R, t, pts):
    pc, A = _project_body(camera, R, t, pts)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    fz, gz = camera.fx / z, camera.fy / z
    # du/dpc = (fx/z, 0, -fx x/z^2), dv/dpc = (0, fy/z, -fy y/z^2)
    a_u = fz[:, None] * camera.R[0] - (fz * x / z)[:, None] * camera.R[2]
    a_v = gz[:, None] * camera.R[1] - (gz * y / z)[:, None] * camera.R[2]
    J = np.empty((2 * len(pts), 6))
    # a^T (-Rc R [p]x) = p x (R^T a)
    J[0::2, :3] = _cross(pts, a_u @ R)
    J[1::2, :3] = _cross(pts, a_v @ R)
    J[0::2, 3:] = a_u
    J[1::2, 3:] = a_v
    return J


def _levenberg_marquardt(camera, R, t, pts, uv, max_iter=100, step_tol=1e-10, cost_rtol=1e-12):
    """Damped Gauss-Newton on (rotation increment, translation).

    The rotation update is right-multiplied, ``R <- R exp([w]x)``. Stops on a
    step shorter than ``step_tol`` or an accepted step that lowers the cost by
    less than ``cost_rtol`` relative.
    """
    r = _residual(camera, R, t, pts, uv)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = _jacobian(camera, R, t, pts)
        g = J.T @ r
        H = J.T @ J
        diag = np.maximum(np.diag(H), 1e-12)
        while True:
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.linalg.norm(delta) < step_tol:
                converged = True
                break
            if delta is not None:
                R_new = R @ exp_so3(delta[:3])
                t_new = t + delta[3:]
                r_new = _residual(camera, R_new, t_new, pts, uv)
                if r_new is not None:
                    cost_new = float(r_new @ r_new)
                    if cost_new < cost:
                        converged = cost - cost_new <= cost_rtol * cost
                        R, t, r, cost = R_new, t_new, r_new, cost_new
                        lam = max(lam / 3.0, 1e-15)
                        break
            lam *= 4.0
            if lam > 1e16:
                # no descent direction left at machine precision
                converged = True
                break
        if converged:
            break
    # re-orthonormalize to scrub accumulated round-off
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return R, t, cost, it, converged


def _seed_from_dlt(camera, pts, uv):
    P = solve_dlt_arrays(pts, uv)
    A = np.linalg.solve(camera.K, P)
    M = A[:, :3]
    u, s, vt = np.linalg.svd(M)
    R_co = u @ vt
    if np.linalg.det(R_co) < 0:
        raise DegenerateConfiguration("DLT seed is a reflection")
    t_co = A[:, 3] / s.mean()
    R = camera.R.T @ R_co
    t = camera.R.T @ (t_co - camera.translation)
    return R, t


def _deck_grid_seeds(camera, pts, uv, deck):
    """Yaw sweep on the deck, scored in one vectorised pass.

    The object sits where the ray through the observation centroid meets the
    deck. When that ray misses the deck (observations above the horizon) it
    sits on the same ray at the depth implied by its apparent size.

    Returns ``(cost, yaw, R, t)`` tuples; cost is inf when any point is behind.
    """
    try:
        center = intersect_deck(camera, uv.mean(axis=0), deck)
    except (RayParallelToDeck, IntersectionBehindCamera):
        center = _size_depth_anchor(camera, pts, uv)
    yaws = np.radians(GRID_YAWS_DEG)
    c, sn = np.cos(yaws), np.sin(yaws)
    Rs = np.zeros((len(yaws), 3, 3))
    Rs[:, 0, 0], Rs[:, 0, 1], Rs[:, 1, 0], Rs[:, 1, 1], Rs[:, 2, 2] = c, -sn, sn, c, 1.0
    world = np.einsum("kij,mj->kmi", Rs, pts) + center
    pc = world @ camera.R.T + camera.translation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = camera.fx * pc[..., 0] / z + camera.cx - uv[:, 0]
        dv = camera.fy * pc[..., 1] / z + camera.cy - uv[:, 1]
        costs = np.sum(du**2 + dv**2, axis=1)
    costs[np.any(z <= MIN_DEPTH, axis=1)] = np.inf
    return [(float(costs[k]), GRID_YAWS_DEG[k], Rs[k], center) for k in range(len(yaws))]


def _size_depth_anchor(camera, pts, uv):
    """Point on the centroid ray at range ``f * model spread / pixel spread``."""
    model_spread = np.sqrt(np.mean(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    pixel_spread = np.sqrt(np.mean(np.sum((uv - uv.mean(axis=0)) ** 2, axis=1)))
    if pixel_spread <= 0:
        raise DegenerateGeometry("observations coincide in the image")
    ray = backproject(camera, uv.mean(axis=0))
    return ray.at(math.sqrt(camera.fx * camera.fy) * model_spread / pixel_spread)


def _same_pose(a, b, tol=1e-6):
    R1, t1 = a
    R2, t2 = b
    return np.linalg.norm(t1 - t2) < tol and np.linalg.norm(R1 - R2) < tol


def solve_pnp(
    model: SkeletonModel,
    obs: Sequence[KeypointObservation],
    camera: CameraModel,
    deck: DeckPlane = DeckPlane(),
    max_iter: int = 100,
    n_starts: int = 3,
    accept_rms: float = 5.0,
) -> PnPResult:
    """Object pose minimizing the squared pixel reprojection error.

    With six or more matches the first seed is a DLT solve on the matched
    subset. When that refinement ends above ``accept_rms`` pixels (or there
    is no DLT seed) a 24-step yaw sweep places the object where the ray
    through the observation centroid meets the deck; the best sweep seeds
    by initial residual (ties to the smaller yaw) are refined until
    ``n_starts`` solves have run, one is accepted, or a start reconverges to
    a pose already found. The lowest final residual wins.
    """
    idx, uv, _ = match_observations(model, obs)
    if len(idx) < 4:
        raise TooFewPoints(f"PnP needs at least 4 matched keypoints, got {len(idx)}")
    pts = model.points[idx]
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("matched model points are collinear")

    m = len(idx)
    best = None
    tried = []

    def refine(init_cost, label, R0, t0):
        nonlocal best
        R, t, cost, iters, converged = _levenberg_marquardt(camera, R0, t0, pts, uv, max_iter=max_iter)
        same = any(_same_pose((R, t), p) for p in tried)
        tried.append((R, t))
        if best is None or cost < best[0]:
            best = (cost, init_cost, label, R, t, iters, converged)
        return same

    def accepted():
        return math.sqrt(best[0] / m) <= max(accept_rms, EXACT_FIT_RMS)

    dlt_done = False
    if len(idx) >= 6:
        try:
            R, t = _seed_from_dlt(camera, pts, uv)
            r = _residual(camera, R, t, pts, uv)
        except (DegenerateConfiguration, np.linalg.LinAlgError, ValueError):
            r = None
        if r is not None:
            refine(float(r @ r), "dlt", R, t)
            dlt_done = True
            if accepted():
                return _pnp_result(best, m)

    scored = []
    try:
        for cost, yaw, R, t in _deck_grid_seeds(camera, pts, uv, deck):
            if np.isfinite(cost):
                scored.append((cost, yaw, f"deck-grid:{yaw:g}", R, t))
    except DegenerateGeometry:
        pass
    if best is None and not scored:
        raise DegenerateGeometry("no initialization places the object in front of the camera")
    # lowest residual first; exact ties resolved by smaller yaw
    scored.sort(key=lambda s: (s[0], s[1]))
    for init_cost, _, label, R0, t0 in scored[: n_starts - int(dlt_done)]:
        if refine(init_cost, label, R0, t0) or accepted():
            break
    return _pnp_result(best, m)


def _pnp_result(best, m) -> PnPResult:
    cost, init_cost, label, R, t, iters, converged = best
    if not converged and cost >= init_cost and math.sqrt(cost / m) > EXACT_FIT_RMS:
        raise NoConvergence(f"residual not reduced after {iters} iterations")
    return PnPResult(
        pose=Pose(Rotation(R), t),
        rms=math.sqrt(cost / m),
        initial_rms=math.sqrt(init_cost / m),
        iterations=iters,
        converged=converged,
        seed=label,
    )


def keypoints_to_world(model: SkeletonModel, pose: Pose) -> list[tuple[str, np.ndarray]]:
    world = pose.apply(model.points)
    return [(n, p) for n, p in zip(model.names, world)]


def umeyama_align(source, target, with_scale: bool = False, weights=None) -> Alignment:
    """Least-squares similarity (or rigid) transform taking ``source`` onto ``target``.

    Minimizes ``sum_i w_i ||s R p_i + t - q_i||^2``. The SVD sign correction
    keeps ``det(R) = +1`` even when the best orthogonal fit is a reflection.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (n, 3)")
    n = len(src)
    if n < 3:
        raise TooFewPoints(f"alignment needs at least 3 points, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()

    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    sv_src = np.linalg.svd(xs * np.sqrt(w)[:, None], compute_uv=False)
    if sv_src[1] <= 1e-9 * sv_src[0]:
        raise DegenerateGeometry("source points are collinear")
    cov = (xd * w[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateGeometry("cross-covariance is rank deficient")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    var_s = float(np.sum(w * np.sum(xs**2, axis=1)))
    scale = float(np.sum(D * S) / var_s) if with_scale else 1.0
    t = mu_d - scale * (R @ mu_s)
    resid = dst - (scale * src @ R.T + t)
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return Alignment(scale, Rotation(R), t, rms)


def estimate_asset_pose(
    model: SkeletonModel,
    obs: Sequence[KeypointObservation],
    camera: CameraModel,
    config: PoseConfig | None = None,
) -> AssetPoseEstimate:
    """Keypoints -> PnP -> world keypoints -> SVD alignment -> deck pose.

    Raises :class:`NoEstimate` when fewer than four keypoints match.
    """
    config = config or PoseConfig()
    idx, _, conf = match_observations(model, obs)
    if len(idx) < 4:
        raise NoEstimate(f"{len(idx)} matched keypoints, need 4")
    deck = DeckPlane(config.deck_z0)
    pnp = solve_pnp(
        model,
        obs,
        camera,
        deck=deck,
        max_iter=config.max_iter,
        n_starts=config.n_starts,
        accept_rms=config.accept_rms,
    )

    body = model.points[idx]
    world = pnp.pose.apply(body)
    weights = conf if config.weighted and conf.sum() > 0 else None
    align = umeyama_align(body, world, with_scale=config.with_scale, weights=weights)
    pose = Pose(align.rotation, align.translation)
    if config.max_deck_offset is not None and abs(pose.translation[2] - config.deck_z0) > config.max_deck_offset:
        raise NoEstimate(f"estimated height {pose.translation[2]:.2f} m is off the deck")

    confidence = float(np.mean(conf) * math.exp(-pnp.rms / config.rho))
    return AssetPoseEstimate(
        x=float(pose.translation[0]),
        y=float(pose.translation[1]),
        yaw=wrap_deg(pose.yaw_deg),
        pose=pose,
        confidence=confidence,
        keypoints_world=keypoints_to_world(model, pose),
        scale=align.scale,
        reprojection_rms=pnp.rms,
        alignment_rms=align.rms,
        n_keypoints=len(idx),
    )
