"""Per-frame scoring, per-pipeline summaries and report emission.

Conventions used in every report:

* an asset with no estimate is *missed*; misses count against percent
  in-spec but are excluded from the error medians;
* the median of an even-length list is its lower-middle element;
* distance error is planar (x, y); angle error is the yaw difference.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import EmptyInput, IdMismatch
from .geom import angular_difference_deg

RESULTS_HEADER = [
    "frame",
    "object",
    "pipeline",
    "x_true",
    "y_true",
    "yaw_true",
    "x_est",
    "y_est",
    "yaw_est",
    "conf",
    "dist_err_m",
    "ang_err_deg",
    "time_ms",
    "in_spec",
    "missed",
]

CONVENTIONS = (
    "Misses count as out-of-spec and are excluded from error medians; "
    "even-length medians take the lower-middle value; angle error is yaw only."
)


@dataclass(frozen=True)
class SpecThresholds:
    max_distance: float = 1.0
    max_angle: float = 0.5

    def __post_init__(self):
        if not (self.max_distance > 0 and self.max_angle > 0):
            raise ValueError("spec thresholds must be positive")


@dataclass
class EvalRecord:
    frame: int
    object: str
    pipeline: str
    x_true: float
    y_true: float
    yaw_true: float
    x_est: float | None = None
    y_est: float | None = None
    yaw_est: float | None = None
    conf: float | None = None
    dist_err_m: float | None = None
    ang_err_deg: float | None = None
    time_ms: float | None = None
    in_spec: bool = False
    missed: bool = True
    occlusion: str = "none"

    def row(self) -> list:
        d = asdict(self)
        return [_fmt(d[k]) for k in RESULTS_HEADER]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def in_spec(distance: float, angle: float, spec: SpecThresholds = SpecThresholds()) -> bool:
    return distance <= spec.max_distance and angle <= spec.max_angle


def score(truth: dict, estimate: dict | None, spec: SpecThresholds = SpecThresholds(), pipeline: str = "") -> EvalRecord:
    """Score one estimate (or a miss, when ``estimate`` is None or has no position)."""
    rec = EvalRecord(
        frame=int(truth["frame"]),
        object=str(truth["object"]),
        pipeline=pipeline,
        x_true=float(truth["x"]),
        y_true=float(truth["y"]),
        yaw_true=float(truth["yaw"]),
        occlusion=truth.get("occlusion", "none"),
    )
    if estimate is None or estimate.get("x") is None:
        return rec
    if int(estimate["frame"]) != rec.frame or str(estimate["object"]) != rec.object:
        raise IdMismatch(
            f"truth ({rec.frame}, {rec.object}) vs estimate ({estimate['frame']}, {estimate['object']})"
        )
    rec.x_est = float(estimate["x"])
    rec.y_est = float(estimate["y"])
    rec.yaw_est = float(estimate["yaw"])
    rec.conf = None if estimate.get("conf") is None else float(estimate["conf"])
    rec.time_ms = None if estimate.get("time_ms") is None else float(estimate["time_ms"])
    rec.dist_err_m = math.hypot(rec.x_est - rec.x_true, rec.y_est - rec.y_true)
    rec.ang_err_deg = angular_difference_deg(rec.yaw_est, rec.yaw_true)
    rec.missed = False
    rec.in_spec = in_spec(rec.dist_err_m, rec.ang_err_deg, spec)
    return rec


def score_all(truth: list, estimates: list, spec: SpecThresholds = SpecThresholds(), pipeline: str | None = None) -> list[EvalRecord]:
    """Join estimates to truth on (frame, object); unmatched truth rows are misses."""
    by_key = {}
    for e in estimates:
        by_key[(int(e["frame"]), str(e["object"]))] = e
    if pipeline is None:
        pipeline = next((e.get("pipeline") for e in estimates if e.get("pipeline")), "pipeline")
    return [score(t, by_key.get((int(t["frame"]), str(t["object"]))), spec, pipeline) for t in truth]


def lower_median(values):
    values = sorted(values)
    if not values:
        return None
    return values[(len(values) - 1) // 2]


@dataclass
class Summary:
    pipeline: str
    objects: list
    pct_in_spec: dict
    median_time_ms: float | None
    median_distance: dict
    median_angle: dict
    misses: dict
    counts: dict
    spec: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Summary":
        return cls(**d)


def summarize(records, spec: SpecThresholds | None = None) -> dict[str, Summary]:
    """Per-pipeline percent in-spec, medians and miss counts, keyed by pipeline name."""
    records = list(records)
    if not records:
        raise EmptyInput("no records to summarize")
    out = {}
    for name in sorted({r.pipeline for r in records}):
        rs = [r for r in records if r.pipeline == name]
        objects = sorted({r.object for r in rs})
        pct, med_d, med_a, misses, counts = {}, {}, {}, {}, {}
        for obj in objects:
            ro = [r for r in rs if r.object == obj]
            scored = [r for r in ro if not r.missed]
            counts[obj] = len(ro)
            misses[obj] = len(ro) - len(scored)
            pct[obj] = 100.0 * sum(r.in_spec for r in ro) / len(ro)
            med_d[obj] = lower_median([r.dist_err_m for r in scored])
            med_a[obj] = lower_median([r.ang_err_deg for r in scored])
        times = [r.time_ms for r in rs if not r.missed and r.time_ms is not None]
        out[name] = Summary(
            pipeline=name,
            objects=objects,
            pct_in_spec=pct,
            median_time_ms=lower_median(times),
            median_distance=med_d,
            median_angle=med_a,
            misses=misses,
            counts=counts,
            spec=asdict(spec) if spec else {},
        )
    return out


def write_results_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in records:
            w.writerow(r.row())


def table_columns(n_objects: int) -> list[str]:
    cols = ["Name"]
    cols += [f"% In Spec Plane {i + 1}" for i in range(n_objects)]
    cols.append("Median time")
    for i in range(n_objects):
        cols += [f"Median Distance Error {i + 1}", f"Median Angle Error {i + 1}"]
    return cols


def emit_table(summaries) -> tuple[str, str]:
    """Comparison table as (aligned text, CSV), one row per pipeline.

    Object columns are numbered by sorted object id; the text footer maps
    numbers to ids and states the counting conventions.
    """
    summaries = list(summaries.values()) if isinstance(summaries, dict) else list(summaries)
    objects = sorted({o for s in summaries for o in s.objects})
    cols = table_columns(len(objects))

    def fmt(v, unit, digits):
        return "n/a" if v is None else f"{v:.{digits}f}{unit}"

    text_rows, csv_rows = [], []
    for s in summaries:
        pct = [s.pct_in_spec.get(o) for o in objects]
        errs = [(s.median_distance.get(o), s.median_angle.get(o)) for o in objects]
        text_rows.append(
            [s.pipeline]
            + [fmt(p, "%", 0) for p in pct]
            + [fmt(s.median_time_ms, "ms", 0)]
            + [x for d, a in errs for x in (fmt(d, "m", 1), fmt(a, "°", 1))]
        )
        csv_rows.append(
            [s.pipeline]
            + [_fmt(p) for p in pct]
            + [_fmt(s.median_time_ms)]
            + [_fmt(x) for d, a in errs for x in (d, a)]
        )

    widths = [max(len(c), *(len(r[i]) for r in text_rows)) if text_rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    for r in text_rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    lines.append("")
    lines.append("Objects: " + ", ".join(f"Plane {i + 1} = {o}" for i, o in enumerate(objects)))
    specs = {tuple(sorted(s.spec.items())) for s in summaries if s.spec}
    if len(specs) == 1:
        spec = dict(next(iter(specs)))
        lines.append(f"In spec: distance <= {spec['max_distance']:g} m and angle <= {spec['max_angle']:g} deg")
    misses = "; ".join(
        f"{s.pipeline}: " + ", ".join(f"{s.misses[o]}/{s.counts[o]}" for o in s.objects) for s in summaries
    )
    lines.append(f"Missed (per object): {misses}")
    lines.append(CONVENTIONS)
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(csv_rows)
    return text, buf.getvalue()


def _svg(fig) -> str:
    import matplotlib

    buf = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "decktrack", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue()


def occlusion_windows(frames, states) -> list[tuple[int, int, str]]:
    """Contiguous runs of partial/full occlusion as (first, last, kind)."""
    out = []
    cur = None
    for f, s in zip(frames, states):
        kind = s if s in ("partial", "full") else None
        if cur and kind == cur[2] and f == cur[1] + 1:
            cur = (cur[0], f, kind)
            continue
        if cur:
            out.append(cur)
        cur = (f, f, kind) if kind else None
    if cur:
        out.append(cur)
    return out


def emit_error_curves(records) -> str:
    """SVG of distance and angle error per object against frame.

    Occlusion windows are shaded (light: partial, dark: full) and carry SVG
    ids ``occlusion-<object>-<attr>-<k>``; misses are drawn as ticks on the x axis.
    """
    from matplotlib.figure import Figure

    records = sorted(records, key=lambda r: (r.object, r.frame))
    objects = sorted({r.object for r in records})
    fig = Figure(figsize=(9, 2.6 * max(1, len(objects))))
    axes = fig.subplots(len(objects), 2, squeeze=False)
    for row, obj in zip(axes, objects):
        ro = [r for r in records if r.object == obj]
        frames = [r.frame for r in ro]
        for ax, attr, label in ((row[0], "dist_err_m", "distance error [m]"), (row[1], "ang_err_deg", "angle error [deg]")):
            for k, (a, b, kind) in enumerate(occlusion_windows(frames, [r.occlusion for r in ro])):
                ax.axvspan(
                    a - 0.5,
                    b + 0.5,
                    color="0.55" if kind == "full" else "0.85",
                    zorder=0,
                    gid=f"occlusion-{obj}-{attr}-{k}",
                )
            xs = [r.frame for r in ro if not r.missed]
            ys = [getattr(r, attr) for r in ro if not r.missed]
            ax.plot(xs, ys, ".-", lw=0.8, ms=2)
            missed = [r.frame for r in ro if r.missed]
            if missed:
                ax.plot(missed, [0.0] * len(missed), "x", color="tab:red", ms=4, gid=f"missed-{obj}-{attr}")
            ax.set_title(f"{obj}: {label}", fontsize=9)
            ax.set_xlabel("frame", fontsize=8)
            ax.tick_params(labelsize=7)
    fig.tight_layout()
    return _svg(fig)


def _footprint(x, y, yaw_deg, length, width):
    c, s = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    corners = np.array([[length / 2, width / 2], [-length / 2, width / 2], [-length / 2, -width / 2], [length / 2, -width / 2]])
    return corners @ np.array([[c, s], [-s, c]]) + [x, y]


def emit_deck_plot(frame: int, truth, estimates, deck=None, footprint=(17.1, 13.5)) -> str:
    """Top-down SVG of the deck at one frame with true and estimated footprints."""
    from matplotlib.figure import Figure
    from matplotlib.patches import Polygon, Rectangle

    from .scene import DeckSpec

    deck = deck or DeckSpec()
    x0, x1, y0, y1 = deck.bounds
    fig = Figure(figsize=(11, 3.4))
    ax = fig.subplots()
    ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, facecolor="0.9", edgecolor="0.3", gid="deck"))
    for t in truth:
        if int(t["frame"]) != frame:
            continue
        poly = _footprint(t["x"], t["y"], t["yaw"], *footprint)
        ax.add_patch(Polygon(poly, closed=True, fill=False, edgecolor="tab:green", lw=1.2, gid=f"truth-{t['object']}"))
        ax.annotate(t["object"], (t["x"], t["y"]), fontsize=7, ha="center")
    for e in estimates:
        if int(e["frame"]) != frame or e.get("x") is None:
            continue
        poly = _footprint(e["x"], e["y"], e["yaw"], *footprint)
        ax.add_patch(
            Polygon(poly, closed=True, fill=False, edgecolor="tab:red", lw=1.0, ls="--", gid=f"estimate-{e['object']}")
        )
    ax.set_xlim(x0 - 5, x1 + 5)
    ax.set_ylim(y0 - 5, y1 + 5)
    ax.set_aspect("equal")
    ax.set_title(f"frame {frame}: truth (solid) vs estimate (dashed)", fontsize=9)
    ax.tick_params(labelsize=7)
    fig.tight_layout()
    return _svg(fig)
