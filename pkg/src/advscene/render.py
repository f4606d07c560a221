"""Top-down SVG rendering of a scenario frame.

The view is a square world window centred on the ego.  Road boundaries are
drawn as polylines over a filled drivable region, every agent as one
``<polygon class="agent ...">`` box, and past positions as dotted
polylines.  Output contains no timestamps, so it is reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional
from xml.sax.saxutils import quoteattr

import numpy as np

from .costs import MapConstructionError, drivable_region
from .scenario import Scenario, agent_corners


class RenderError(ValueError):
    pass


DEFAULT_COLORS = {
    "ego": "#1f5fbf",
    "adversary": "#2a9d3a",
    "other": "#8c8c8c",
    "road": "#eeeeee",
    "boundary": "#333333",
    "background": "#ffffff",
}


@dataclass(frozen=True)
class RenderSpec:
    frames: tuple = (-1,)  # negative indices count from the end
    window: float = 60.0  # meters shown across the image
    size: int = 600  # pixels
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    history: bool = True
    dash: str = "1.5,1.5"

    def __post_init__(self):
        if not self.window > 0:
            raise RenderError(f"window must be positive, got {self.window}")
        if not self.size > 0:
            raise RenderError(f"size must be positive, got {self.size}")


def _fmt(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _points(xy) -> str:
    return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in xy)


def resolve_frame(scenario: Scenario, frame: int) -> int:
    T = scenario.horizon
    k = frame + T if frame < 0 else frame
    if not 0 <= k < T:
        raise RenderError(f"frame {frame} outside horizon of {T} steps")
    return k


def render_svg(scenario: Scenario, frame: int = -1, spec: RenderSpec = RenderSpec(),
               chosen: Optional[int] = None) -> str:
    """SVG document for one frame.  ``chosen`` marks the adversary drawn in
    the adversary color; everything else but the ego is drawn as 'other'."""
    k = resolve_frame(scenario, frame)
    traj = scenario.trajectories
    cx, cy = traj[0, k, 0], traj[0, k, 1]
    half = spec.window / 2.0
    scale = spec.size / spec.window
    col = spec.colors
    # world -> image: translate to the ego, flip y so +y points up
    tf = f"translate({_fmt(spec.size / 2)},{_fmt(spec.size / 2)}) scale({_fmt(scale)},{_fmt(-scale)}) " \
         f"translate({_fmt(-cx)},{_fmt(-cy)})"
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{spec.size}" height="{spec.size}" '
        f'viewBox="0 0 {spec.size} {spec.size}" data-frame="{k}">',
        f'<rect class="background" x="0" y="0" width="{spec.size}" height="{spec.size}" '
        f'fill="{col["background"]}"/>',
        f'<g transform="{tf}">',
    ]
    try:
        region = drivable_region(scenario.road_graph)
        polys = list(getattr(region, "geoms", [region]))
    except MapConstructionError:
        polys = []
    for poly in polys:
        d = "M " + _points(np.asarray(poly.exterior.coords)) + " Z"
        for hole in poly.interiors:
            d += " M " + _points(np.asarray(hole.coords)) + " Z"
        out.append(f'<path class="drivable" d="{d}" fill="{col["road"]}" fill-rule="evenodd" stroke="none"/>')
    for r in scenario.road_graph:
        if r.kind == "boundary":
            out.append(f'<polyline class="boundary" points="{_points(r.points)}" fill="none" '
                       f'stroke="{col["boundary"]}" stroke-width="{_fmt(2.0 / scale)}"/>')

    corners = agent_corners(traj[:, k: k + 1], scenario.lengths, scenario.widths)[:, 0]
    for i in range(len(scenario.agents)):
        role = "ego" if i == 0 else ("adversary" if i == chosen else "other")
        color = col[role]
        if spec.history and k > 0:
            out.append(f'<polyline class="history {role}" data-agent="{i}" points="{_points(traj[i, : k + 1, :2])}" '
                       f'fill="none" stroke={quoteattr(color)} stroke-width="{_fmt(1.5 / scale)}" '
                       f'stroke-dasharray="{spec.dash}"/>')
        out.append(f'<polygon class="agent {role}" data-agent="{i}" points="{_points(corners[i])}" '
                   f'fill={quoteattr(color)} fill-opacity="0.8" stroke="#000000" '
                   f'stroke-width="{_fmt(1.0 / scale)}"/>')
    out.append("</g>")
    out.append(f"<!-- window {_fmt(spec.window)} m centred on ego at ({_fmt(cx)}, {_fmt(cy)}); "
               f"visible x [{_fmt(cx - half)}, {_fmt(cx + half)}] -->")
    out.append("</svg>")
    return "\n".join(out) + "\n"


__all__ = ["DEFAULT_COLORS", "RenderError", "RenderSpec", "render_svg", "resolve_frame"]
