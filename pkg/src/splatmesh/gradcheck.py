"""Finite-difference verification of the rasteriser's analytic gradients.

The probe loss is ``L = sum(rgb * G) + sum(alpha * GA)`` with fixed random
weights, so every output pixel and channel feeds the check. Each sampled
parameter is perturbed by ``+-h`` and ``+-2h``; when the two central
differences disagree the sample straddles a non-differentiable event
(band edge, window saturation, transmittance cut-off, colour clamp) and is
excluded rather than scored.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rasterizer import RenderConfig, project_triangles, render, render_backward
from .scene import CameraPose, Intrinsics
from .triangles import ScheduleState, TriangleSet

# (attribute, components probed); the template is planar so the third
# scale axis never reaches the image
PARAMETERS = (("center", (0, 1, 2)), ("scale_logits", (0, 1)), ("quat", (0, 1, 2, 3)), ("sh0", (0, 1, 2)),
              ("density_logit", None), ("blur_raw", None))
COLOR_PARAMS = ("sh0",)


@dataclass
class Sample:
    param: str
    index: int
    component: int
    analytic: float
    numeric: float
    rel: float
    excluded: bool


@dataclass
class GradcheckReport:
    samples: list
    rel_tol: float
    color_tol: float
    min_pass: float
    thresholds: dict = field(default_factory=dict)

    def _scored(self, color=None):
        return [s for s in self.samples if not s.excluded
                and (color is None or (s.param in COLOR_PARAMS) == color)]

    @property
    def excluded(self) -> int:
        return sum(s.excluded for s in self.samples)

    @property
    def pass_fraction(self) -> float:
        scored = self._scored()
        return sum(s.rel < self.rel_tol for s in scored) / len(scored) if scored else 0.0

    @property
    def max_rel(self) -> float:
        return max((s.rel for s in self._scored()), default=float("inf"))

    @property
    def p95_rel(self) -> float:
        scored = self._scored()
        return float(np.percentile([s.rel for s in scored], 95)) if scored else float("inf")

    @property
    def color_max_rel(self) -> float:
        scored = self._scored(color=True)
        return max((s.rel for s in scored), default=float("inf"))

    @property
    def passed(self) -> bool:
        return self.pass_fraction >= self.min_pass and self.color_max_rel < self.color_tol

    def to_text(self) -> str:
        lines = ["param index component analytic numeric rel excluded"]
        for s in self.samples:
            lines.append(f"{s.param} {s.index} {s.component} {s.analytic:.9e} {s.numeric:.9e} {s.rel:.3e} "
                         f"{int(s.excluded)}")
        lines += ["", f"samples: {len(self.samples)}", f"excluded: {self.excluded}",
                  f"pass_fraction: {self.pass_fraction:.4f} (need >= {self.min_pass}, rel < {self.rel_tol:g})",
                  f"max_rel: {self.max_rel:.3e}", f"p95_rel: {self.p95_rel:.3e}",
                  f"color_max_rel: {self.color_max_rel:.3e} (need < {self.color_tol:g})",
                  f"result: {'PASS' if self.passed else 'FAIL'}"]
        return "\n".join(lines) + "\n"


def finite_difference_check(tris: TriangleSet, pose: CameraPose, intr: Intrinsics, sched: ScheduleState,
                            cfg: RenderConfig = RenderConfig(), per_param: int = 50, seed: int = 0,
                            h: float = 1e-5, h_color: float = 1e-3, rel_tol: float = 1e-3,
                            color_tol: float = 1e-8, min_pass: float = 0.95, kink_tol: float = 0.1,
                            floor: float = 1e-7) -> GradcheckReport:
    """Compare analytic and central-difference gradients on sampled parameters.

    Parameters
    ----------
    per_param
        Samples drawn for each attribute row in ``PARAMETERS``. Primitives
        are drawn among those that reach the image.
    h, h_color
        Step sizes; colour is piecewise linear so a larger step is exact.
    kink_tol
        Relative disagreement between the ``h`` and ``2h`` estimates above
        which a sample is excluded.
    floor
        Absolute floor of the relative-error denominator.

    Returns
    -------
    GradcheckReport
    """
    rng = np.random.default_rng(seed)
    H, W = intr.height, intr.width
    G = rng.normal(size=(H, W, 3))
    GA = rng.normal(size=(H, W))
    out, ctx = render(tris, pose, intr, sched, cfg)
    grads = render_backward(ctx, G, GA, with_quat=True)
    visible = np.unique(project_triangles(tris, pose, intr, sched, cfg).ids)

    def loss(t):
        o, _ = render(t, pose, intr, sched, cfg, record=False)
        return float(np.sum(o.rgb * G) + np.sum(o.alpha * GA))

    def central(name, key, step):
        tp, tm = tris.copy(), tris.copy()
        getattr(tp, name)[key] += step
        getattr(tm, name)[key] -= step
        return (loss(tp) - loss(tm)) / (2 * step)

    samples = []
    for name, comps in PARAMETERS:
        step = h_color if name in COLOR_PARAMS else h
        prims = rng.choice(visible, size=min(per_param, len(visible)), replace=False)
        for i in prims:
            j = None if comps is None else int(rng.choice(comps))
            key = (int(i),) if j is None else (int(i), j)
            a = float(getattr(grads, name)[key])
            n1 = central(name, key, step)
            n2 = central(name, key, 2 * step)
            excluded = abs(n1 - n2) > kink_tol * max(abs(n1), abs(n2), floor)
            rel = abs(a - n1) / max(abs(a), abs(n1), floor)
            samples.append(Sample(name, int(i), -1 if j is None else j, a, n1, rel, bool(excluded)))
    return GradcheckReport(samples, rel_tol, color_tol, min_pass,
                           {"h": h, "h_color": h_color, "kink_tol": kink_tol, "floor": floor})
