"""
Quantile sketches and the pooled mixture CDF.

Each client summarizes a feature's node values by B+1 breakpoints (its 0/B, 1/B, ..., B/B
quantiles). The server rebuilds a piecewise-linear CDF per client, mixes them with weights
n_k / n, and inverts the mixture at the interior levels b/B to get candidate thresholds.

Quantile rules
--------------
``inverted_cdf`` (default): q_b is the smallest order statistic whose empirical rank
reaches b/B. Every true rank between two consecutive breakpoints then stays inside one
1/B band, which bounds the reconstruction error of the pooled CDF by 1/B.
``linear``: interpolation at fractional position (b/B)(n-1) between order statistics.
It yields smoother breakpoints on small samples but carries no such bound.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

QUANTILE_RULES = ("inverted_cdf", "linear")
MAX_NUDGES = 64


@dataclass(frozen=True)
class QuantileSketch:
    breakpoints: Tuple[float, ...]
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("sketch of an empty sample")
        if any(b < a for a, b in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("sketch breakpoints must be non-decreasing")

    @property
    def levels(self) -> int:
        return len(self.breakpoints) - 1

    def as_array(self) -> np.ndarray:
        return np.asarray(self.breakpoints, dtype=np.float64)


@dataclass(frozen=True)
class PooledCdf:
    weights: Tuple[float, ...]
    sketches: Tuple[QuantileSketch, ...]

    @property
    def maximum(self) -> float:
        return max(s.breakpoints[-1] for s in self.sketches)

    @property
    def minimum(self) -> float:
        return min(s.breakpoints[0] for s in self.sketches)


# ─── Client side ─────────────────────────────────────────────────────────────

def build_sketch(values, B: int, rule: str = "inverted_cdf") -> QuantileSketch:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("cannot sketch an empty sample")
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot sketch non-finite values")
    if B < 1:
        raise ValueError("sketch size must be >= 1")
    if rule not in QUANTILE_RULES:
        raise ValueError(f"unknown quantile rule '{rule}'")

    ordered = np.sort(values, kind="stable")
    n = ordered.size
    if rule == "linear":
        q = np.quantile(ordered, np.arange(B + 1) / B, method="linear")
        q[0], q[-1] = ordered[0], ordered[-1]
    else:
        b = np.arange(B + 1, dtype=np.int64)
        idx = -((-n * b) // B) - 1          # ceil(n*b/B) - 1, zero-based
        idx[0] = 0
        q = ordered[idx]
    return QuantileSketch(tuple(float(v) for v in q), int(n))


# ─── Server side ─────────────────────────────────────────────────────────────

def eval_local_cdf(sketch: QuantileSketch, x, left_limit: bool = False):
    """Piecewise-linear rank of x; flat runs put their whole mass at the right edge"""
    q = sketch.as_array()
    B = q.size - 1
    x_arr = np.asarray(x, dtype=np.float64)
    if B == 0:
        out = (x_arr > q[0]) if left_limit else (x_arr >= q[0])
        out = out.astype(np.float64)
        return out if out.ndim else float(out)

    side = "left" if left_limit else "right"
    i = np.searchsorted(q, x_arr, side=side) - 1
    inner = (i >= 0) & (i < B)
    i_safe = np.clip(i, 0, B - 1)
    lo = q[i_safe]
    hi = q[i_safe + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(hi > lo, (x_arr - lo) / (hi - lo), 1.0)
    out = np.where(inner, (i_safe + np.clip(frac, 0.0, 1.0)) / B, np.where(i >= B, 1.0, 0.0))
    return out if out.ndim else float(out)


def pool_sketches(sketches: Sequence[QuantileSketch]) -> PooledCdf:
    if not sketches:
        raise ValueError("no sketches to pool")
    total = float(sum(s.count for s in sketches))
    return PooledCdf(tuple(s.count / total for s in sketches), tuple(sketches))


def eval_pooled_cdf(cdf: PooledCdf, x, left_limit: bool = False):
    total = 0.0
    for weight, sketch in zip(cdf.weights, cdf.sketches):
        total = total + weight * eval_local_cdf(sketch, x, left_limit=left_limit)
    return total


def invert_pooled_cdf(cdf: PooledCdf, p):
    """Leftmost x with F(x) >= p, for one level or an array of levels in (0, 1)"""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)):
        raise ValueError("inversion levels must lie strictly inside (0, 1)")

    knots = np.unique(np.concatenate([s.as_array() for s in cdf.sketches]))
    at_knot = np.minimum(np.asarray(eval_pooled_cdf(cdf, knots)), 1.0)
    below_knot = np.asarray(eval_pooled_cdf(cdf, knots, left_limit=True))

    flat_p = p_arr.reshape(-1)
    j = np.searchsorted(at_knot, flat_p, side="left")
    j = np.minimum(j, knots.size - 1)
    result = knots[j].copy()

    # between knots j-1 and j the mixture is linear, from at_knot[j-1] up to below_knot[j]
    solve = (j > 0) & (flat_p < below_knot[j])
    if np.any(solve):
        js = j[solve]
        f0 = at_knot[js - 1]
        f1 = below_knot[js]
        k0 = knots[js - 1]
        k1 = knots[js]
        x = k0 + (flat_p[solve] - f0) / (f1 - f0) * (k1 - k0)
        x = np.clip(x, k0, k1)
        for _ in range(MAX_NUDGES):
            short = np.asarray(eval_pooled_cdf(cdf, x)) < flat_p[solve]
            if not np.any(short):
                break
            x = np.where(short, np.minimum(np.nextafter(x, np.inf), k1), x)
        result[solve] = x
    return result.reshape(p_arr.shape) if p_arr.ndim else float(result[0])


def candidate_thresholds(cdf: PooledCdf, B: int, dedup: bool = True) -> np.ndarray:
    """Interior quantiles of the pooled CDF, sorted"""
    if B < 2:
        raise ValueError("candidate generation needs B >= 2")
    levels = np.arange(1, B) / B
    thresholds = np.sort(invert_pooled_cdf(cdf, levels))
    if not dedup:
        return thresholds
    thresholds = np.unique(thresholds)
    # x <= t sends everything left once t reaches the largest breakpoint
    return thresholds[thresholds < cdf.maximum]


# ─── Analysis helpers ────────────────────────────────────────────────────────

def empirical_cdf(values, x):
    ordered = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    out = np.searchsorted(ordered, np.asarray(x, dtype=np.float64), side="right") / ordered.size
    return out if np.ndim(out) else float(out)


def evaluation_grid(values, cdf: Optional[PooledCdf] = None, per_gap: int = 3) -> np.ndarray:
    """Data points, breakpoints and evenly spaced points inside every gap between them"""
    points = [np.asarray(values, dtype=np.float64).reshape(-1)]
    if cdf is not None:
        points.extend(s.as_array() for s in cdf.sketches)
    anchors = np.unique(np.concatenate(points))
    span = max(1.0, float(anchors[-1] - anchors[0]))
    steps = np.arange(1, per_gap + 1) / (per_gap + 1)
    inside = (anchors[:-1, None] + np.diff(anchors)[:, None] * steps[None, :]).reshape(-1)
    return np.concatenate([[anchors[0] - span], anchors, inside, [anchors[-1] + span]])


def rank_error(cdf: PooledCdf, pooled_values, grid=None) -> float:
    """Largest gap between the reconstructed and the empirical pooled CDF"""
    grid = evaluation_grid(pooled_values, cdf) if grid is None else np.asarray(grid, dtype=np.float64)
    gap = np.abs(np.asarray(eval_pooled_cdf(cdf, grid)) - empirical_cdf(pooled_values, grid))
    return float(gap.max())


def partition_disagreement(values, t_a: float, t_b: float) -> float:
    """Fraction of samples sent to different children by the two thresholds"""
    values = np.asarray(values, dtype=np.float64)
    return float(np.mean((values <= t_a) != (values <= t_b)))
