"""Where does the choice of ReLU'(0) change the gradient?

Membership of a weight vector in the 0-vs-1 disagreement set is decided
per mini-batch: run one rounded forward, then two reverse sweeps with
s = 0 and s = 1, and compare the gradients bitwise.  When a batch shows
no exactly-zero pre-activation the two sweeps are provably identical
(the reverse rules only differ at the kink), so the comparison is
skipped: that fast path is what makes full-dataset Monte Carlo scans
affordable at 64-bit precision, where zeros essentially never happen.

Relative volumes come from Kaiming-uniform weight draws with split seeds.
Hit fractions carry Hoeffding confidence margins sqrt(ln(2/alpha)/(2n)).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .engine import SubgradientPolicy, backprop
from .network import (
    NetworkSpec,
    WeightVector,
    forward,
    gradient_vector,
    init_kaiming_uniform,
    unflatten,
)
from .precision import round_array
from .streams import stream


def hoeffding_margin(alpha: float, n: float) -> float:
    """Half-width sqrt(ln(2/alpha) / (2n)) of a level-(1-alpha) interval
    for the mean of n bounded iid indicators."""
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    if n <= 0:
        raise ValueError("n must be positive")
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * n))


@dataclass
class BatchOutcome:
    batch_index: int
    hit: bool
    zero_count: int
    rel_l2_diff: float | None = None  # only on non-degenerate hits
    degenerate: bool = False          # hit with a zero-norm s=0 gradient


@dataclass
class MembershipResult:
    hit: bool
    batches: list
    n_batches: int
    hit_count: int
    degenerate_count: int

    @property
    def rel_diffs(self):
        return [b.rel_l2_diff for b in self.batches
                if b.hit and not b.degenerate]


_POLICY0 = SubgradientPolicy(0.0)
_POLICY1 = SubgradientPolicy(1.0)


def s01_membership(spec: NetworkSpec, theta: WeightVector, dataset,
                   batch_size: int, early_exit: bool = False,
                   keep_all_batches: bool = True) -> MembershipResult:
    """Compare the s=0 and s=1 gradients of per-batch summed losses.

    The dataset is walked in its stored order (fixed partition, last short
    batch kept).  ``early_exit`` stops at the first hitting batch, which
    is enough for the weight-level indicator but leaves the per-batch
    statistics incomplete.  Batch norm layers use batch statistics;
    dropout is inactive here (it is a training-time augmentation, not part
    of the loss being differentiated).
    """
    spec = _without_dropout(spec)
    batches = []
    hit_count = 0
    degenerate_count = 0
    n_batches = 0
    for xb, yb, idx in dataset.batches(batch_size):
        n_batches += 1
        trace, tape = forward(spec, theta, xb, yb, mode="train",
                              reduction="sum")
        outcome = BatchOutcome(batch_index=n_batches - 1, hit=False,
                               zero_count=trace.total_zero_count)
        if trace.total_zero_count > 0:
            # only a kink multiplication can make the sweeps differ
            g0 = gradient_vector(spec, tape, backprop(tape, _POLICY0).grads)
            g1 = gradient_vector(spec, tape, backprop(tape, _POLICY1).grads)
            if not np.array_equal(g0.values, g1.values):
                outcome.hit = True
                hit_count += 1
                d0 = g0.as_float64()
                norm0 = float(np.linalg.norm(d0))
                if norm0 == 0.0:
                    outcome.degenerate = True
                    degenerate_count += 1
                else:
                    diff = float(np.linalg.norm(d0 - g1.as_float64()))
                    outcome.rel_l2_diff = diff / norm0
        if keep_all_batches or outcome.hit:
            batches.append(outcome)
        if early_exit and outcome.hit:
            break
    # count remaining batches even when exiting early, so Q stays the
    # fixed-partition count
    total_q = -(-dataset.n_samples // batch_size)
    return MembershipResult(hit=hit_count > 0, batches=batches,
                            n_batches=total_q, hit_count=hit_count,
                            degenerate_count=degenerate_count)


@dataclass
class BifurcationReport:
    """Monte Carlo estimate of the disagreement set's relative volume."""

    m_draws: int
    q_batches: int
    weight_hit_fraction: float
    pair_hit_fraction: float | None
    rel_diff_quartiles: tuple | None
    weight_margin: float
    pair_margin: float
    degenerate_pairs: int
    precision: str
    layer_sizes: tuple
    batch_size: int
    seed: int
    alpha: float
    early_exit: bool
    axis_value: float | None = None

    def __post_init__(self):
        if not (0 <= self.weight_hit_fraction <= 1):
            raise ValueError("weight hit fraction outside [0, 1]")
        if self.pair_hit_fraction is not None:
            if not (0 <= self.pair_hit_fraction <= 1):
                raise ValueError("pair hit fraction outside [0, 1]")
            if (self.weight_hit_fraction == 0) != (self.pair_hit_fraction == 0):
                raise ValueError("weight fraction is zero iff pair fraction is zero")
        if self.rel_diff_quartiles is not None:
            q1, q2, q3 = self.rel_diff_quartiles
            if not (q1 <= q2 <= q3):
                raise ValueError("quartiles must be nondecreasing")

    def to_json(self) -> dict:
        return {
            "m_draws": self.m_draws,
            "q_batches": self.q_batches,
            "weight_hit_fraction": self.weight_hit_fraction,
            "pair_hit_fraction": self.pair_hit_fraction,
            "rel_diff_quartiles": (list(self.rel_diff_quartiles)
                                   if self.rel_diff_quartiles is not None else None),
            "weight_margin": self.weight_margin,
            "pair_margin": self.pair_margin,
            "degenerate_pairs": self.degenerate_pairs,
            "precision": self.precision,
            "layer_sizes": list(self.layer_sizes),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "alpha": self.alpha,
            "early_exit": self.early_exit,
            "axis_value": self.axis_value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BifurcationReport":
        d = dict(d)
        d["layer_sizes"] = tuple(d["layer_sizes"])
        if d["rel_diff_quartiles"] is not None:
            d["rel_diff_quartiles"] = tuple(d["rel_diff_quartiles"])
        return cls(**d)


def estimate_volume(spec: NetworkSpec, dataset, m_draws: int, batch_size: int,
                    seed: int = 0, alpha: float = 0.05,
                    early_exit: bool = False, workers: int = 1,
                    axis_value: float | None = None,
                    draw_weights=None) -> BifurcationReport:
    """Draw m weight vectors (split init seeds) and scan the dataset.

    Reports the fraction of draws with at least one hitting batch, the
    fraction of (draw, batch) pairs that hit, and quartiles (linear
    interpolation) of the relative L2 gradient difference over
    non-degenerate hits.  With ``early_exit`` only the weight-level
    fraction is meaningful; the pair statistics are reported as None.
    Draw-level results are assembled by draw index, so the outcome is
    independent of ``workers``.  ``draw_weights(draw_index)`` overrides
    the default Kaiming-uniform sampler (custom initialization studies,
    planted fixtures in tests).
    """
    if m_draws < 1:
        raise ValueError("need at least one draw")
    if draw_weights is None:
        def draw_weights(m):
            return init_kaiming_uniform(spec, _draw_seed(seed, m))

    def one_draw(m):
        return s01_membership(spec, draw_weights(m), dataset, batch_size,
                              early_exit=early_exit, keep_all_batches=False)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_draw, range(m_draws)))
    else:
        results = [one_draw(m) for m in range(m_draws)]

    q = results[0].n_batches
    weight_hits = sum(1 for r in results if r.hit)
    rel = [d for r in results for d in r.rel_diffs]
    degenerate = sum(r.degenerate_count for r in results)
    if early_exit:
        pair_fraction = None
        quartiles = None
    else:
        pair_hits = sum(r.hit_count for r in results)
        pair_fraction = pair_hits / (m_draws * q)
        quartiles = (tuple(np.percentile(rel, [25, 50, 75], method="linear"))
                     if rel else None)
    return BifurcationReport(
        m_draws=m_draws, q_batches=q,
        weight_hit_fraction=weight_hits / m_draws,
        pair_hit_fraction=pair_fraction,
        rel_diff_quartiles=quartiles,
        weight_margin=hoeffding_margin(alpha, m_draws),
        pair_margin=hoeffding_margin(alpha, m_draws * q),
        degenerate_pairs=degenerate,
        precision=spec.precision.value,
        layer_sizes=spec.layer_sizes,
        batch_size=batch_size,
        seed=seed, alpha=alpha, early_exit=early_exit,
        axis_value=axis_value,
    )


def _draw_seed(seed: int, m: int) -> int:
    # distinct, order-independent per-draw seeds: permuting draw indices
    # permutes the thetas without changing any of them
    return (seed << 20) + m


SWEEP_AXES = ("train_size", "width", "depth", "batch_size")


def sweep(axis: str, grid, spec: NetworkSpec, dataset, m_draws: int,
          batch_size: int, seed: int = 0, alpha: float = 0.05,
          early_exit: bool = False, workers: int = 1) -> list:
    """One volume report per grid value, same seeds at every point."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    reports = []
    for value in grid:
        value = int(value)
        point_spec, point_data, point_bs = spec, dataset, batch_size
        if axis == "train_size":
            if value > dataset.n_samples:
                raise ValueError(f"train_size {value} exceeds dataset size")
            point_data = dataset.subset(value)
        elif axis == "width":
            sizes = (spec.layer_sizes[0],) + (value,) * spec.n_hidden \
                + (spec.layer_sizes[-1],)
            point_spec = NetworkSpec(sizes, precision=spec.precision)
        elif axis == "depth":
            width = spec.layer_sizes[1]
            sizes = (spec.layer_sizes[0],) + (width,) * value \
                + (spec.layer_sizes[-1],)
            point_spec = NetworkSpec(sizes, precision=spec.precision)
        else:
            point_bs = value
        reports.append(estimate_volume(
            point_spec, point_data, m_draws, point_bs, seed=seed,
            alpha=alpha, early_exit=early_exit, workers=workers,
            axis_value=float(value)))
    return reports


@dataclass
class PlaneScan:
    """|pre-activation| of one tracked neuron over a random 2-plane."""

    radius: float
    resolution: int
    grid: np.ndarray       # (resolution, resolution) float64
    zero_mask: np.ndarray  # bitwise-zero cells
    target: tuple          # (layer, sample, neuron)
    precision: str
    u: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)

    def to_json(self) -> dict:
        return {
            "radius": self.radius,
            "resolution": self.resolution,
            "grid": [[float(x) for x in row] for row in self.grid],
            "zero_mask": [[bool(b) for b in row] for row in self.zero_mask],
            "target": list(self.target),
            "precision": self.precision,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PlaneScan":
        return cls(radius=d["radius"], resolution=d["resolution"],
                   grid=np.array(d["grid"], dtype=np.float64),
                   zero_mask=np.array(d["zero_mask"], dtype=bool),
                   target=tuple(d["target"]), precision=d["precision"])


class DegenerateDirectionsError(RuntimeError):
    pass


def _orthonormal_pair(p_dim: int, rng, tries: int = 10):
    for _ in range(tries):
        u = rng.standard_normal(p_dim)
        v = rng.standard_normal(p_dim)
        nu = np.linalg.norm(u)
        if nu == 0:
            continue
        u = u / nu
        v = v - (u @ v) * u
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            return u, v / nv
    raise DegenerateDirectionsError(
        f"failed to draw an orthonormal pair in {tries} tries")


def plane_scan(spec: NetworkSpec, theta: WeightVector, batch_inputs,
               radius: float, resolution: int,
               target: tuple | None = None, seed: int = 0,
               labels=None) -> PlaneScan:
    """Scan |pre-activation| of a target neuron over theta + a*u + b*v.

    Directions are iid standard normal, orthonormalized in binary64; the
    perturbed weights are rounded into the working precision before
    evaluation.  ``target`` is (layer, sample, neuron); by default the
    entry achieving the smallest |pre-activation| at the center (an exact
    zero when one exists, per the divergence instrumentation).
    """
    if any(spec.use_batchnorm):
        raise NotImplementedError(
            "plane scans over batch-normalized networks are not supported")
    spec = _without_dropout(spec)
    p = spec.precision
    xb = np.ascontiguousarray(batch_inputs)
    if labels is None:
        labels = np.zeros(xb.shape[0], dtype=np.int64)  # loss unused by the scan
    if target is None:
        trace, _ = forward(spec, theta, xb, labels, mode="train", reduction="sum")
        target = _default_target(trace)
    layer, sample, neuron = target

    rng = stream(seed, "directions")
    u, v = _orthonormal_pair(theta.values.size, rng)

    offsets = (np.linspace(-radius, radius, resolution)
               if resolution > 1 else np.array([0.0]))
    res = len(offsets)
    grid = np.empty((res, res), dtype=np.float64)
    zero = np.empty((res, res), dtype=bool)
    theta64 = theta.as_float64()
    xrow = xb[sample:sample + 1]  # rows are independent without batch norm
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            shifted = WeightVector(
                round_array(p, theta64 + a * u + b * v), p)
            value = _preactivation(spec, shifted, xrow, layer)[0, neuron]
            grid[i, j] = abs(float(value))
            zero[i, j] = bool(value == 0)
    return PlaneScan(radius=float(radius), resolution=res, grid=grid,
                     zero_mask=zero, target=(layer, sample, neuron),
                     precision=p.value, u=u, v=v)


def _default_target(trace) -> tuple:
    for layer, count in enumerate(trace.exact_zero_count):
        if count > 0:
            where = np.argwhere(trace.preactivations[layer] == 0)
            return (layer, int(where[0][0]), int(where[0][1]))
    layer = int(np.argmin(trace.min_abs_preactivation))
    flat = np.abs(trace.preactivations[layer].astype(np.float64))
    sample, neuron = np.unravel_index(flat.argmin(), flat.shape)
    return (layer, int(sample), int(neuron))


def _without_dropout(spec: NetworkSpec):
    if any(p > 0 for p in spec.dropout_prob):
        return replace(spec, dropout_prob=(0.0,) * spec.n_hidden)
    return spec


def _preactivation(spec: NetworkSpec, theta: WeightVector, xb, layer: int):
    """Forward only as far as the tracked layer; returns its pre-relu tensor."""
    parts = unflatten(spec, theta)
    x = np.ascontiguousarray(xb)
    for h in range(1, layer + 2):
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            pre = kernels.matmul_rounded(x, parts[f"W{h}"]) + parts[f"b{h}"]
        if h == layer + 1:
            return pre
        x = np.where(pre > 0, pre, pre.dtype.type(0))
    raise AssertionError("unreachable")