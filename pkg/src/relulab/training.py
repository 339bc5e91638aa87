"""Deterministic mini-batch SGD/Adam and the paired-trajectory runner.

``run_paired`` advances one trajectory per compared subderivative value in
lockstep: all of them share the initialization, the step-size draw, the
epoch shuffles and the dropout masks, and differ only in the value used
for ReLU'(0) during the reverse pass.  A sanity duplicate of the first
trajectory runs alongside to certify that no other source of divergence
exists.  Divergence detection is bitwise: the L1 parameter gap leaves
zero exactly when some kink multiplication fed back into the weights.

Update rule (per iteration k, precision p, all elementwise ops rounded):

    step  = R(R(gamma * alpha_k) applied to the mean mini-batch gradient)
    theta = R(theta - R(step_scale * g))
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .engine import SubgradientPolicy, backprop
from .network import (
    BatchNormState,
    NetworkSpec,
    WeightVector,
    draw_dropout_masks,
    forward,
    gradient_vector,
    init_kaiming_uniform,
)
from .precision import Precision, round_to
from .streams import stream


class GradientExplosionError(RuntimeError):
    """Non-finite gradient entries; carries the iteration and trajectory."""

    def __init__(self, iteration: int, s_value: float):
        self.iteration = iteration
        self.s_value = s_value
        super().__init__(
            f"gradient exploded at iteration {iteration} (s = {s_value})")


@dataclass(frozen=True)
class TrainConfig:
    s_values: tuple = (0.0, 1.0)
    gamma_interval: tuple = (0.01, 0.012)
    alpha: float = 1.0
    batch_size: int = 128
    epochs: int = 1
    optimizer: str = "sgd"
    precision: Precision = Precision.B32
    init_seed: int = 0
    shuffle_seed: int = 0
    gamma_seed: int = 0
    dropout_seed: int = 0

    def __post_init__(self):
        lo, hi = self.gamma_interval
        if not (0 < lo <= hi):
            raise ValueError("gamma interval must satisfy 0 < lo <= hi")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "s_values", tuple(float(s) for s in self.s_values))

    def to_json(self) -> dict:
        return {
            "s_values": list(self.s_values),
            "gamma_interval": list(self.gamma_interval),
            "alpha": self.alpha,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "optimizer": self.optimizer,
            "precision": self.precision.value,
            "seeds": {"init": self.init_seed, "shuffle": self.shuffle_seed,
                      "gamma": self.gamma_seed, "dropout": self.dropout_seed},
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        seeds = d["seeds"]
        return cls(
            s_values=tuple(d["s_values"]),
            gamma_interval=tuple(d["gamma_interval"]),
            alpha=d["alpha"],
            batch_size=d["batch_size"],
            epochs=d["epochs"],
            optimizer=d["optimizer"],
            precision=Precision.from_tag(d["precision"]),
            init_seed=seeds["init"], shuffle_seed=seeds["shuffle"],
            gamma_seed=seeds["gamma"], dropout_seed=seeds["dropout"],
        )


def sgd_step(theta: WeightVector, grad, step_scale: float) -> WeightVector:
    """theta - step_scale * grad, both operations rounded at the precision."""
    p = theta.precision
    dt = p.dtype
    g = grad.values if hasattr(grad, "values") else np.asarray(grad, dtype=dt)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        upd = dt.type(step_scale) * g
        new = theta.values - upd
    return WeightVector(new, p)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, theta: WeightVector) -> "AdamState":
        return cls(np.zeros_like(theta.values), np.zeros_like(theta.values))


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(theta: WeightVector, grad, state: AdamState,
              gamma: float) -> WeightVector:
    """Bias-corrected Adam update, every elementwise op rounded."""
    p = theta.precision
    dt = p.dtype
    g = grad.values if hasattr(grad, "values") else np.asarray(grad, dtype=dt)
    state.t += 1
    b1 = dt.type(round_to(p, ADAM_BETA1))
    b2 = dt.type(round_to(p, ADAM_BETA2))
    onem_b1 = dt.type(round_to(p, 1.0 - ADAM_BETA1))
    onem_b2 = dt.type(round_to(p, 1.0 - ADAM_BETA2))
    # bias corrections evaluated in binary64, rounded once
    bc1 = dt.type(round_to(p, 1.0 - ADAM_BETA1 ** state.t))
    bc2 = dt.type(round_to(p, 1.0 - ADAM_BETA2 ** state.t))
    eps = dt.type(round_to(p, ADAM_EPS))
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        state.m = b1 * state.m + onem_b1 * g
        state.v = b2 * state.v + onem_b2 * (g * g)
        mhat = state.m / bc1
        vhat = state.v / bc2
        root = np.sqrt(vhat.astype(np.float64)).astype(dt)  # b64 sqrt, one rounding
        denom = root + eps
        upd = (dt.type(round_to(p, gamma)) * mhat) / denom
        new = theta.values - upd
    return WeightVector(new, p)


@dataclass
class BifurcationPoint:
    """Where a paired run first multiplied an exact zero: enough context to
    re-evaluate the same mini-batch around the same weights."""

    iteration: int
    theta: WeightVector
    batch_indices: np.ndarray
    layer: int
    sample: int
    neuron: int


@dataclass
class TrajectoryRecord:
    """Instrumented history of one paired run (rows indexed by iteration)."""

    s_values: tuple
    precision: str
    gamma: float
    iterations: list = field(default_factory=list)
    first_divergence_iteration: dict = field(default_factory=dict)
    first_zero_iteration: int | None = None
    bifurcation_point: BifurcationPoint | None = None
    final_weights: dict = field(default_factory=dict)
    final_bn_states: dict = field(default_factory=dict)
    exploded: dict = field(default_factory=dict)

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    def gap_column(self, s: float) -> np.ndarray:
        return np.array([row["gaps"][_skey(s)] for row in self.iterations])

    def loss_column(self, s: float) -> np.ndarray:
        return np.array([row["losses"][_skey(s)] for row in self.iterations])


def _skey(s: float) -> str:
    return repr(float(s))


def draw_gamma(config: TrainConfig) -> float:
    lo, hi = config.gamma_interval
    u = stream(config.gamma_seed, "gamma").random()
    return lo + (hi - lo) * u


def run_paired(config: TrainConfig, spec: NetworkSpec, dataset,
               include_sanity: bool = True,
               max_iterations: int | None = None,
               stop_after_divergence: int | None = None,
               capture_bifurcation: bool = False,
               theta0: WeightVector | None = None) -> TrajectoryRecord:
    """Train one trajectory per s value in lockstep on a shared batch stream.

    Instrumentation per iteration: training loss per trajectory, per-layer
    minimum |pre-activation| and exact-zero count of the reference
    trajectory on the current mini-batch, and the L1 parameter gap of
    every trajectory against the reference, measured after the update.
    ``stop_after_divergence`` cuts the run that many iterations after all
    compared pairs have split (the record stays honest, just shorter).
    ``capture_bifurcation`` snapshots the weights and mini-batch of the
    first exact-zero event for later hyperplane scans.
    """
    if spec.precision != config.precision:
        raise ValueError("network and training precision disagree")
    p = config.precision
    if theta0 is None:
        theta0 = init_kaiming_uniform(spec, config.init_seed)
    gamma = draw_gamma(config)
    step_scale = round_to(p, round_to(p, gamma) * round_to(p, config.alpha))

    s_list = list(config.s_values)
    if include_sanity:
        s_list.append(config.s_values[0])  # second run of the reference s
    keys = ["ref"] + [_skey(s) for s in config.s_values[1:]]
    if include_sanity:
        keys.append("sanity")
    trajectories = [{
        "s": float(s),
        "policy": SubgradientPolicy(float(s)),
        "theta": theta0,
        "bn": BatchNormState.fresh(spec),
        "adam": None,
    } for s in s_list]

    shuffle_rng = stream(config.shuffle_seed, "shuffle")
    dropout_rng = stream(config.dropout_seed, "dropout")
    record = TrajectoryRecord(s_values=config.s_values, precision=p.value,
                              gamma=gamma)
    n = dataset.n_samples
    k = 0
    diverged_all_at = None
    compared = [_skey(s) for s in config.s_values[1:]]
    needs_dropout = any(q > 0 for q in spec.dropout_prob)

    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = dataset.inputs.data[idx]
            yb = dataset.labels[idx]
            masks = (draw_dropout_masks(spec, len(idx), dropout_rng)
                     if needs_dropout else None)

            # forward + reverse for every trajectory before any update, so
            # the zero event can be captured at the weights that caused it
            losses = {}
            grads = []
            ref_trace = None
            ref_zero = 0
            for t_i, tr in enumerate(trajectories):
                trace, tape = forward(spec, tr["theta"], xb, yb, mode="train",
                                      dropout_masks=masks, bn_state=tr["bn"],
                                      update_bn_stats=True, reduction="mean")
                result = backprop(tape, tr["policy"])
                grad = gradient_vector(spec, tape, result.grads)
                if not np.isfinite(grad.values.astype(np.float64)).all():
                    record.exploded[keys[t_i]] = k
                    _finalize(record, trajectories, keys)
                    err = GradientExplosionError(k, tr["s"])
                    err.record = record
                    raise err
                grads.append(grad)
                losses[keys[t_i]] = trace.loss
                if t_i == 0:
                    ref_trace = trace
                    ref_zero = result.exact_zero_count

            if ref_trace.total_zero_count > 0 and record.first_zero_iteration is None:
                record.first_zero_iteration = k
                if capture_bifurcation:
                    record.bifurcation_point = _locate_zero(
                        ref_trace, trajectories[0]["theta"], idx, k)

            for t_i, tr in enumerate(trajectories):
                if config.optimizer == "adam":
                    if tr["adam"] is None:
                        tr["adam"] = AdamState.fresh(tr["theta"])
                    tr["theta"] = adam_step(tr["theta"], grads[t_i], tr["adam"], gamma)
                else:
                    tr["theta"] = sgd_step(tr["theta"], grads[t_i], step_scale)

            ref_theta = trajectories[0]["theta"]
            gaps = {keys[t_i]: ref_theta.l1_gap(tr["theta"])
                    for t_i, tr in enumerate(trajectories) if t_i > 0}

            for key in compared:
                if gaps.get(key, 0.0) > 0 and key not in record.first_divergence_iteration:
                    record.first_divergence_iteration[key] = k
                    if ref_trace.total_zero_count == 0:
                        raise RuntimeError(
                            "trajectories split without a kink multiplication; "
                            "this breaks the lockstep invariant")

            record.iterations.append({
                "iteration": k,
                "losses": losses,
                "min_abs": list(ref_trace.min_abs_preactivation),
                "zeros": list(ref_trace.exact_zero_count),
                "gaps": gaps,
                "zero_count": ref_zero,
            })
            k += 1
            if max_iterations is not None and k >= max_iterations:
                _finalize(record, trajectories, keys)
                return record
            if stop_after_divergence is not None and compared:
                if all(c in record.first_divergence_iteration for c in compared):
                    if diverged_all_at is None:
                        diverged_all_at = k
                    if k - diverged_all_at >= stop_after_divergence:
                        _finalize(record, trajectories, keys)
                        return record
    _finalize(record, trajectories, keys)
    return record


def _finalize(record, trajectories, keys):
    for t_i, tr in enumerate(trajectories):
        record.final_weights[keys[t_i]] = tr["theta"]
        record.final_bn_states[keys[t_i]] = tr["bn"]


def _locate_zero(trace, theta, idx, k) -> BifurcationPoint:
    """First exactly-zero pre-activation as (layer, sample, neuron)."""
    for layer, count in enumerate(trace.exact_zero_count):
        if count > 0:
            where = np.argwhere(trace.preactivations[layer] == 0)
            sample, neuron = (int(v) for v in where[0])
            return BifurcationPoint(iteration=k, theta=theta,
                                    batch_indices=np.array(idx, copy=True),
                                    layer=layer, sample=sample, neuron=neuron)
    raise RuntimeError("no zero entry found despite a positive count")


def evaluate(spec: NetworkSpec, theta: WeightVector, dataset,
             bn_state: BatchNormState | None = None,
             batch_size: int = 512):
    """Top-1 accuracy and mean cross-entropy in eval mode."""
    if dataset.n_samples == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    losses = []
    for start in range(0, dataset.n_samples, batch_size):
        xb = dataset.inputs.data[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        trace, _ = forward(spec, theta, xb, yb, mode="eval",
                           bn_state=bn_state, reduction="mean")
        pred = trace.logits.astype(np.float64).argmax(axis=1)
        correct += int((pred == yb).sum())
        losses.append(trace.loss * len(yb))
    accuracy = correct / dataset.n_samples
    mean_loss = float(sum(losses) / dataset.n_samples)
    return accuracy, mean_loss
