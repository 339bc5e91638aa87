"""Tape-based reverse-mode differentiation with a configurable ReLU'(0).

The forward pass records layer-grained primitives (affine, relu, batch
norm, dropout multiply, fused softmax + cross-entropy, reduce).  The
reverse sweep walks the nodes backwards and applies each reverse rule in
the tape's precision, rounding after every operation like the forward
pass does.

The one nonstandard knob is the ReLU reverse rule: where the saved input
compares bitwise equal to zero (either sign), the upstream value is
multiplied by the policy's subderivative ``s`` instead of 0 or 1.  Every
other primitive is differentiable on its evaluation domain, so the whole
gradient depends on ``s`` exactly through those kink multiplications.
``backprop`` also reports how many saved entries hit the kink, which is
the instrument the divergence experiments key on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .precision import (
    Precision,
    round_to,
    rounded_exp,
    rounded_log,
    rounded_sqrt,
)


@dataclass(frozen=True)
class SubgradientPolicy:
    """Value assigned to ReLU'(0); any real is allowed, not just [0, 1].

    ``per_layer`` optionally overrides ``s`` for relu nodes carrying a
    matching layer tag (all experiments here use the global value).
    """

    s: float = 0.0
    per_layer: dict | None = None

    def s_for(self, layer: int | None) -> float:
        if self.per_layer and layer in self.per_layer:
            return self.per_layer[layer]
        return self.s


@dataclass(frozen=True)
class GradientVector:
    """Flat gradient aligned with a WeightVector layout."""

    values: np.ndarray
    precision: Precision

    def as_float64(self) -> np.ndarray:
        return self.values.astype(np.float64)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    out: int
    aux: dict = field(default_factory=dict)


class TapeError(RuntimeError):
    """Misuse of a tape (differentiating before finalization, etc.)."""


class Tape:
    """Recorded forward evaluation; single-owner while being built."""

    def __init__(self, precision: Precision):
        self.precision = precision
        self.vals: list[np.ndarray] = []
        self.nodes: list[_Node] = []
        self.grad_leaves: list[int] = []
        self.output: int | None = None

    # -- construction ---------------------------------------------------

    def _push(self, value: np.ndarray) -> int:
        self.vals.append(value)
        return len(self.vals) - 1

    def _check_open(self):
        if self.output is not None:
            raise TapeError("tape already finalized")

    def leaf(self, value: np.ndarray, needs_grad: bool = False) -> int:
        """Register an input array (already in the tape's dtype)."""
        self._check_open()
        value = np.asarray(value)
        if value.dtype != self.precision.dtype:
            raise TypeError(f"leaf dtype {value.dtype} != tape precision {self.precision.value}")
        vid = self._push(value)
        if needs_grad:
            self.grad_leaves.append(vid)
        return vid

    def _record(self, kind, inputs, value, **aux) -> int:
        self._check_open()
        out = self._push(value)
        self.nodes.append(_Node(kind, tuple(inputs), out, aux))
        return out

    def set_output(self, vid: int):
        self._check_open()
        if self.vals[vid].size != 1:
            raise TapeError("backprop differentiates a scalar loss")
        self.output = vid

    # -- primitives -----------------------------------------------------

    def relu(self, x: int, layer: int | None = None) -> int:
        v = self.vals[x]
        out = np.where(v > 0, v, v.dtype.type(0))  # -0.0 inputs map to +0.0
        return self._record("relu", (x,), out, layer=layer)

    def affine(self, x: int, w: int, b: int) -> int:
        """x @ W + b with rounded sequential accumulation over fan-in."""
        pre = kernels.matmul_rounded(self.vals[x], self.vals[w])
        with np.errstate(over="ignore", invalid="ignore"):
            pre = pre + self.vals[b]
        return self._record("affine", (x, w, b), pre)

    def add(self, a: int, b: int) -> int:
        with np.errstate(over="ignore", invalid="ignore"):
            return self._record("add", (a, b), self.vals[a] + self.vals[b])

    def sub(self, a: int, b: int) -> int:
        with np.errstate(over="ignore", invalid="ignore"):
            return self._record("sub", (a, b), self.vals[a] - self.vals[b])

    def neg(self, x: int) -> int:
        return self._record("neg", (x,), -self.vals[x])

    def scale(self, x: int, c: float) -> int:
        """Multiply by a constant (rounded into the tape's precision)."""
        cp = self.precision.dtype.type(round_to(self.precision, c))
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            return self._record("scale", (x,), cp * self.vals[x], c=cp)

    def add_const(self, x: int, c: float) -> int:
        cp = self.precision.dtype.type(round_to(self.precision, c))
        with np.errstate(over="ignore", invalid="ignore"):
            return self._record("add_const", (x,), self.vals[x] + cp, c=cp)

    def dropout_mul(self, x: int, mask_scaled: np.ndarray) -> int:
        """Elementwise multiply by a fixed {0, 1/(1-p)} tensor."""
        m = np.asarray(mask_scaled, dtype=self.precision.dtype)
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            return self._record("dropmul", (x,), self.vals[x] * m, mask=m)

    def batchnorm(self, x: int, gamma: int, beta: int, eps: float,
                  mean: np.ndarray, sigma: np.ndarray, batch_stats: bool) -> int:
        """Standardize by the given per-feature mean/sigma, then scale/shift.

        ``batch_stats`` says whether mean/sigma came from this batch (train
        mode, reverse rule differentiates through them) or from running
        statistics (eval mode, treated as constants).
        """
        v = self.vals[x]
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            xhat = (v - mean) / sigma
            out = xhat * self.vals[gamma] + self.vals[beta]
        return self._record("batchnorm", (x, gamma, beta), out,
                            xhat=xhat, sigma=sigma, batch_stats=batch_stats, eps=eps)

    def softmax_cross_entropy(self, logits: int, labels: np.ndarray) -> int:
        """Per-row -log softmax(z)[y], max-shifted; fused node, no kinks."""
        z = self.vals[logits]
        n, k = z.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError(f"labels shape {labels.shape} != ({n},)")
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError(f"label out of range for {k} classes")
        m = z.max(axis=1, keepdims=True)  # exact, no rounding
        with np.errstate(invalid="ignore"):
            d = z - m
        e = rounded_exp(self.precision, d)
        s = kernels.matmul_rounded(e, np.ones((k, 1), dtype=z.dtype))  # row sums
        logs = rounded_log(self.precision, s)
        with np.errstate(invalid="ignore"):
            picked = d[np.arange(n), labels].reshape(n, 1)
            losses = -(picked - logs)
        return self._record("softmax_ce", (logits,), losses.reshape(n),
                            e=e, s=s, labels=labels)

    def reduce(self, x: int, mode: str = "mean") -> int:
        v = self.vals[x].reshape(-1)
        total = kernels.sum_rounded(v)
        if mode == "sum":
            out = np.asarray(total)
        elif mode == "mean":
            with np.errstate(under="ignore"):
                out = np.asarray(total / v.dtype.type(v.size))
        else:
            raise ValueError(f"unknown reduction {mode!r}")
        return self._record("reduce", (x,), out, mode=mode, n=v.size)


@dataclass
class BackpropResult:
    grads: dict
    exact_zero_count: int


def relu_reverse(saved_x: float, upstream: float, policy: SubgradientPolicy,
                 precision: Precision = Precision.B64) -> float:
    """Scalar ReLU reverse rule: 0 below, 1 above, s exactly at the kink."""
    if saved_x > 0:
        return float(upstream)
    if saved_x == 0:
        sp = round_to(precision, policy.s)
        return float(np.asarray(upstream, dtype=precision.dtype) * precision.dtype.type(sp))
    return 0.0


def backprop(tape: Tape, policy: SubgradientPolicy) -> BackpropResult:
    """Reverse sweep producing gradients of the tape's scalar output.

    Returns the adjoints of every grad-enabled leaf plus the number of
    relu entries whose saved input was exactly (bitwise) zero.
    """
    if tape.output is None:
        raise TapeError("tape not finalized; call set_output first")
    p = tape.precision
    dt = p.dtype
    adj: dict[int, np.ndarray] = {
        tape.output: np.ones_like(tape.vals[tape.output])
    }
    # values that need adjoints: interior results and grad-enabled leaves;
    # skipping plain inputs saves the first layer's data-gradient matmul
    needs_adjoint = {n.out for n in tape.nodes} | set(tape.grad_leaves)
    zero_count = 0

    def acc(vid, contribution):
        prev = adj.get(vid)
        if prev is None:
            adj[vid] = contribution
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                adj[vid] = prev + contribution

    for node in reversed(tape.nodes):
        delta = adj.get(node.out)
        if node.kind == "relu":
            x = tape.vals[node.inputs[0]]
            zero_count += int(np.count_nonzero(x == 0))
        if delta is None:
            continue
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            if node.kind == "relu":
                sp = dt.type(round_to(p, policy.s_for(node.aux["layer"])))
                acc(node.inputs[0],
                    np.where(x > 0, delta, np.where(x == 0, sp * delta, dt.type(0))))
            elif node.kind == "affine":
                xid, wid, bid = node.inputs
                acc(wid, kernels.matmul_rounded(
                    np.ascontiguousarray(tape.vals[xid].T), delta))
                acc(bid, kernels.column_sum_rounded(delta))
                if xid in needs_adjoint:
                    acc(xid, kernels.matmul_rounded(
                        delta, np.ascontiguousarray(tape.vals[wid].T)))
            elif node.kind == "add":
                acc(node.inputs[0], delta)
                acc(node.inputs[1], delta)
            elif node.kind == "sub":
                acc(node.inputs[0], delta)
                acc(node.inputs[1], -delta)
            elif node.kind == "neg":
                acc(node.inputs[0], -delta)
            elif node.kind == "scale":
                acc(node.inputs[0], node.aux["c"] * delta)
            elif node.kind == "add_const":
                acc(node.inputs[0], delta)
            elif node.kind == "dropmul":
                acc(node.inputs[0], node.aux["mask"] * delta)
            elif node.kind == "batchnorm":
                _batchnorm_reverse(tape, node, delta, acc)
            elif node.kind == "softmax_ce":
                e, s = node.aux["e"], node.aux["s"]
                labels = node.aux["labels"]
                g = e / s
                n = g.shape[0]
                rows = np.arange(n)
                g[rows, labels] = g[rows, labels] - dt.type(1)
                acc(node.inputs[0], delta.reshape(n, 1) * g)
            elif node.kind == "reduce":
                v = tape.vals[node.inputs[0]]
                up = delta.reshape(())
                if node.aux["mode"] == "mean":
                    up = up / dt.type(node.aux["n"])
                acc(node.inputs[0], np.broadcast_to(up, v.shape).copy())
            else:  # pragma: no cover
                raise TapeError(f"no reverse rule for {node.kind!r}")

    grads = {vid: adj.get(vid, np.zeros_like(tape.vals[vid]))
             for vid in tape.grad_leaves}
    return BackpropResult(grads=grads, exact_zero_count=zero_count)


def _batchnorm_reverse(tape: Tape, node, delta, acc):
    xid, gid, bid = node.inputs
    xhat, sigma = node.aux["xhat"], node.aux["sigma"]
    dt = delta.dtype.type
    acc(bid, kernels.column_sum_rounded(delta))
    acc(gid, kernels.column_sum_rounded(delta * xhat))
    dxhat = delta * tape.vals[gid]
    if not node.aux["batch_stats"]:
        acc(xid, dxhat / sigma)
        return
    n = dt(delta.shape[0])
    m1 = kernels.column_sum_rounded(dxhat) / n
    m2 = kernels.column_sum_rounded(dxhat * xhat) / n
    acc(xid, ((dxhat - m1) - xhat * m2) / sigma)


# -- derived nonsmooth primitives ---------------------------------------
#
# Each is the exact ReLU composition, so its tape inherits the policy's
# subderivative semantics at ties:
#   |x|        = relu(2x) - x
#   2 max(x,y) = |x - y| + x + y
#   min(x,y)   = -max(-x, -y)
#   med(x,y,z) = min(max(x,y), max(x,z), max(y,z))
#   st(x)      = relu(x - 1) - relu(-x - 1)

def abs_via_relu(tape: Tape, x: int) -> int:
    return tape.sub(tape.relu(tape.scale(x, 2.0)), x)


def max2_via_relu(tape: Tape, x: int, y: int) -> int:
    a = abs_via_relu(tape, tape.sub(x, y))
    return tape.scale(tape.add(tape.add(a, x), y), 0.5)


def min2_via_relu(tape: Tape, x: int, y: int) -> int:
    return tape.neg(max2_via_relu(tape, tape.neg(x), tape.neg(y)))


def med3_via_relu(tape: Tape, x: int, y: int, z: int) -> int:
    return min2_via_relu(
        tape,
        min2_via_relu(tape, max2_via_relu(tape, x, y), max2_via_relu(tape, x, z)),
        max2_via_relu(tape, y, z),
    )


def soft_threshold_via_relu(tape: Tape, x: int) -> int:
    pos = tape.relu(tape.add_const(x, -1.0))
    neg = tape.relu(tape.add_const(tape.neg(x), -1.0))
    return tape.sub(pos, neg)


_DERIVED = {
    "abs": (1, abs_via_relu),
    "max2": (2, max2_via_relu),
    "min2": (2, min2_via_relu),
    "med3": (3, med3_via_relu),
    "soft_threshold": (1, soft_threshold_via_relu),
}


def derived_primitive(kind: str, inputs, precision: Precision):
    """Evaluate one of the ReLU-composite primitives.

    Returns ``(output_array, tape, input_ids)``; differentiate with
    ``backprop`` after ``tape.set_output``.
    """
    if kind not in _DERIVED:
        raise ValueError(f"unknown derived primitive {kind!r}")
    arity, builder = _DERIVED[kind]
    if len(inputs) != arity:
        raise ValueError(f"{kind} takes {arity} inputs, got {len(inputs)}")
    tape = Tape(precision)
    ids = [tape.leaf(np.asarray(v, dtype=precision.dtype), needs_grad=True)
           for v in inputs]
    out = builder(tape, *ids)
    return tape.vals[out], tape, ids


def emulated_subgradient_relu(tape: Tape, x: int, s: float) -> int:
    """relu(x) + s*(relu(-x) - relu(x) + x): pointwise equal to relu(x),
    but differentiating it with policy 0 yields the policy-s gradient."""
    r1 = tape.relu(x)
    r2 = tape.relu(tape.neg(x))
    inner = tape.add(tape.sub(r2, r1), x)
    return tape.add(r1, tape.scale(inner, s))
