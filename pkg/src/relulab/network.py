"""Fully connected ReLU classifiers over the rounded-arithmetic engine.

Architecture: softmax-cross-entropy head on top of H affine layers with
ReLU between them, optional batch normalization (after the affine map,
before ReLU) and inverted dropout (after ReLU) on hidden layers.

Parameter layout (the WeightVector contract): for each layer h = 1..H,
W_h stored row-major with shape (fan_in, fan_out) followed by b_h; after
all layers, scale then shift for each batch-normalized hidden layer in
layer order.  Weight initialization draws every weight and bias of a
layer with fan-in m iid uniform on [-a, a], a = sqrt(6)/sqrt(m), realized
as a*(2u - 1) with u from the seeded init stream, drawn in layout order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .engine import GradientVector, Tape
from .precision import Precision, round_array, round_to, rounded_sqrt
from .streams import stream

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes d0..dH (dH = class count) plus regularization flags.

    ``use_batchnorm`` and ``dropout_prob`` apply per hidden layer; passing
    a single bool/float broadcasts it over all hidden layers.
    """

    layer_sizes: tuple
    use_batchnorm: tuple = ()
    dropout_prob: tuple = ()
    precision: Precision = Precision.B64

    def __post_init__(self):
        sizes = tuple(int(d) for d in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        if any(d <= 0 for d in sizes):
            raise ValueError("layer sizes must be positive")
        object.__setattr__(self, "layer_sizes", sizes)
        h = self.n_hidden
        object.__setattr__(self, "use_batchnorm", _per_hidden(self.use_batchnorm, h, False))
        dp = _per_hidden(self.dropout_prob, h, 0.0)
        if any(not (0 <= p < 1) for p in dp):
            raise ValueError("dropout probabilities must lie in [0, 1)")
        object.__setattr__(self, "dropout_prob", dp)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_hidden(self) -> int:
        return self.n_layers - 1

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        sizes = self.layer_sizes
        p = sum(sizes[h] * (sizes[h - 1] + 1) for h in range(1, len(sizes)))
        p += sum(2 * sizes[h + 1] for h, bn in enumerate(self.use_batchnorm) if bn)
        return p

    def to_json(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "use_batchnorm": list(self.use_batchnorm),
            "dropout_prob": list(self.dropout_prob),
            "precision": self.precision.value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(
            layer_sizes=tuple(d["layer_sizes"]),
            use_batchnorm=tuple(d["use_batchnorm"]),
            dropout_prob=tuple(d["dropout_prob"]),
            precision=Precision.from_tag(d["precision"]),
        )


def _per_hidden(value, n_hidden, default):
    if value == () or value is None:
        return (default,) * n_hidden
    if isinstance(value, (bool, int, float)):
        return (type(default)(value),) * n_hidden
    out = tuple(value)
    if len(out) != n_hidden:
        raise ValueError(f"expected {n_hidden} per-hidden-layer entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class WeightVector:
    """Flat parameter vector in the documented layout."""

    values: np.ndarray
    precision: Precision

    def __post_init__(self):
        if self.values.dtype != self.precision.dtype:
            raise TypeError("weight dtype does not match precision")
        if self.values.ndim != 1:
            raise TypeError("weights must be a flat vector")

    def as_float64(self) -> np.ndarray:
        return self.values.astype(np.float64)

    def l1_gap(self, other: "WeightVector") -> float:
        """Sum of absolute coordinate differences, computed in binary64."""
        return float(np.abs(self.as_float64() - other.as_float64()).sum())


def layout_slices(spec: NetworkSpec):
    """(name, slice, shape) triples covering the flat layout in order."""
    sizes = spec.layer_sizes
    out = []
    offset = 0

    def take(name, shape):
        nonlocal offset
        n = int(np.prod(shape))
        out.append((name, slice(offset, offset + n), shape))
        offset += n

    for h in range(1, len(sizes)):
        take(f"W{h}", (sizes[h - 1], sizes[h]))
        take(f"b{h}", (sizes[h],))
    for h, bn in enumerate(spec.use_batchnorm):
        if bn:
            take(f"bn{h + 1}_scale", (sizes[h + 1],))
            take(f"bn{h + 1}_shift", (sizes[h + 1],))
    return out


def layout_string(spec: NetworkSpec) -> str:
    return ",".join(name for name, _, _ in layout_slices(spec))


def unflatten(spec: NetworkSpec, theta: WeightVector) -> dict:
    """Named views (not copies) into the flat vector."""
    if theta.values.size != spec.param_count:
        raise ValueError(f"expected {spec.param_count} parameters, got {theta.values.size}")
    return {name: theta.values[sl].reshape(shape)
            for name, sl, shape in layout_slices(spec)}


def flatten(spec: NetworkSpec, parts: dict) -> WeightVector:
    chunks = [np.asarray(parts[name], dtype=spec.precision.dtype).reshape(-1)
              for name, _, _ in layout_slices(spec)]
    return WeightVector(np.concatenate(chunks), spec.precision)


def init_kaiming_uniform(spec: NetworkSpec, seed: int) -> WeightVector:
    """Uniform [-a, a] with a = sqrt(6)/sqrt(fan_in) for weights and biases;
    batch-norm scales start at 1, shifts at 0."""
    rng = stream(seed, "init")
    sizes = spec.layer_sizes
    parts = {}
    for h in range(1, len(sizes)):
        m = sizes[h - 1]
        alpha = np.sqrt(6.0) / np.sqrt(m)
        parts[f"W{h}"] = round_array(
            spec.precision, alpha * (2.0 * rng.random((m, sizes[h])) - 1.0))
        parts[f"b{h}"] = round_array(
            spec.precision, alpha * (2.0 * rng.random(sizes[h]) - 1.0))
    for h, bn in enumerate(spec.use_batchnorm):
        if bn:
            parts[f"bn{h + 1}_scale"] = np.ones(sizes[h + 1], dtype=spec.precision.dtype)
            parts[f"bn{h + 1}_shift"] = np.zeros(sizes[h + 1], dtype=spec.precision.dtype)
    return flatten(spec, parts)


@dataclass
class BatchNormState:
    """Running statistics per batch-normalized hidden layer (eval mode)."""

    running_mean: dict = field(default_factory=dict)
    running_var: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, spec: NetworkSpec) -> "BatchNormState":
        st = cls()
        for h, bn in enumerate(spec.use_batchnorm):
            if bn:
                d = spec.layer_sizes[h + 1]
                st.running_mean[h] = np.zeros(d, dtype=spec.precision.dtype)
                st.running_var[h] = np.ones(d, dtype=spec.precision.dtype)
        return st

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            {k: v.copy() for k, v in self.running_mean.items()},
            {k: v.copy() for k, v in self.running_var.items()},
        )


@dataclass
class ForwardTrace:
    """Per-layer kink instrumentation of one forward evaluation.

    ``preactivations`` holds the hidden-layer tensors the ReLUs saw (after
    batch norm when present): references into the tape, not copies.
    """

    loss: float
    min_abs_preactivation: tuple
    exact_zero_count: tuple
    preactivations: tuple
    logits: np.ndarray
    batch_size: int

    @property
    def total_zero_count(self) -> int:
        return int(sum(self.exact_zero_count))


def draw_dropout_masks(spec: NetworkSpec, batch_size: int, rng) -> list:
    """Pre-draw {0, 1/(1-p)} mask tensors for one training step.

    Masks are drawn for every hidden layer with nonzero dropout, in layer
    order, so paired trajectories sharing ``rng`` see identical masks.
    """
    masks = []
    for h, prob in enumerate(spec.dropout_prob):
        if prob > 0:
            keep = rng.random((batch_size, spec.layer_sizes[h + 1])) >= prob
            scale = round_to(spec.precision, 1.0 / (1.0 - prob))
            masks.append(np.where(keep, spec.precision.dtype.type(scale),
                                  spec.precision.dtype.type(0)))
        else:
            masks.append(None)
    return masks


def forward(spec: NetworkSpec, theta: WeightVector, inputs: np.ndarray,
            labels: np.ndarray, mode: str = "train",
            dropout_masks: list | None = None,
            bn_state: BatchNormState | None = None,
            update_bn_stats: bool = False,
            reduction: str = "mean"):
    """One rounded forward evaluation; returns (trace, tape).

    The tape's grad leaves are registered in layout order, so gradients
    reassemble into the WeightVector layout.  The forward value never
    depends on the subderivative policy.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    p = spec.precision
    if inputs.ndim != 2 or inputs.shape[1] != spec.layer_sizes[0]:
        raise ValueError(
            f"batch shape {inputs.shape} incompatible with input size {spec.layer_sizes[0]}")
    parts = unflatten(spec, theta)
    tape = Tape(p)
    leaf_ids = {name: tape.leaf(arr, needs_grad=True)
                for name, arr in parts.items()}
    # the tape rejects mismatched dtypes: data must be quantized to the
    # network's precision up front, never silently here
    x = tape.leaf(np.ascontiguousarray(inputs))

    min_abs, zeros, preacts = [], [], []
    n = inputs.shape[0]
    for h in range(1, spec.n_layers + 1):
        pre = tape.affine(x, leaf_ids[f"W{h}"], leaf_ids[f"b{h}"])
        if h <= spec.n_hidden:
            hid = h - 1
            if spec.use_batchnorm[hid]:
                pre = _batchnorm_forward(spec, tape, pre, leaf_ids, hid, mode,
                                         bn_state, update_bn_stats, n)
            v = tape.vals[pre].astype(np.float64)
            min_abs.append(float(np.abs(v).min()))
            zeros.append(int(np.count_nonzero(tape.vals[pre] == 0)))
            preacts.append(tape.vals[pre])
            x = tape.relu(pre, layer=hid)
            if mode == "train" and spec.dropout_prob[hid] > 0:
                if dropout_masks is None or dropout_masks[hid] is None:
                    raise ValueError("training with dropout requires pre-drawn masks")
                x = tape.dropout_mul(x, dropout_masks[hid])
        else:
            logits = pre
    losses = tape.softmax_cross_entropy(logits, labels)
    out = tape.reduce(losses, reduction)
    tape.set_output(out)
    trace = ForwardTrace(
        loss=float(tape.vals[out]),
        min_abs_preactivation=tuple(min_abs),
        exact_zero_count=tuple(zeros),
        preactivations=tuple(preacts),
        logits=tape.vals[logits],
        batch_size=n,
    )
    return trace, tape


def _batchnorm_forward(spec, tape, pre, leaf_ids, hid, mode, bn_state,
                       update_bn_stats, n):
    p = spec.precision
    dt = p.dtype
    v = tape.vals[pre]
    eps = dt.type(round_to(p, BN_EPS))
    if mode == "train":
        if n < 2:
            raise ValueError("batch normalization in train mode needs batch size >= 2")
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            mean = kernels.column_sum_rounded(v) / dt.type(n)
            centered = v - mean
            var = kernels.column_sum_rounded(centered * centered) / dt.type(n)
            sigma = rounded_sqrt(p, var + eps)
        if update_bn_stats:
            if bn_state is None:
                raise ValueError("update_bn_stats requires a BatchNormState")
            mom = dt.type(round_to(p, BN_MOMENTUM))
            one_minus = dt.type(round_to(p, 1.0 - BN_MOMENTUM))
            with np.errstate(over="ignore", under="ignore"):
                bn_state.running_mean[hid] = one_minus * bn_state.running_mean[hid] + mom * mean
                bn_state.running_var[hid] = one_minus * bn_state.running_var[hid] + mom * var
        batch_stats = True
    else:
        if bn_state is None:
            raise ValueError("eval mode with batch norm requires running statistics")
        mean = bn_state.running_mean[hid]
        with np.errstate(over="ignore", under="ignore"):
            sigma = rounded_sqrt(p, bn_state.running_var[hid] + eps)
        batch_stats = False
    return tape.batchnorm(pre, leaf_ids[f"bn{hid + 1}_scale"],
                          leaf_ids[f"bn{hid + 1}_shift"], float(eps),
                          mean, sigma, batch_stats)


def gradient_vector(spec: NetworkSpec, tape: Tape, grads: dict) -> GradientVector:
    """Reassemble per-leaf adjoints into the flat layout."""
    ordered = [grads[vid].reshape(-1) for vid in tape.grad_leaves]
    return GradientVector(np.concatenate(ordered), spec.precision)


# -- checkpoint container -------------------------------------------------

_MAGIC = b"RLCK"
_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, spec: NetworkSpec, theta: WeightVector,
                    metadata: dict | None = None):
    """Versioned binary container + JSON sidecar.

    Layout: magic, u32 version, u32 header length, UTF-8 JSON header,
    then the raw little-endian scalar payload.
    """
    header = {
        "spec": spec.to_json(),
        "precision": theta.precision.value,
        "layout": layout_string(spec),
        "count": int(theta.values.size),
        "metadata": metadata or {},
    }
    raw = json.dumps(header).encode()
    payload = theta.values.astype(theta.values.dtype.newbyteorder("<")).tobytes()
    path = str(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(raw)))
        f.write(raw)
        f.write(payload)
    with open(path + ".json", "w") as f:
        json.dump(header, f, indent=2)


def load_checkpoint(path):
    """Returns (spec, WeightVector, metadata)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode())
        spec = NetworkSpec.from_json(header["spec"])
        dtype = spec.precision.dtype.newbyteorder("<")
        payload = f.read(header["count"] * dtype.itemsize)
        if len(payload) != header["count"] * dtype.itemsize:
            raise CheckpointError("truncated checkpoint payload")
        values = np.frombuffer(payload, dtype=dtype).astype(spec.precision.dtype)
    theta = WeightVector(values, spec.precision)
    return spec, theta, header["metadata"]
