"""Backward relevance propagation through a residual CNN.

The backward pass mirrors the forward graph in reverse. Linear projections
(conv, fc, global average pooling) redistribute relevance under the z+ rule or
the epsilon rule; ReLU and batch-norm pass relevance through unchanged; max
pooling routes each output's relevance to its recorded winner. At every
bottleneck merge the incoming relevance is split between the skip connection
and the main path, either symmetrically or in proportion to the magnitudes of
the two pre-merge activations, and the two backward flows are summed at the
block input.

Under the z+ rule every step conserves the total relevance, so the sum at any
depth equals the seeded class probability; checkpoint sums are recorded along
the way so that claim is machine-checkable. The epsilon rule deliberately
leaks (its stabilized denominators are not exact share totals) and is only
audited, never enforced.

Relevance is computed and stored in float64: the conservation audit tolerances
are tighter than float32 storage would support.

z+ rule, zero denominator: when an output unit's positive-weight share total
is exactly zero but it still carries relevance, that relevance is spread
uniformly over the projection's inputs (the whole input for conv, the channel
plane for GAP). An epsilon stabilizer would leak; uniform spreading is the
simplest strictly conserving completion.

Bias terms feed the forward pass but absorb no relevance under either rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .forward import BlockTrace, ForwardTrace, NodeTrace, run_forward
from .image import ImageSample
from .model import ModelGraph

RULES = ("zplus", "epsilon", "mixture")
SPLITTINGS = ("symmetric", "ratio")
QUANTIZE_MODES = ("paper", "binwidth", "off")

RATIO_DENOM_GUARD = 1e-12


@dataclass(frozen=True)
class RuleConfig:
    """Propagation rule selection for one explanation run.

    ``mixture`` applies the epsilon rule to the head and to blocks with index
    >= ``mixture_boundary`` (0-based), and the z+ rule to earlier blocks and
    the stem. ``include_identity`` controls whether identity skips receive a
    relevance share at all; projection skips always do.
    """

    rule: str = "zplus"
    epsilon: float = 1e-6
    mixture_boundary: int = 8
    splitting: str = "ratio"
    include_identity: bool = True
    quantize: str = "paper"
    bins: int = 8

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.splitting not in SPLITTINGS:
            raise ValueError(f"splitting must be one of {SPLITTINGS}, got {self.splitting!r}")
        if self.quantize not in QUANTIZE_MODES:
            raise ValueError(f"quantize must be one of {QUANTIZE_MODES}, got {self.quantize!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.mixture_boundary < 0:
            raise ValueError("mixture_boundary must be >= 0")

    def rule_for_stem(self) -> str:
        return "zplus" if self.rule == "mixture" else self.rule

    def rule_for_block(self, index: int) -> str:
        if self.rule == "mixture":
            return "epsilon" if index >= self.mixture_boundary else "zplus"
        return self.rule

    def rule_for_head(self) -> str:
        return "epsilon" if self.rule == "mixture" else self.rule


@dataclass
class RelevanceState:
    """Relevance tensor in flight plus the conservation checkpoint ledger."""

    current: np.ndarray
    checkpoint_sums: list[tuple[str, float]] = field(default_factory=list)

    def record(self, label: str, r: np.ndarray) -> None:
        total = float(np.sum(r, dtype=np.float64))
        if not np.isfinite(total):
            raise FloatingPointError(f"checkpoint {label}: relevance sum is not finite")
        self.current = r
        self.checkpoint_sums.append((label, total))


@dataclass
class AttributionMap:
    """Channel-summed input relevance, optionally heat-quantized."""

    raw: np.ndarray                   # H x W float64
    quantized: np.ndarray | None
    quantize_mode: str
    bins: int

    @property
    def values(self) -> np.ndarray:
        """The map downstream consumers should rank and export."""
        return self.raw if self.quantized is None else self.quantized


# ---------------------------------------------------------------------------
# Per-layer backward rules
# ---------------------------------------------------------------------------

def _as64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def seed_relevance(probs: np.ndarray, class_index: int) -> np.ndarray:
    """Initial relevance: the target class probability at its index, 0 elsewhere."""
    probs = _as64(probs)
    if probs.ndim != 1:
        raise ops.ShapeMismatch(f"probs must be rank 1, got rank {probs.ndim}")
    if not 0 <= class_index < probs.shape[0]:
        raise ValueError(f"class {class_index} out of range for {probs.shape[0]} classes")
    r = np.zeros_like(probs)
    r[class_index] = probs[class_index]
    return r


def _eps_stabilize(denom: np.ndarray, epsilon: float) -> np.ndarray:
    # sign(0) counts as +1 so zero denominators become +epsilon.
    sign = np.where(denom < 0, -1.0, 1.0)
    return denom + epsilon * sign


def lrp_linear(h, weight, r_out, rule: str = "zplus", epsilon: float = 1e-6) -> np.ndarray:
    """Backward relevance through an affine layer (bias absorbs nothing)."""
    h = _as64(h)
    weight = _as64(weight)
    r_out = _as64(r_out)
    if weight.ndim != 2 or h.ndim != 1 or r_out.ndim != 1:
        raise ops.ShapeMismatch("lrp_linear expects weight (E x D), h (D), r_out (E)")
    e, d = weight.shape
    if h.shape[0] != d or r_out.shape[0] != e:
        raise ops.ShapeMismatch(
            f"lrp_linear shapes inconsistent: weight {weight.shape}, h {h.shape}, "
            f"r_out {r_out.shape}")

    if rule == "zplus":
        wp = np.maximum(weight, 0.0)
        denom = wp @ h
        live = denom != 0.0
        ratio = np.where(live, r_out / np.where(live, denom, 1.0), 0.0)
        r_in = h * (wp.T @ ratio)
        dead_total = float(r_out[~live].sum())
        if dead_total != 0.0:
            r_in += dead_total / d
        return r_in
    if rule == "epsilon":
        denom = _eps_stabilize(weight @ h, epsilon)
        return h * (weight.T @ (r_out / denom))
    raise ValueError(f"unknown rule {rule!r}")


def lrp_conv(x, weight, stride: int, padding: int, r_out,
             rule: str = "zplus", epsilon: float = 1e-6) -> np.ndarray:
    """Backward relevance through a conv layer, treated as the linear projection
    it is. Padding cells carry zero activation so they drop out of both the
    share numerators and the denominators; nothing is scattered onto them.
    """
    x = _as64(x)
    weight = _as64(weight)
    r_out = _as64(r_out)
    if x.ndim != 3 or weight.ndim != 4:
        raise ops.ShapeMismatch("lrp_conv expects x (C x H x W) and weight rank 4")
    c_out, c_in, k, kw = weight.shape
    if k != kw or c_in != x.shape[0]:
        raise ops.ShapeMismatch(
            f"lrp_conv weight {weight.shape} inconsistent with input {x.shape}")
    out_h = ops.conv_output_extent(x.shape[1], k, stride, padding, "height")
    out_w = ops.conv_output_extent(x.shape[2], k, stride, padding, "width")
    if r_out.shape != (c_out, out_h, out_w):
        raise ops.ShapeMismatch(
            f"lrp_conv r_out shape {r_out.shape} != expected {(c_out, out_h, out_w)}")

    if padding:
        xpad = np.zeros((c_in, x.shape[1] + 2 * padding, x.shape[2] + 2 * padding))
        xpad[:, padding:padding + x.shape[1], padding:padding + x.shape[2]] = x
    else:
        xpad = x
    cols = ops.im2col(xpad, k, stride, out_h, out_w)        # (C_in*k*k, L)
    r_flat = r_out.reshape(c_out, -1)

    if rule == "zplus":
        wmat = np.maximum(weight, 0.0).reshape(c_out, -1)
        denom = wmat @ cols                                  # (C_out, L)
        live = denom != 0.0
        ratio = np.where(live, r_flat / np.where(live, denom, 1.0), 0.0)
        r_cols = cols * (wmat.T @ ratio)
        r_in = ops.col2im_add(r_cols, x.shape, k, stride, padding)
        dead_total = float(r_flat[~live].sum())
        if dead_total != 0.0:
            r_in += dead_total / x.size
        return r_in
    if rule == "epsilon":
        wmat = weight.reshape(c_out, -1)
        denom = _eps_stabilize(wmat @ cols, epsilon)
        r_cols = cols * (wmat.T @ (r_flat / denom))
        return ops.col2im_add(r_cols, x.shape, k, stride, padding)
    raise ValueError(f"unknown rule {rule!r}")


def lrp_maxpool(indices: np.ndarray, r_out, input_shape) -> np.ndarray:
    """Winner-take-all projection backward: scatter-add onto recorded winners."""
    indices = np.asarray(indices)
    r_out = _as64(r_out)
    if indices.shape != r_out.shape:
        raise ops.ShapeMismatch(
            f"pool indices shape {indices.shape} != relevance shape {r_out.shape}")
    r_in = np.zeros(int(np.prod(input_shape)), dtype=np.float64)
    np.add.at(r_in, indices.ravel(), r_out.ravel())
    return r_in.reshape(tuple(input_shape))


def lrp_gap(x, r_out, rule: str = "zplus", epsilon: float = 1e-6) -> np.ndarray:
    """Backward relevance through global average pooling.

    GAP is a per-channel projection with uniform positive weights 1/(H*W), so
    under z+ the shares are just h/(H*W) (negative cells contribute
    negatively). A channel whose share total is exactly zero spreads its
    relevance uniformly over its own plane.
    """
    x = _as64(x)
    r_out = _as64(r_out)
    if x.ndim != 3 or r_out.ndim != 1 or r_out.shape[0] != x.shape[0]:
        raise ops.ShapeMismatch(
            f"lrp_gap expects x (C x H x W) and r_out (C); got {x.shape}, {r_out.shape}")
    c, h, w = x.shape
    shares = x / (h * w)
    denom = shares.sum(axis=(1, 2))
    if rule == "zplus":
        live = denom != 0.0
        ratio = np.where(live, r_out / np.where(live, denom, 1.0), 0.0)
        r_in = shares * ratio[:, None, None]
        dead = ~live
        if dead.any():
            r_in[dead] += (r_out[dead] / (h * w))[:, None, None]
        return r_in
    if rule == "epsilon":
        return shares * (r_out / _eps_stabilize(denom, epsilon))[:, None, None]
    raise ValueError(f"unknown rule {rule!r}")


def passthrough(r: np.ndarray) -> np.ndarray:
    """ReLU and BN relevance rule: unchanged."""
    return _as64(r)


def split_relevance(r, h_s, h_m, splitting: str, include_identity: bool,
                    skip_is_identity: bool) -> tuple[np.ndarray, np.ndarray]:
    """Divide merge-point relevance into skip and main shares.

    The two shares always recombine to the input exactly (the main share is
    computed as the complement); where both pre-merge magnitudes vanish the
    ratio split degenerates and falls back to the symmetric split.
    """
    r = _as64(r)
    h_s = _as64(h_s)
    h_m = _as64(h_m)
    if not (r.shape == h_s.shape == h_m.shape):
        raise ops.ShapeMismatch(
            f"split_relevance shapes differ: r {r.shape}, h_s {h_s.shape}, h_m {h_m.shape}")
    if splitting not in SPLITTINGS:
        raise ValueError(f"splitting must be one of {SPLITTINGS}, got {splitting!r}")

    if skip_is_identity and not include_identity:
        return np.zeros_like(r), r.copy()
    if splitting == "symmetric":
        half = 0.5 * r
        return half, r - half
    a = np.abs(h_s)
    total = a + np.abs(h_m)
    degenerate = total < RATIO_DENOM_GUARD
    frac = a / np.where(degenerate, 1.0, total)  # h_m == 0 gives exactly 1
    r_s = np.where(degenerate, 0.5 * r, r * frac)
    return r_s, r - r_s


def node_backward(trace: NodeTrace, r: np.ndarray, rule: str,
                  epsilon: float) -> np.ndarray:
    """Backward relevance through one traced node."""
    kind = trace.spec.kind
    if kind == "conv":
        return lrp_conv(trace.x, trace.weight, trace.spec.stride, trace.spec.padding,
                        r, rule, epsilon)
    if kind == "fc":
        return lrp_linear(trace.x, trace.weight, r, rule, epsilon)
    if kind == "gap":
        return lrp_gap(trace.x, r, rule, epsilon)
    if kind == "maxpool":
        if trace.pool_indices is None:
            raise LookupError("maxpool trace is missing its cached winner indices")
        return lrp_maxpool(trace.pool_indices, r, trace.x.shape)
    if kind in ("bn", "relu"):
        r = passthrough(r)
        if r.shape != trace.x.shape:
            raise ops.ShapeMismatch(
                f"{kind} relevance shape {r.shape} != activation shape {trace.x.shape}")
        return r
    if kind == "softmax":
        raise ValueError("relevance never propagates through softmax; "
                         "it only generates the seed")
    raise ValueError(f"unknown node kind {kind!r}")


def propagate_bottleneck(trace: BlockTrace, r, config: RuleConfig,
                         rule: str | None = None) -> np.ndarray:
    """Backward relevance through one bottleneck block.

    The post-merge ReLU passes relevance through; the merge splits it between
    skip and main; each side is propagated to the block input and the two
    flows are summed there.
    """
    if trace.h_s is None or trace.h_m is None or trace.main is None:
        raise LookupError("block trace is missing cached activations")
    if len(trace.main) != len(trace.spec.main):
        raise LookupError("block trace does not cover the whole main path")
    rule = config.rule_for_block(0) if rule is None else rule

    r = passthrough(r)  # post-merge relu
    r_s, r_m = split_relevance(r, trace.h_s, trace.h_m, config.splitting,
                               config.include_identity, trace.spec.identity_skip)
    for node_trace in reversed(trace.main):
        r_m = node_backward(node_trace, r_m, rule, config.epsilon)
    if trace.spec.identity_skip:
        r_skip = r_s
    else:
        if trace.skip is None or len(trace.skip) != 2:
            raise LookupError("block trace is missing the projection skip cache")
        for node_trace in reversed(trace.skip):
            r_s = node_backward(node_trace, r_s, rule, config.epsilon)
        r_skip = r_s
    return r_m + r_skip


def channel_sum(r0: np.ndarray) -> np.ndarray:
    """Collapse input relevance C x H x W to the H x W attribution values."""
    r0 = _as64(r0)
    if r0.ndim != 3:
        raise ops.ShapeMismatch(f"channel_sum expects C x H x W, got shape {r0.shape}")
    return r0.sum(axis=0)


def heat_quantize(raw, bins: int, mode: str = "paper") -> np.ndarray:
    """Quantize a map into at most ``bins`` levels, preserving the value order.

    ``paper`` scales the bin index by the bin count; ``binwidth`` scales it by
    the bin width. Both share bin boundaries, so they rank pixels identically.
    A constant map is returned unchanged; the maximum lands in the top bin.
    """
    raw = _as64(raw)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if mode not in ("paper", "binwidth"):
        raise ValueError(f"quantize mode must be paper or binwidth, got {mode!r}")
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return raw.copy()
    step = (hi - lo) / bins
    idx = np.minimum(np.floor((raw - lo) / step), bins - 1)
    scale = float(bins) if mode == "paper" else step
    return lo + idx * scale


# ---------------------------------------------------------------------------
# Whole-network explanation
# ---------------------------------------------------------------------------

CHECKPOINT_SEED = "seed"
CHECKPOINT_INPUT = "network_input"


def block_input_label(block_index: int) -> str:
    """Checkpoint label for the input of the (1-based) n-th block."""
    return f"block_{block_index}_input"


def explain(graph: ModelGraph, sample: ImageSample, class_index: int,
            config: RuleConfig = RuleConfig()) -> tuple[AttributionMap, RelevanceState]:
    """Forward the sample, then propagate relevance for ``class_index`` back to
    the pixels. Records conservation checkpoints at the seed, at every block
    input, and at the network input.
    """
    if not 0 <= class_index < graph.num_classes:
        raise ValueError(f"class {class_index} out of range for "
                         f"{graph.num_classes} classes")
    if config.rule == "mixture" and config.mixture_boundary > len(graph.blocks):
        raise ValueError(f"mixture_boundary {config.mixture_boundary} exceeds "
                         f"{len(graph.blocks)} blocks")

    trace: ForwardTrace = run_forward(graph, sample.normalized, want_trace=True)
    r = seed_relevance(trace.probs, class_index)
    state = RelevanceState(current=r)
    state.record(CHECKPOINT_SEED, r)

    head_rule = config.rule_for_head()
    for node_trace in reversed(trace.head):
        if node_trace.spec.kind == "softmax":
            continue
        r = node_backward(node_trace, r, head_rule, config.epsilon)

    for b in range(len(trace.blocks) - 1, -1, -1):
        r = propagate_bottleneck(trace.blocks[b], r, config, config.rule_for_block(b))
        state.record(block_input_label(b + 1), r)

    stem_rule = config.rule_for_stem()
    for node_trace in reversed(trace.stem):
        r = node_backward(node_trace, r, stem_rule, config.epsilon)
    state.record(CHECKPOINT_INPUT, r)

    raw = channel_sum(r)
    quantized = None
    if config.quantize != "off":
        quantized = heat_quantize(raw, config.bins, config.quantize)
    amap = AttributionMap(raw=raw, quantized=quantized,
                          quantize_mode=config.quantize, bins=config.bins)
    return amap, state
