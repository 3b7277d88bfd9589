"""Minimal reverse-mode tape over the engine's own kernels.

The differentiable encoder mirrors the inference path operation for
operation (same kernels, same operand order), so recorded forward values are
bit-identical to the plain forward; a test pins that equivalence. Top-k
selection indices are treated as constants of the recorded forward, while
fusion weights keep their full dependence on the attention map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels, reorg
from .errors import UsageError
from .kernels import LAYERNORM_EPS
from .model import WeightSet
from .reorg import ReorgPlan, SelectionStrategy
from .tokens import TokenSequence

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Node:
    """One recorded value: how it was computed and how to push gradients back."""

    __slots__ = ("value", "parents", "fwd", "vjps", "name")

    def __init__(self, value, parents=(), fwd=None, vjps=(), name=None):
        self.value = value
        self.parents = parents
        self.fwd = fwd
        self.vjps = vjps
        self.name = name


class Tape:
    """Recorded forward pass; supports exact replay and reverse-mode sweeps."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _record(self, value, parents, fwd, vjps, name=None) -> Node:
        node = Node(value, tuple(parents), fwd, tuple(vjps), name)
        self.nodes.append(node)
        return node

    # -- leaves ---------------------------------------------------------

    def leaf(self, value: np.ndarray, name: str | None = None) -> Node:
        return self._record(np.asarray(value, dtype=np.float64), (), None, (), name)

    # -- arithmetic -----------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        return self._record(a.value + b.value, (a, b),
                            lambda x, y: x + y,
                            (lambda g: g, lambda g: g))

    def add_bias(self, x: Node, b: Node) -> Node:
        return self._record(x.value + b.value, (x, b),
                            lambda xv, bv: xv + bv,
                            (lambda g: g, lambda g: g.sum(axis=0)))

    def scalar_div(self, x: Node, s: float) -> Node:
        return self._record(x.value / s, (x,),
                            lambda xv: xv / s,
                            (lambda g: g / s,))

    def matmul(self, a: Node, b: Node) -> Node:
        def vjp_a(g):
            return kernels.matmul(g, np.ascontiguousarray(b.value.T))

        def vjp_b(g):
            return kernels.matmul(np.ascontiguousarray(a.value.T), g)

        return self._record(kernels.matmul(a.value, b.value), (a, b),
                            kernels.matmul, (vjp_a, vjp_b))

    def matmul_nt(self, a: Node, b: Node) -> Node:
        """a @ b.T with the same kernel call order as the inference path."""
        def fwd(av, bv):
            return kernels.matmul(av, np.ascontiguousarray(bv.T))

        def vjp_a(g):
            return kernels.matmul(g, b.value)

        def vjp_b(g):
            return kernels.matmul(np.ascontiguousarray(g.T), a.value)

        return self._record(fwd(a.value, b.value), (a, b), fwd, (vjp_a, vjp_b))

    # -- nonlinearities ---------------------------------------------------

    def layernorm(self, x: Node, gamma: Node, beta: Node) -> Node:
        xv = x.value
        mean = xv.mean(axis=-1, keepdims=True)
        centered = xv - mean
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        normed = centered * inv_std

        def vjp_x(g):
            gg = g * gamma.value
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * normed).mean(axis=-1, keepdims=True)
            return (gg - m1 - normed * m2) * inv_std

        return self._record(
            kernels.layernorm(xv, gamma.value, beta.value), (x, gamma, beta),
            kernels.layernorm,
            (vjp_x,
             lambda g: (g * normed).sum(axis=0),
             lambda g: g.sum(axis=0)))

    def gelu(self, x: Node) -> Node:
        xv = x.value

        def vjp(g):
            cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
            pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT2PI
            return g * (cdf + xv * pdf)

        return self._record(kernels.gelu(xv), (x,), kernels.gelu, (vjp,))

    def softmax_rows(self, x: Node) -> Node:
        y = kernels.softmax_rows(x.value)

        def vjp(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return y * (g - dot)

        return self._record(y, (x,), kernels.softmax_rows, (vjp,))

    # -- shape ops --------------------------------------------------------

    def gather_rows(self, x: Node, idx: np.ndarray) -> Node:
        idx = np.asarray(idx, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(x.value)
            np.add.at(out, idx, g)
            return out

        return self._record(x.value[idx], (x,), lambda xv: xv[idx], (vjp,))

    def slice_cols(self, x: Node, lo: int, hi: int) -> Node:
        def vjp(g):
            out = np.zeros_like(x.value)
            out[:, lo:hi] = g
            return out

        return self._record(x.value[:, lo:hi], (x,), lambda xv: xv[:, lo:hi], (vjp,))

    def gather_cols(self, x: Node, idx: np.ndarray) -> Node:
        idx = np.asarray(idx, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(x.value)
            np.add.at(out.T, idx, g.T)
            return out

        return self._record(x.value[:, idx], (x,), lambda xv: xv[:, idx], (vjp,))

    def concat_rows(self, parts: list[Node]) -> Node:
        sizes = [p.value.shape[0] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def make_vjp(i):
            return lambda g: g[offsets[i]:offsets[i + 1]]

        return self._record(
            np.concatenate([p.value for p in parts], axis=0), tuple(parts),
            lambda *vals: np.concatenate(vals, axis=0),
            tuple(make_vjp(i) for i in range(len(parts))))

    def concat_cols(self, parts: list[Node]) -> Node:
        sizes = [p.value.shape[1] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def make_vjp(i):
            return lambda g: g[:, offsets[i]:offsets[i + 1]]

        return self._record(
            np.concatenate([p.value for p in parts], axis=1), tuple(parts),
            lambda *vals: np.concatenate(vals, axis=1),
            tuple(make_vjp(i) for i in range(len(parts))))

    def pick(self, x: Node, row: int, col: int) -> Node:
        def vjp(g):
            out = np.zeros_like(x.value)
            out[row:row + 1, col:col + 1] = g
            return out

        return self._record(x.value[row:row + 1, col:col + 1], (x,),
                            lambda xv: xv[row:row + 1, col:col + 1], (vjp,))

    # -- execution --------------------------------------------------------

    def replay(self) -> bool:
        """Re-run every recorded op; True iff all outputs reproduce bitwise."""
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node.fwd is None:
                values[id(node)] = node.value
                continue
            out = node.fwd(*[values[id(p)] for p in node.parents])
            if not np.array_equal(out, node.value):
                return False
            values[id(node)] = out
        return True


def backward(tape: Tape, output: Node, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from `output`; returns gradients keyed by node id.

    Without an explicit seed the output must be scalar-valued (a 1x1 node).
    """
    if seed is None:
        if output.value.size != 1:
            raise UsageError("backward without a seed requires a scalar output")
        seed = np.ones_like(output.value)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return grads


# ---------------------------------------------------------------------------
# Differentiable encoder (mirrors model.encode operation for operation)
# ---------------------------------------------------------------------------


@dataclass
class RecordedForward:
    """A taped forward pass with handles into its leaves and outputs."""

    tape: Tape
    input_node: Node
    weight_nodes: dict[str, Node]
    logits: Node | None = None
    loss: Node | None = None
    selection_events: list[tuple[int, ...]] = field(default_factory=list)

    def selection_signature(self) -> tuple:
        return tuple(frozenset(kept) for kept in self.selection_events)

    def gradients(self, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        """Gradients for every leaf, zero-filled where unreachable."""
        out = {"tokens": grads.get(id(self.input_node),
                                   np.zeros_like(self.input_node.value))}
        for name, node in self.weight_nodes.items():
            out[name] = grads.get(id(node), np.zeros_like(node.value))
        return out


def weight_leaves(tape: Tape, w: WeightSet) -> dict[str, Node]:
    return {name: tape.leaf(tensor, name) for name, tensor in w.tensors.items()}


def _attention_block(tape: Tape, x: Node, wn: dict[str, Node], prefix: str,
                     heads: int) -> tuple[Node, Node]:
    """Pre-norm MHSA with residual; returns (output, head-averaged CLS row)."""
    d = x.value.shape[1]
    dh = d // heads
    scale = math.sqrt(dh)
    xn = tape.layernorm(x, wn[prefix + "norm1.gamma"], wn[prefix + "norm1.beta"])
    q = tape.add_bias(tape.matmul(xn, wn[prefix + "attn.q.weight"]), wn[prefix + "attn.q.bias"])
    k = tape.add_bias(tape.matmul(xn, wn[prefix + "attn.k.weight"]), wn[prefix + "attn.k.bias"])
    v = tape.add_bias(tape.matmul(xn, wn[prefix + "attn.v.weight"]), wn[prefix + "attn.v.bias"])

    contexts = []
    cls_rows = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = tape.slice_cols(q, lo, hi)
        kh = tape.slice_cols(k, lo, hi)
        vh = tape.slice_cols(v, lo, hi)
        attn = tape.softmax_rows(tape.scalar_div(tape.matmul_nt(qh, kh), scale))
        contexts.append(tape.matmul(attn, vh))
        cls_rows.append(tape.gather_rows(attn, np.array([0])))
    context = tape.concat_cols(contexts)
    out = tape.add_bias(tape.matmul(context, wn[prefix + "attn.proj.weight"]),
                        wn[prefix + "attn.proj.bias"])
    x = tape.add(x, out)

    acc = cls_rows[0]
    for h in range(1, heads):
        acc = tape.add(acc, cls_rows[h])
    avg_cls_row = tape.scalar_div(acc, float(heads))
    return x, avg_cls_row


def _ffn_block(tape: Tape, x: Node, wn: dict[str, Node], prefix: str) -> Node:
    xn = tape.layernorm(x, wn[prefix + "norm2.gamma"], wn[prefix + "norm2.beta"])
    hidden = tape.gelu(tape.add_bias(tape.matmul(xn, wn[prefix + "ffn.fc1.weight"]),
                                     wn[prefix + "ffn.fc1.bias"]))
    out = tape.add_bias(tape.matmul(hidden, wn[prefix + "ffn.fc2.weight"]),
                        wn[prefix + "ffn.fc2.bias"])
    return tape.add(x, out)


def _reorg_block(tape: Tape, x: Node, avg_cls_row: Node, keep_rate: float,
                 plan: ReorgPlan, rng, record: RecordedForward) -> Node:
    scores = tape.slice_cols(avg_cls_row, 1, avg_cls_row.value.shape[1])
    kept_idx, dropped_idx = reorg.select_tokens(
        scores.value[0], keep_rate, plan.strategy, rng)
    record.selection_events.append(tuple(int(i) for i in kept_idx))

    parts = [tape.gather_rows(x, np.array([0])), tape.gather_rows(x, kept_idx + 1)]
    if plan.fusion and dropped_idx.size > 0:
        weights = tape.gather_cols(scores, dropped_idx)
        gathered = tape.gather_rows(x, dropped_idx + 1)
        parts.append(tape.matmul(weights, gathered))
    return tape.concat_rows(parts)


def record_encoder(tape: Tape, x: Node, wn: dict[str, Node], heads: int, depth: int,
                   plan: ReorgPlan | None, rng, record: RecordedForward,
                   first_layer: int = 1, last_layer: int | None = None,
                   resume_at_ffn: bool = False,
                   stop_after_reorg_of: int | None = None) -> Node:
    """Record encoder layers [first_layer, last_layer] onto the tape.

    `resume_at_ffn` starts the first layer at its feed-forward half;
    `stop_after_reorg_of` stops right after that layer's reorganization,
    before its feed-forward half. Both exist so tests can split a forward
    at a reorganization boundary.
    """
    if last_layer is None:
        last_layer = depth
    for layer_idx in range(first_layer, last_layer + 1):
        prefix = f"layers.{layer_idx - 1}."
        if not (resume_at_ffn and layer_idx == first_layer):
            x, avg_cls_row = _attention_block(tape, x, wn, prefix, heads)
            rate = plan.rate_for(layer_idx) if plan is not None else None
            if rate is not None:
                x = _reorg_block(tape, x, avg_cls_row, rate, plan, rng, record)
            if stop_after_reorg_of == layer_idx:
                return x
        x = _ffn_block(tape, x, wn, prefix)
    return x


def record_head(tape: Tape, x: Node, wn: dict[str, Node]) -> Node:
    cls_row = tape.gather_rows(x, np.array([0]))
    cls_row = tape.layernorm(cls_row, wn["final_norm.gamma"], wn["final_norm.beta"])
    return tape.add_bias(tape.matmul(cls_row, wn["head.weight"]), wn["head.bias"])


def record_forward(tokens, w: WeightSet, plan: ReorgPlan | None = None, *,
                   rng=None, loss_index: int | None = 0) -> RecordedForward:
    """Tape a full forward over an embedded token sequence.

    The loss node picks one logit (`loss_index`); pass None to skip it.
    """
    token_values = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    if plan is not None and plan.strategy is SelectionStrategy.RANDOM and rng is None:
        raise UsageError("random selection requires an Rng")
    tape = Tape()
    wn = weight_leaves(tape, w)
    x = tape.leaf(token_values, "tokens")
    record = RecordedForward(tape=tape, input_node=x, weight_nodes=wn)
    out = record_encoder(tape, x, wn, w.config.heads, w.config.depth, plan, rng, record)
    record.logits = record_head(tape, out, wn)
    if loss_index is not None:
        record.loss = tape.pick(record.logits, 0, loss_index)
    return record
