"""DeepLIFT contribution scores relative to a reference input.

Affine layers (dense, conv1d, avgpool1d, inference batchnorm) use the linear
rule: each weighted input difference ``w_i * dx_i`` feeds the positive or the
negative part of the output difference according to its sign. Single-input
nonlinearities (ReLU, sigmoid) use RevealCancel, which averages the two
orders in which the positive and negative parts of the input difference can
be applied. Multipliers flow backwards along separate positive and negative
tracks and are composed with the chain rule; contributions are multiplier
times input difference and sum to the output difference.

All rules are batched over a leading patient axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mortnet.layers import AFFINE_KINDS, BatchNorm, Layer, _conv_patches, avgpool1d_forward, same_padding
from mortnet.model import Network

TARGETS = ("logit", "probability")


def _safe_ratio(num, den):
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _split_signed(values):
    return np.where(values > 0, values, 0.0), np.where(values < 0, values, 0.0)


# ---------------------------------------------------------------------------
# single-layer rules


@dataclass
class LinearRuleResult:
    """Linear-rule decomposition for an explicit (out, in) weight matrix.

    ``c_pp[j, i]`` is the contribution of dx_i+ to dy_j+, ``c_np`` of dx_i- to
    dy_j+, ``c_pn`` of dx_i+ to dy_j- and ``c_nn`` of dx_i- to dy_j-.
    """

    dy_pos: np.ndarray
    dy_neg: np.ndarray
    c_pp: np.ndarray
    c_np: np.ndarray
    c_pn: np.ndarray
    c_nn: np.ndarray

    @property
    def contributions(self) -> np.ndarray:
        return self.c_pp + self.c_np + self.c_pn + self.c_nn


def affine_matrix(layer: Layer, in_shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Explicit ``(W, b)`` for an affine layer acting on flattened single inputs."""
    if layer.kind not in AFFINE_KINDS:
        raise ValueError(f"{layer.kind} is not affine; the linear rule does not apply")
    size = int(np.prod(in_shape))
    basis = np.eye(size).reshape((size,) + tuple(in_shape))
    zero = np.zeros((1,) + tuple(in_shape))
    b = layer.forward(zero, training=False).reshape(-1)
    w = layer.forward(basis, training=False).reshape(size, -1) - b
    return w.T, b


def linear_rule(weights, dx_pos, dx_neg) -> LinearRuleResult:
    """Apply the linear rule for ``y = W x + b`` given split input differences.

    ``weights`` is ``(out, in)`` or a single weight vector; an affine
    ``Layer`` is also accepted and expanded with :func:`affine_matrix`.
    """
    dx_pos = np.asarray(dx_pos, dtype=np.float64).ravel()
    dx_neg = np.asarray(dx_neg, dtype=np.float64).ravel()
    if isinstance(weights, Layer):
        weights = affine_matrix(weights, np.shape(dx_pos))[0]
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if w.shape[1] != dx_pos.size:
        raise ValueError(f"weights {w.shape} do not match {dx_pos.size} inputs")
    wdx = w * (dx_pos + dx_neg)
    up = (wdx > 0).astype(np.float64)
    down = (wdx < 0).astype(np.float64)
    res = LinearRuleResult(
        dy_pos=(up * wdx).sum(axis=1), dy_neg=(down * wdx).sum(axis=1),
        c_pp=up * w * dx_pos, c_np=up * w * dx_neg,
        c_pn=down * w * dx_pos, c_nn=down * w * dx_neg)
    return res


def reveal_cancel(f: Callable, x0, dx_pos, dx_neg):
    """RevealCancel split of ``f(x0 + dx) - f(x0)`` for a single-input nonlinearity.

    Returns ``(dy_pos, dy_neg, m_pos, m_neg)``. A zero input part gets a zero
    output part, and its multiplier is defined as 0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    dx_pos = np.asarray(dx_pos, dtype=np.float64)
    dx_neg = np.asarray(dx_neg, dtype=np.float64)
    f0 = f(x0)
    f_pos = f(x0 + dx_pos)
    f_neg = f(x0 + dx_neg)
    f_both = f(x0 + (dx_pos + dx_neg))
    dy_pos = 0.5 * (f_pos - f0) + 0.5 * (f_both - f_neg)
    dy_neg = 0.5 * (f_neg - f0) + 0.5 * (f_both - f_pos)
    dy_pos = np.where(dx_pos == 0, 0.0, dy_pos)
    dy_neg = np.where(dx_neg == 0, 0.0, dy_neg)
    return dy_pos, dy_neg, _safe_ratio(dy_pos, dx_pos), _safe_ratio(dy_neg, dx_neg)


@dataclass
class Multiplier:
    """Multipliers between two layers, split by track: ``pn[i, j] = m(dx_i+ -> dy_j-)``."""

    pp: np.ndarray
    pn: np.ndarray
    np_: np.ndarray
    nn: np.ndarray

    def __matmul__(self, other: "Multiplier") -> "Multiplier":
        return Multiplier(self.pp @ other.pp + self.pn @ other.np_,
                          self.pp @ other.pn + self.pn @ other.nn,
                          self.np_ @ other.pp + self.nn @ other.np_,
                          self.np_ @ other.pn + self.nn @ other.nn)

    def to_target(self) -> tuple[np.ndarray, np.ndarray]:
        """(m_pos, m_neg) toward a single output neuron whose two parts both count fully."""
        return (self.pp + self.pn).sum(axis=1), (self.np_ + self.nn).sum(axis=1)


def chain_multipliers(multipliers: Sequence[Multiplier]) -> Multiplier:
    """Compose per-layer multipliers input -> output: m_xz = sum_j m_xy_j m_y_jz."""
    if not multipliers:
        raise ValueError("no layer multipliers to chain")
    if any(m is None for m in multipliers):
        raise ValueError("missing multiplier for a layer on the path")
    out = multipliers[0]
    for m in multipliers[1:]:
        out = out @ m
    return out


def layer_multiplier(layer: Layer, ref_in, dx_pos, dx_neg) -> tuple[Multiplier, np.ndarray, np.ndarray]:
    """Explicit multiplier matrices for one unbatched layer, plus its output parts."""
    ref_in = np.asarray(ref_in, dtype=np.float64)
    shape = ref_in.shape
    n = ref_in.size
    if layer.kind in ("dropout", "flatten"):
        eye = np.eye(n)
        zero = np.zeros((n, n))
        return Multiplier(eye, zero, zero, eye), dx_pos.ravel(), dx_neg.ravel()
    if layer.kind in AFFINE_KINDS:
        w, _ = affine_matrix(layer, shape)
        res = linear_rule(w, dx_pos, dx_neg)
        wdx = w * (dx_pos + dx_neg).ravel()
        up = np.where(wdx > 0, w, 0.0).T
        down = np.where(wdx < 0, w, 0.0).T
        return Multiplier(up, down, up, down), res.dy_pos, res.dy_neg
    if layer.kind in ("relu", "sigmoid"):
        dyp, dyn, mp, mn = reveal_cancel(layer.fn, ref_in.ravel(), dx_pos.ravel(), dx_neg.ravel())
        zero = np.zeros((n, n))
        return Multiplier(np.diag(mp), zero, zero, np.diag(mn)), dyp, dyn
    raise ValueError(f"no DeepLIFT rule for layer kind {layer.kind!r}")


# ---------------------------------------------------------------------------
# batched propagation through a Network


@dataclass
class _Step:
    layer: Layer
    ref_in: np.ndarray
    dpos_in: np.ndarray
    dneg_in: np.ndarray
    ref_out: np.ndarray
    dpos_out: np.ndarray
    dneg_out: np.ndarray


@dataclass
class DeltaState:
    """Reference activations and split differences at every layer of a paired pass."""

    input_delta: np.ndarray
    branches: list[list[_Step]]
    trunk: list[_Step]
    target: str
    reference_output: np.ndarray
    actual_output: np.ndarray
    branch_channels: list[int] = field(default_factory=list)

    @property
    def delta_t(self) -> np.ndarray:
        return self.actual_output - self.reference_output

    def steps(self):
        for b in self.branches:
            yield from b
        yield from self.trunk


def _conv_products(layer, dx):
    k = layer.params["kernel"]
    patches = _conv_patches(dx, k.shape[2], layer.padding)  # (N, T, CK)
    return patches[:, :, None, :] * k.reshape(k.shape[0], -1)[None, None]  # (N, T, F, CK)


def _forward_step(layer: Layer, ref, dpos, dneg) -> _Step:
    kind = layer.kind
    if kind == "dropout":
        return _Step(layer, ref, dpos, dneg, ref, dpos, dneg)
    ref_out = layer.forward(ref, training=False)
    if kind == "flatten":
        n = ref.shape[0]
        return _Step(layer, ref, dpos, dneg, ref_out, dpos.reshape(n, -1), dneg.reshape(n, -1))
    dx = dpos + dneg
    if kind in ("relu", "sigmoid"):
        yp, yn, _, _ = reveal_cancel(layer.fn, ref, dpos, dneg)
    elif kind == "dense":
        prod = dx[:, None, :] * layer.params["weight"][None]
        yp, yn = (s.sum(axis=-1) for s in _split_signed(prod))
    elif kind == "conv1d":
        yp, yn = (s.sum(axis=-1).transpose(0, 2, 1) for s in _split_signed(_conv_products(layer, dx)))
    elif kind == "avgpool1d":
        # weights 1/window > 0, so the sign of w*dx is the sign of dx
        pos, neg = _split_signed(dx)
        yp = avgpool1d_forward(pos, layer.window, layer.stride)
        yn = avgpool1d_forward(neg, layer.window, layer.stride)
    elif kind == "batchnorm":
        a, _ = layer.affine()
        yp, yn = _split_signed(dx * a.reshape((1, -1) + (1,) * (dx.ndim - 2)))
    else:
        raise ValueError(f"no DeepLIFT rule for layer kind {kind!r}")
    return _Step(layer, ref, dpos, dneg, ref_out, yp, yn)


def _backward_step(step: _Step, m_pos, m_neg):
    """Map (output) multipliers to (input) multipliers for one layer."""
    layer = step.layer
    kind = layer.kind
    if kind == "dropout":
        return m_pos, m_neg
    if kind == "flatten":
        return m_pos.reshape(step.ref_in.shape), m_neg.reshape(step.ref_in.shape)
    if kind in ("relu", "sigmoid"):
        return (_safe_ratio(step.dpos_out, step.dpos_in) * m_pos,
                _safe_ratio(step.dneg_out, step.dneg_in) * m_neg)
    dx = step.dpos_in + step.dneg_in
    if kind == "dense":
        w = layer.params["weight"]
        prod = dx[:, None, :] * w[None]
        sel = np.where(prod > 0, m_pos[:, :, None], np.where(prod < 0, m_neg[:, :, None], 0.0))
        m = (sel * w[None]).sum(axis=1)
    elif kind == "conv1d":
        k = layer.params["kernel"]
        f, c, width = k.shape
        prod = _conv_products(layer, dx)
        mp = m_pos.transpose(0, 2, 1)[:, :, :, None]
        mn = m_neg.transpose(0, 2, 1)[:, :, :, None]
        sel = np.where(prod > 0, mp, np.where(prod < 0, mn, 0.0))
        m_patch = (sel * k.reshape(f, -1)[None, None]).sum(axis=2)  # (N, T_out, CK)
        n, t_out, _ = m_patch.shape
        m_patch = m_patch.reshape(n, t_out, c, width)
        left, right = same_padding(width) if layer.padding == "same" else (0, 0)
        t_in = dx.shape[2]
        acc = np.zeros((n, c, t_in + left + right))
        for j in range(width):
            acc[:, :, j:j + t_out] += m_patch[:, :, :, j].transpose(0, 2, 1)
        m = acc[:, :, left:left + t_in]
    elif kind == "avgpool1d":
        m = np.zeros_like(dx)
        t_out = m_pos.shape[2]
        span = layer.stride * (t_out - 1) + 1
        for j in range(layer.window):
            seg = dx[:, :, j:j + span:layer.stride]
            m[:, :, j:j + span:layer.stride] += np.where(
                seg > 0, m_pos, np.where(seg < 0, m_neg, 0.0)) / layer.window
    elif kind == "batchnorm":
        a, _ = layer.affine()
        a = a.reshape((1, -1) + (1,) * (dx.ndim - 2))
        adx = a * dx
        m = a * np.where(adx > 0, m_pos, np.where(adx < 0, m_neg, 0.0))
    else:
        raise ValueError(f"no DeepLIFT rule for layer kind {kind!r}")
    # the linear rule gives both input parts the same multiplier
    return m, m


def _prepare(network: Network, x, reference):
    x = np.asarray(x, dtype=np.float64)
    single = network.input_shape is not None and x.shape == network.input_shape
    if single:
        x = x[None]
    ref = np.zeros_like(x) if reference is None else np.asarray(reference, dtype=np.float64)
    if ref.shape == x.shape[1:]:
        ref = np.broadcast_to(ref, x.shape).copy()
    if ref.shape != x.shape:
        raise ValueError(f"reference shape {ref.shape} does not match input {x.shape}")
    if network.input_shape is not None and x.shape[1:] != network.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {network.input_shape}")
    return x, ref, single


def forward_pair(network: Network, x, reference=None, target: str = "logit") -> DeltaState:
    """Run actual and reference inputs side by side, recording split differences."""
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    if not network.batchnorm_ready:
        raise RuntimeError("network has no batchnorm running statistics; train or calibrate first")
    x, ref, _ = _prepare(network, x, reference)
    delta = x - ref
    dpos, dneg = _split_signed(delta)
    branch_steps: list[list[_Step]] = []
    if network.branches:
        outs = []
        for branch in network.branches:
            steps = []
            r, p, q = ref, dpos, dneg
            for layer in branch:
                s = _forward_step(layer, r, p, q)
                steps.append(s)
                r, p, q = s.ref_out, s.dpos_out, s.dneg_out
            branch_steps.append(steps)
            outs.append((r, p, q))
        r, p, q = (np.concatenate(parts, axis=1) for parts in zip(*outs))
        channels = [o[0].shape[1] for o in outs]
    else:
        r, p, q = ref, dpos, dneg
        channels = []
    trunk_layers = network.trunk
    if target == "logit" and network.has_sigmoid:
        trunk_layers = trunk_layers[:-1]
    trunk_steps = []
    for layer in trunk_layers:
        s = _forward_step(layer, r, p, q)
        trunk_steps.append(s)
        r, p, q = s.ref_out, s.dpos_out, s.dneg_out
    if r.reshape(r.shape[0], -1).shape[1] != 1:
        raise ValueError("attribution target must be a single output neuron")
    ref_out = r.reshape(-1)
    act_out = network.forward(x, training=False, logits=(target == "logit"))
    return DeltaState(delta, branch_steps, trunk_steps, target, ref_out, np.atleast_1d(act_out),
                      channels)


def input_multipliers(state: DeltaState) -> np.ndarray:
    """Multipliers from every input cell to the target (one array, same shape as the input)."""
    last = state.trunk[-1] if state.trunk else state.branches[0][-1]
    m_pos = np.ones_like(last.dpos_out)
    m_neg = np.ones_like(last.dneg_out)
    for step in reversed(state.trunk):
        m_pos, m_neg = _backward_step(step, m_pos, m_neg)
    if not state.branches:
        return m_pos, m_neg
    total_pos = np.zeros_like(state.input_delta)
    total_neg = np.zeros_like(state.input_delta)
    start = 0
    for steps, nc in zip(state.branches, state.branch_channels):
        bp, bn = m_pos[:, start:start + nc], m_neg[:, start:start + nc]
        start += nc
        for step in reversed(steps):
            bp, bn = _backward_step(step, bp, bn)
        total_pos += bp
        total_neg += bn
    return total_pos, total_neg


@dataclass
class AttributionMap:
    contributions: np.ndarray  # (C, T) signed
    reference_output: float
    actual_output: float
    delta_t: float
    target: str
    patient_id: str | None = None

    @property
    def residual(self) -> float:
        """|sum of contributions - delta_t|; zero up to rounding by construction."""
        return float(abs(self.contributions.sum() - self.delta_t))


def attribute_batch(network: Network, x, reference=None, target: str = "logit",
                    chunk: int = 16) -> list[AttributionMap]:
    x = np.asarray(x, dtype=np.float64)
    maps = []
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        rb = None if reference is None else np.broadcast_to(reference, xb.shape[1:])
        state = forward_pair(network, xb, rb, target)
        mp, mn = input_multipliers(state)
        dpos, dneg = _split_signed(state.input_delta)
        contrib = mp * dpos + mn * dneg
        for j in range(len(xb)):
            maps.append(AttributionMap(contrib[j], float(state.reference_output[j]),
                                       float(state.actual_output[j]), float(state.delta_t[j]), target))
    return maps


def attribute(network: Network, patient, reference=None, target: str = "logit") -> AttributionMap:
    """DeepLIFT map for one patient grid (or PatientMatrix) against ``reference``.

    The default reference is the all-zeros grid, i.e. the training mean after
    standardization.
    """
    grid = np.asarray(getattr(patient, "grid", patient), dtype=np.float64)
    x, ref, single = _prepare(network, grid, reference)
    if x.shape[0] != 1:
        raise ValueError("attribute takes one patient; use attribute_batch for several")
    amap = attribute_batch(network, x, ref[0], target)[0]
    amap.patient_id = getattr(patient, "patient_id", None)
    return amap


def _group_masks(groups, shape) -> list[np.ndarray]:
    masks = []
    for g in groups:
        g = np.asarray(g)
        if g.dtype == bool:
            if g.shape != shape:
                raise ValueError(f"group mask shape {g.shape} != grid shape {shape}")
            masks.append(g)
        else:
            m = np.zeros(int(np.prod(shape)), dtype=bool)
            m[g.ravel()] = True
            masks.append(m.reshape(shape))
    if not masks:
        raise ValueError("group partition is empty")
    return masks


def sampled_shapley(predict_fn: Callable[[np.ndarray], np.ndarray], patient, reference, groups,
                    n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation-sampling Shapley estimate per group.

    Absent groups sit at the reference. ``predict_fn`` maps a batch of grids
    to a 1-D array of outputs. Each sampled permutation contributes one
    telescoping chain of marginal differences, so every estimate sums
    exactly to ``f(patient) - f(reference)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(getattr(patient, "grid", patient), dtype=np.float64)
    ref = np.broadcast_to(np.asarray(reference, dtype=np.float64), x.shape)
    masks = _group_masks(groups, x.shape)
    k = len(masks)
    totals = np.zeros(k)
    for _ in range(n_samples):
        order = rng.permutation(k)
        chain = np.empty((k + 1,) + x.shape)
        cur = ref.copy()
        chain[0] = cur
        for pos, g in enumerate(order, start=1):
            cur = np.where(masks[g], x, cur)
            chain[pos] = cur
        vals = np.asarray(predict_fn(chain), dtype=np.float64).reshape(-1)
        totals[order] += np.diff(vals)
    return totals / n_samples


def group_sums(contributions: np.ndarray, groups) -> np.ndarray:
    masks = _group_masks(groups, contributions.shape)
    return np.array([contributions[m].sum() for m in masks])
