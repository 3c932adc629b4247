"""Random network factories and independent reference implementations for tests."""

from __future__ import annotations

import numpy as np

from mortnet.layers import AvgPool1D, BatchNorm, Conv1D, Dense, Dropout, Flatten, ReLU, Sigmoid
from mortnet.model import ModelConfig, Network, build_model


# ---------------------------------------------------------------------------
# naive oracles


def naive_conv1d(x, kernels, bias):
    """Same-padded cross-correlation by explicit loops over (filter, time, channel, tap)."""
    c, t = x.shape
    f, _, k = kernels.shape
    left = (k - 1) // 2
    out = np.zeros((f, t))
    for fi in range(f):
        for ti in range(t):
            acc = bias[fi]
            for ci in range(c):
                for j in range(k):
                    src = ti - left + j
                    if 0 <= src < t:
                        acc += kernels[fi, ci, j] * x[ci, src]
            out[fi, ti] = acc
    return out


def naive_avgpool(x, window, stride):
    c, t = x.shape
    n_out = (t - window) // stride + 1
    out = np.zeros((c, n_out))
    for ci in range(c):
        for o in range(n_out):
            s = 0.0
            for j in range(window):
                s += x[ci, o * stride + j]
            out[ci, o] = s / window
    return out


def naive_matvec(w, x, b):
    out = []
    for i in range(w.shape[0]):
        s = b[i]
        for j in range(w.shape[1]):
            s += w[i, j] * x[j]
        out.append(s)
    return np.array(out)


def pairwise_auc(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties counted half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def brute_force_shapley(n, v):
    """Shapley values by averaging marginal contributions over all n! orderings."""
    from itertools import permutations
    from math import factorial

    vals = np.zeros(n)
    for order in permutations(range(n)):
        s = frozenset()
        for p in order:
            vals[p] += v(s | {p}) - v(s)
            s = s | {p}
    return vals / factorial(n)


# ---------------------------------------------------------------------------
# random networks


def _dense(rng, n_out, n_in, bias_scale=0.5):
    return Dense(rng.normal(size=(n_out, n_in)) / np.sqrt(n_in), rng.normal(size=n_out) * bias_scale)


def _ready_bn(rng, n):
    bn = BatchNorm(n)
    bn.params["scale"][:] = rng.uniform(0.5, 1.5, n)
    bn.params["shift"][:] = rng.normal(size=n) * 0.3
    bn.set_running_stats(rng.normal(size=n) * 0.3, rng.uniform(0.5, 2.0, n))
    return bn


def random_mlp(rng, d, hidden, sigmoid_out=True, hidden_act="relu"):
    layers, fan = [], d
    for h in hidden:
        layers += [_dense(rng, h, fan), ReLU() if hidden_act == "relu" else Sigmoid()]
        fan = h
    layers.append(_dense(rng, 1, fan, 0.1))
    if sigmoid_out:
        layers.append(Sigmoid())
    return Network(None, layers, input_shape=(d,))


def random_affine_mlp(rng, d, depth):
    """Dense / batchnorm / dropout stack with no nonlinearity."""
    layers, fan = [], d
    for _ in range(depth):
        h = int(rng.integers(2, 8))
        layers.append(_dense(rng, h, fan))
        if rng.random() < 0.5:
            layers.append(_ready_bn(rng, h))
        if rng.random() < 0.5:
            layers.append(Dropout(0.55))
        fan = h
    layers.append(_dense(rng, 1, fan))
    return Network(None, layers, input_shape=(d,))


def random_conv_net(rng, channels=3, horizon=12, filters=2, scales=(3, 6, 12), hidden=4,
                    activation=True, pool=True, batchnorm=True, out_sigmoid=True):
    """Small branched conv network; with ``activation=False`` it is purely affine."""
    branches = []
    for w in scales:
        conv = Conv1D(rng.normal(size=(filters, channels, w)) / np.sqrt(channels * w),
                      rng.normal(size=filters) * 0.3)
        branches.append([conv, ReLU()] if activation else [conv])
    merged = filters * len(scales)
    trunk = []
    t = horizon
    if pool:
        p = AvgPool1D(3)
        trunk.append(p)
        t = p.out_length(horizon)
    trunk.append(Dropout(0.55))
    if batchnorm:
        trunk.append(_ready_bn(rng, merged))
    trunk.append(Flatten())
    trunk.append(_dense(rng, hidden, merged * t))
    if activation:
        trunk.append(ReLU())
    if batchnorm:
        trunk.append(_ready_bn(rng, hidden))
    trunk.append(_dense(rng, 1, hidden, 0.1))
    if out_sigmoid:
        trunk.append(Sigmoid())
    return Network(branches, trunk, input_shape=(channels, horizon))


def tiny_model(seed, channels=3, horizon=12, filters=2, hidden=4, calibrate=True):
    net = build_model(ModelConfig(channels=channels, horizon_hours=horizon, filters_per_scale=filters,
                                  hidden_units=hidden, seed=seed))
    if calibrate:
        rng = np.random.default_rng(seed + 7919)
        net.calibrate(rng.normal(size=(16, channels, horizon)))
    return net


NETWORK_KINDS = ("mlp_relu", "mlp_sigmoid_hidden", "mlp_no_sigmoid", "affine_mlp",
                 "conv_full", "conv_no_pool", "conv_no_bn", "conv_single_branch", "default_like")


def random_network(rng, kind):
    """One network of the named layer combination plus its input shape."""
    if kind == "mlp_relu":
        d = int(rng.integers(2, 10))
        return random_mlp(rng, d, [int(rng.integers(2, 12)) for _ in range(rng.integers(1, 4))]), (d,)
    if kind == "mlp_sigmoid_hidden":
        d = int(rng.integers(2, 10))
        return random_mlp(rng, d, [int(rng.integers(2, 12))], hidden_act="sigmoid"), (d,)
    if kind == "mlp_no_sigmoid":
        d = int(rng.integers(2, 10))
        return random_mlp(rng, d, [int(rng.integers(2, 12))], sigmoid_out=False), (d,)
    if kind == "affine_mlp":
        d = int(rng.integers(2, 10))
        return random_affine_mlp(rng, d, int(rng.integers(1, 4))), (d,)
    c, t = int(rng.integers(1, 5)), int(rng.integers(12, 25))
    if kind == "conv_full":
        return random_conv_net(rng, c, t), (c, t)
    if kind == "conv_no_pool":
        return random_conv_net(rng, c, t, pool=False), (c, t)
    if kind == "conv_no_bn":
        return random_conv_net(rng, c, t, batchnorm=False), (c, t)
    if kind == "conv_single_branch":
        return random_conv_net(rng, c, t, scales=(int(rng.choice([3, 6, 12])),)), (c, t)
    if kind == "default_like":
        seed = int(rng.integers(1 << 30))
        return tiny_model(seed, c, t, filters=3, hidden=5), (c, t)
    raise ValueError(kind)


def random_partition(rng, shape, n_groups):
    """Boolean masks: a random labelling of grid cells into exactly ``n_groups`` non-empty groups."""
    size = int(np.prod(shape))
    labels = np.concatenate([np.arange(n_groups), rng.integers(0, n_groups, size - n_groups)])
    rng.shuffle(labels)
    labels = labels.reshape(shape)
    return [labels == g for g in range(n_groups)]


# ---------------------------------------------------------------------------
# finite differences


def relu_masks(net: Network):
    """Concatenated on/off pattern of every ReLU after the most recent forward pass."""
    from mortnet.layers import ReLU as _ReLU

    masks = []
    for _, layer in net.named_layers():
        if isinstance(layer, _ReLU) and layer._cache is not None:
            cache = layer._cache
            arr = cache[0] if isinstance(cache, tuple) else cache
            masks.append(np.asarray(arr > 0).ravel())
    return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


def gradient_check(seed, h=1e-4, floor=1e-6, pos_weight=10.0):
    """Central differences (step ``h``) on every parameter of a tiny model in training mode.

    The dropout mask is frozen by reseeding its generator for every pass.
    Parameters whose +-h or +-2h perturbation flips any ReLU on/off pattern are
    skipped: the loss is not differentiable inside that stencil, so the
    central difference is not a valid oracle there. Returns
    ``(max_rel_err, n_checked, n_skipped, worst)``.
    """
    from mortnet.layers import sigmoid
    from mortnet.trainer import loss_grad_logits, weighted_log_loss

    net = tiny_model(seed, calibrate=False)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3, 12))
    y = np.array([1.0, 0.0, 0.0, 1.0, 0.0])

    def loss():
        z = net.forward(x, training=True, rng=np.random.default_rng(seed + 1), logits=True)
        return weighted_log_loss(sigmoid(z), y, pos_weight), z

    _, z = loss()
    base_mask = relu_masks(net)
    net.backward(loss_grad_logits(z, y, pos_weight))
    grads = {k: v.copy() for k, v in net.gradients().items()}
    worst, checked, skipped = (0.0, None), 0, 0
    for name, p in net.parameters().items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            vals, flipped = {}, False
            for k in (-2, -1, 1, 2):
                p[idx] = old + k * h
                vals[k], _ = loss()
                flipped = flipped or not np.array_equal(relu_masks(net), base_mask)
            p[idx] = old
            if flipped:
                skipped += 1
                continue
            # five-point stencil: truncation error O(h^4) instead of O(h^2)
            num = (vals[-2] - 8 * vals[-1] + 8 * vals[1] - vals[2]) / (12 * h)
            a = grads[name][idx]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if rel > worst[0]:
                worst = (rel, (name, idx, a, num))
    return worst[0], checked, skipped, worst[1]
