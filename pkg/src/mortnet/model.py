"""Multi-scale temporal ConvNet: assembly, inference and checkpoints."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mortnet.container import read_container, write_container
from mortnet.layers import (
    AvgPool1D,
    BatchNorm,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    ReLU,
    Sigmoid,
    sigmoid,
)

CHECKPOINT_KIND = "mortnet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    channels: int = 22
    horizon_hours: int = 48
    filters_per_scale: int = 32
    scales: Sequence[int] = (3, 6, 12)
    hidden_units: int = 64
    dropout_keep: float = 0.55
    seed: int = 0
    pool_window: int = 3
    pool_stride: int | None = None
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    dropout_before_batchnorm: bool = True

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales:
            raise ValueError("at least one temporal scale is required")
        for s in self.scales:
            if s > self.horizon_hours:
                raise ValueError(f"scale {s} exceeds horizon of {self.horizon_hours} hours")
        if self.filters_per_scale < 1 or self.hidden_units < 1:
            raise ValueError("filters_per_scale and hidden_units must be >= 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must lie in (0, 1]")
        if self.pool_window > self.horizon_hours:
            raise ValueError("pool window exceeds horizon")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Network:
    """Parallel conv branches concatenated on the channel axis, then a sequential trunk.

    With ``branches=None`` the trunk consumes the input directly, which is how
    small test networks (plain MLPs, affine-only stacks) are expressed.
    """

    def __init__(self, branches: list[list[Layer]] | None, trunk: list[Layer],
                 input_shape: tuple[int, ...] | None = None):
        if not trunk:
            raise ValueError("trunk must contain at least one layer")
        self.branches = branches
        self.trunk = trunk
        self.input_shape = None if input_shape is None else tuple(input_shape)
        self.config: ModelConfig | None = None
        self._branch_channels: list[int] | None = None
        self._stop: int | None = None

    @property
    def has_sigmoid(self) -> bool:
        return isinstance(self.trunk[-1], Sigmoid)

    def named_layers(self):
        if self.branches:
            for b, branch in enumerate(self.branches):
                for j, layer in enumerate(branch):
                    yield f"branch{b}.{j}", layer
        for j, layer in enumerate(self.trunk):
            yield f"trunk.{j}", layer

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": arr for ln, layer in self.named_layers()
                for pn, arr in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for ln, layer in self.named_layers():
            for pn in layer.params:
                if pn not in layer.grads:
                    raise RuntimeError(f"no gradient for {ln}.{pn}; run backward first")
                out[f"{ln}.{pn}"] = layer.grads[pn]
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{k}": v for ln, layer in self.named_layers() for k, v in layer.state().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for ln, layer in self.named_layers():
            prefix = ln + "."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            missing = set(layer.params) - set(sub)
            if missing:
                raise KeyError(f"state missing {sorted(prefix + m for m in missing)}")
            layer.load_state(sub)

    @property
    def batchnorm_ready(self) -> bool:
        return all(layer.ready for _, layer in self.named_layers() if isinstance(layer, BatchNorm))

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = False
        if self.input_shape is not None:
            if x.shape == self.input_shape:
                x, squeeze = x[None], True
            elif x.shape[1:] != self.input_shape:
                raise ValueError(f"input shape {x.shape} does not match network input {self.input_shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("input contains non-finite values")
        return x, squeeze

    def _run(self, x, visit: Callable[[Layer, np.ndarray], np.ndarray], stop: int) -> np.ndarray:
        if self.branches:
            outs = []
            for branch in self.branches:
                h = x
                for layer in branch:
                    h = visit(layer, h)
                outs.append(h)
            self._branch_channels = [o.shape[1] for o in outs]
            h = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
        else:
            h = x
        for layer in self.trunk[:stop]:
            h = visit(layer, h)
        return h

    def forward(self, x, training=False, rng=None, logits=False) -> np.ndarray:
        """Run a batch through the network; returns (N,) probabilities or logits."""
        x, squeeze = self._check_input(x)
        stop = len(self.trunk) - 1 if (logits and self.has_sigmoid) else len(self.trunk)
        self._stop = stop
        out = self._run(x, lambda layer, h: layer.forward(h, training, rng), stop)
        out = out.reshape(out.shape[0], -1)
        if out.shape[1] == 1:
            out = out[:, 0]
        return out[0] if squeeze else out

    def backward(self, grad) -> np.ndarray:
        """Reverse pass from the output of the last ``forward``; returns d/d(input)."""
        if self._stop is None:
            raise RuntimeError("backward called without a forward pass")
        g = np.asarray(grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[:, None]
        for layer in reversed(self.trunk[:self._stop]):
            g = layer.backward(g)
        if not self.branches:
            return g
        dx = None
        start = 0
        for branch, nc in zip(self.branches, self._branch_channels):
            gb = g[:, start:start + nc]
            start += nc
            for layer in reversed(branch):
                gb = layer.backward(gb)
            dx = gb if dx is None else dx + gb
        return dx

    def calibrate(self, x) -> None:
        """Set every batchnorm's running statistics to the exact statistics of ``x``.

        Propagation is in inference mode (dropout off); no parameter changes.
        """
        x, _ = self._check_input(x)

        def visit(layer, h):
            if isinstance(layer, BatchNorm):
                axes = (0,) + tuple(range(2, h.ndim))
                layer.set_running_stats(h.mean(axis=axes), h.var(axis=axes))
            return layer.forward(h, False, None)

        self._run(x, visit, len(self.trunk))

    def __repr__(self):
        lines = ["Network("]
        if self.branches:
            for b, branch in enumerate(self.branches):
                lines.append(f"  branch{b}: " + " -> ".join(map(repr, branch)))
            lines.append("  concat(channels)")
        lines += [f"  {layer!r}" for layer in self.trunk]
        return "\n".join(lines) + "\n)"


def _uniform(rng, shape, fan_in):
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_model(config: ModelConfig | None = None, rng: np.random.Generator | None = None) -> Network:
    """Assemble the multi-scale network with fan-in scaled uniform weights, zero biases."""
    config = config or ModelConfig()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    c, t, f = config.channels, config.horizon_hours, config.filters_per_scale
    branches = []
    for width in config.scales:
        kernel = _uniform(rng, (f, c, width), c * width)
        branches.append([Conv1D(kernel, np.zeros(f), padding="same"), ReLU()])
    merged = f * len(config.scales)
    pool = AvgPool1D(config.pool_window, config.pool_stride)
    flat = merged * pool.out_length(t)

    def regularise(n):
        drop = Dropout(config.dropout_keep)
        bn = BatchNorm(n, config.bn_epsilon, config.bn_momentum)
        return [drop, bn] if config.dropout_before_batchnorm else [bn, drop]

    h = config.hidden_units
    trunk = [pool, *regularise(merged), Flatten(),
             Dense(_uniform(rng, (h, flat), flat), np.zeros(h)), ReLU(), *regularise(h),
             Dense(_uniform(rng, (1, h), h), np.zeros(1)), Sigmoid()]
    net = Network(branches, trunk, input_shape=(c, t))
    net.config = config
    return net


def _grid(patient) -> np.ndarray:
    return np.asarray(getattr(patient, "grid", patient), dtype=np.float64)


def predict_logit(network: Network, patient) -> float | np.ndarray:
    """Pre-sigmoid output in inference mode. Accepts one grid, a batch, or a PatientMatrix."""
    if not network.batchnorm_ready:
        raise RuntimeError("network has no batchnorm running statistics; train or calibrate first")
    out = network.forward(_grid(patient), training=False, logits=True)
    return float(out) if np.ndim(out) == 0 else out


def predict(network: Network, patient) -> float | np.ndarray:
    z = predict_logit(network, patient)
    p = sigmoid(z)
    return float(p) if np.ndim(p) == 0 else p


@dataclass
class Checkpoint:
    network: Network
    config: ModelConfig
    standardization: "object | None" = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, network: Network, standardization=None, meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in network.state_dict().items()}
    if standardization is not None:
        arrays["std/mean"] = standardization.mean
        arrays["std/std"] = standardization.std
    header = {"version": CHECKPOINT_VERSION, "config": network.config.to_dict(),
              "extra": meta or {}}
    write_container(path, CHECKPOINT_KIND, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    from mortnet.ingest import StandardizationStats

    header, arrays = read_container(path, CHECKPOINT_KIND)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    net = build_model(config)
    net.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    stats = None
    if "std/mean" in arrays:
        stats = StandardizationStats(arrays["std/mean"], arrays["std/std"])
    return Checkpoint(net, config, stats, header.get("extra", {}))
