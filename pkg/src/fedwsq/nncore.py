"""Minimal deterministic neural-network core with exact hand-derived gradients.

Everything runs in 64-bit floats so gradient checks against central finite
differences have headroom. The model is a plain MLP with optional group
normalization and weight standardization on selected hidden layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import weightstd
from .errors import ConfigError, DimensionError, TrainingError

GN_EPS = 1e-5
DEFAULT_CLIP_NORM = 10.0


@dataclass
class ParamBlock:
    """A named, shaped parameter array for one layer: the unit of quantization."""

    layer_id: int
    kind: str  # weight | bias | norm
    tensor: np.ndarray

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.kind == "weight" and self.tensor.ndim != 2:
            raise DimensionError(f"weight block for layer {self.layer_id} must be 2-D")
        if self.kind in ("bias", "norm") and self.tensor.ndim != 1:
            raise DimensionError(f"{self.kind} block for layer {self.layer_id} must be 1-D")

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.layer_id, self.kind, self.tensor.copy())


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    use_group_norm: bool = False
    groups: int = 8
    ws_layers: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ConfigError("layer_sizes needs at least input and output widths")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        L = self.num_layers
        if L in self.ws_layers:
            raise ConfigError("the classifier head is never weight-standardized")
        if any(l < 1 or l > L for l in self.ws_layers):
            raise ConfigError("ws_layers must reference layers in [1..L]")
        if self.use_group_norm:
            for width in self.layer_sizes[1:-1]:
                if width % self.groups != 0:
                    raise ConfigError(f"groups={self.groups} does not divide hidden width {width}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1


def init_params(spec: ModelSpec, rng: np.random.Generator) -> list[ParamBlock]:
    """He-initialized parameter blocks in canonical (weight, bias, norm) order."""
    blocks = []
    L = spec.num_layers
    for l in range(1, L + 1):
        fan_in, fan_out = spec.layer_sizes[l - 1], spec.layer_sizes[l]
        W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        blocks.append(ParamBlock(l, "weight", W))
        blocks.append(ParamBlock(l, "bias", np.zeros(fan_out)))
        if spec.use_group_norm and l < L:
            blocks.append(ParamBlock(l, "norm", np.ones(fan_out)))
    return blocks


def linear_forward(weights: ParamBlock, input: np.ndarray) -> np.ndarray:
    """Apply ``y = W^T x`` per sample; the batch dimension is preserved."""
    x = np.asarray(input, dtype=np.float64)
    W = weights.tensor
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"input last dimension {x.shape[-1]} != weight input_dim {W.shape[0]}"
        )
    return x @ W


def linear_backward(
    weights: ParamBlock, input: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the linear map: (dL/dW accumulated over batch, dL/dx)."""
    x = np.asarray(input, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    W = weights.tensor
    if x.shape[-1] != W.shape[0] or u.shape[-1] != W.shape[1]:
        raise DimensionError("upstream/input shapes do not match the weight block")
    x2 = x.reshape(-1, W.shape[0])
    u2 = u.reshape(-1, W.shape[1])
    if x2.shape[0] != u2.shape[0]:
        raise DimensionError("batch sizes of input and upstream differ")
    grad_w = x2.T @ u2
    grad_x = (u2 @ W.T).reshape(x.shape)
    return grad_w, grad_x


def _gn_forward(x: np.ndarray, groups: int):
    b, d = x.shape
    if d % groups != 0:
        raise ConfigError(f"feature dim {d} not divisible by groups {groups}")
    xg = x.reshape(b, groups, d // groups)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = (xg - mu) * inv
    return xhat.reshape(b, d), (xhat, inv, groups)


def _gn_backward(upstream: np.ndarray, cache) -> np.ndarray:
    xhat, inv, groups = cache
    b, d = upstream.shape
    ug = upstream.reshape(b, groups, d // groups)
    dx = inv * (
        ug
        - ug.mean(axis=-1, keepdims=True)
        - xhat * np.mean(ug * xhat, axis=-1, keepdims=True)
    )
    return dx.reshape(b, d)


def group_norm_forward_backward(
    input: np.ndarray, groups: int, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Standardize each group to zero mean / unit variance and backprop upstream."""
    x = np.asarray(input, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != x.shape:
        raise DimensionError("upstream shape must match input shape")
    out, cache = _gn_forward(x, groups)
    return out, _gn_backward(u, cache)


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch via a stable log-sum-exp.

    The gradient is ``(softmax - one_hot) / batch``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("logits must be a nonempty (batch, classes) array")
    if y.shape != (z.shape[0],):
        raise DimensionError("labels length must match the batch dimension")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("labels out of range")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    n = z.shape[0]
    loss = float(np.mean(lse - z[np.arange(n), y]))
    p = np.exp(z - lse[:, None])
    p[np.arange(n), y] -= 1.0
    return loss, p / n


def sgd_step(
    params: list[ParamBlock],
    grads: list[np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    clip_norm: float = DEFAULT_CLIP_NORM,
) -> list[ParamBlock]:
    """One SGD step with global-norm gradient clipping and decoupled-from-clip decay.

    Momentum is deliberately absent. Returns fresh blocks; inputs are untouched.
    """
    if lr < 0 or weight_decay < 0 or clip_norm <= 0:
        raise ValueError("lr/weight_decay must be >= 0 and clip_norm > 0")
    if len(params) != len(grads):
        raise DimensionError("params and grads must align")
    sq = 0.0
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {p.layer_id} ({p.kind})")
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    gnorm = np.sqrt(sq)
    factor = 1.0 if gnorm <= clip_norm else clip_norm / gnorm
    out = []
    for p, g in zip(params, grads):
        new = p.tensor - lr * (factor * np.asarray(g, dtype=np.float64) + weight_decay * p.tensor)
        out.append(ParamBlock(p.layer_id, p.kind, new))
    return out


def _activate(h: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(h, 0.0) if kind == "relu" else np.tanh(h)


def _activate_grad(h: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (h > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _index_blocks(params: list[ParamBlock]) -> dict[tuple[int, str], int]:
    return {(p.layer_id, p.kind): i for i, p in enumerate(params)}


def model_forward(
    spec: ModelSpec,
    params: list[ParamBlock],
    x: np.ndarray,
    ws_cfg: weightstd.WsConfig = weightstd.WsConfig(),
) -> np.ndarray:
    """Forward pass to logits, applying WS on configured layers before each linear."""
    logits, _ = _forward_with_cache(spec, params, x, ws_cfg)
    return logits


def _forward_with_cache(spec, params, x, ws_cfg):
    idx = _index_blocks(params)
    a = np.asarray(x, dtype=np.float64)
    L = spec.num_layers
    cache = []
    for l in range(1, L + 1):
        W = params[idx[(l, "weight")]]
        b = params[idx[(l, "bias")]].tensor
        if l in spec.ws_layers:
            W_eff, ws_cache = weightstd.ws_forward_matrix(W.tensor, ws_cfg)
        else:
            W_eff, ws_cache = W.tensor, None
        z = a @ W_eff
        layer = {"x": a, "W_eff": W_eff, "ws": ws_cache}
        if spec.use_group_norm and l < L:
            gamma = params[idx[(l, "norm")]].tensor
            xhat, gn_cache = _gn_forward(z, spec.groups)
            h = gamma * xhat + b
            layer.update(gn=gn_cache, xhat=xhat, gamma=gamma)
        else:
            h = z + b
        if l < L:
            out = _activate(h, spec.activation)
            layer.update(h=h, a=out)
        else:
            out = h
        cache.append(layer)
        a = out
    return a, cache


def model_loss_and_grads(
    spec: ModelSpec,
    params: list[ParamBlock],
    x: np.ndarray,
    labels,
    ws_cfg: weightstd.WsConfig = weightstd.WsConfig(),
) -> tuple[float, list[np.ndarray]]:
    """Loss plus gradients aligned with ``params``; WS layers get filtered gradients."""
    idx = _index_blocks(params)
    logits, cache = _forward_with_cache(spec, params, x, ws_cfg)
    loss, dout = cross_entropy_loss(logits, labels)
    grads: list[np.ndarray | None] = [None] * len(params)
    L = spec.num_layers
    for l in range(L, 0, -1):
        layer = cache[l - 1]
        if l < L:
            dout = dout * _activate_grad(layer["h"], layer["a"], spec.activation)
        grads[idx[(l, "bias")]] = dout.sum(axis=0)
        if spec.use_group_norm and l < L:
            grads[idx[(l, "norm")]] = np.sum(dout * layer["xhat"], axis=0)
            dz = _gn_backward(dout * layer["gamma"], layer["gn"])
        else:
            dz = dout
        gw = layer["x"].reshape(-1, layer["W_eff"].shape[0]).T @ dz
        dout = dz @ layer["W_eff"].T
        if layer["ws"] is not None:
            gw = weightstd.ws_backward_matrix(gw, layer["ws"], ws_cfg)
        grads[idx[(l, "weight")]] = gw
    return loss, grads  # type: ignore[return-value]
