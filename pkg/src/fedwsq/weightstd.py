"""Weight standardization as a pair of projections, with its exact filtered gradient.

A weight vector ``w`` is standardized by removing its mean (projection onto the
orthogonal complement of the all-ones direction) and rescaling by ``rho / sigma``.
The backward pass applies the two projections in sequence, so filtered gradients
are orthogonal to both the standardized vector and the all-ones direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

DEFAULT_RHO = 0.001
DEFAULT_SIGMA_EPS = 1e-10


@dataclass(frozen=True)
class WsConfig:
    rho: float = DEFAULT_RHO
    sigma_eps: float = DEFAULT_SIGMA_EPS

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.sigma_eps <= 0:
            raise ValueError(f"sigma_eps must be positive, got {self.sigma_eps}")


@dataclass
class WsContext:
    """Per-call cache of the forward pass, consumed by ws_backward."""

    centered: np.ndarray
    sigma: float
    standardized: np.ndarray


def ws_forward(w: np.ndarray, cfg: WsConfig = WsConfig()) -> tuple[np.ndarray, WsContext]:
    """Standardize one weight vector: ``(rho / sigma) * (w - mean(w))``.

    Vectors whose sigma falls below the guard map to the zero vector, keeping
    the transform exactly scale-invariant everywhere else.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 2:
        raise DimensionError(f"weight vector must be 1-D with length >= 2, got shape {w.shape}")
    centered = w - w.mean()
    sigma = float(np.sqrt(np.mean(centered * centered)))
    if sigma <= cfg.sigma_eps:
        std = np.zeros_like(w)
    else:
        std = (cfg.rho / sigma) * centered
    return std, WsContext(centered=centered, sigma=sigma, standardized=std)


def ws_backward(upstream: np.ndarray, ctx: WsContext, cfg: WsConfig = WsConfig()) -> np.ndarray:
    """Filter an upstream gradient through the two projections of the WS backward pass.

    Returns ``(rho / sigma) * (I - P_1)(I - P_wtilde) upstream``, computed as
    two sequential projections without materializing any matrix.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != ctx.centered.shape:
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match context shape {ctx.centered.shape}"
        )
    if ctx.sigma <= cfg.sigma_eps:
        return np.zeros_like(upstream)
    wt = ctx.standardized
    g = upstream - (upstream @ wt) / (wt @ wt) * wt
    g = g - g.mean()
    return (cfg.rho / ctx.sigma) * g


def project_out(v: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Remove the component of ``v`` along ``direction``: ``(I - P_direction) v``."""
    v = np.asarray(v, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if v.shape != direction.shape:
        raise DimensionError(f"shape mismatch: {v.shape} vs {direction.shape}")
    denom = direction @ direction
    if denom == 0.0:
        raise ValueError("cannot project out a zero direction")
    return v - (v @ direction) / denom * direction


def ws_forward_matrix(W: np.ndarray, cfg: WsConfig = WsConfig()) -> tuple[np.ndarray, dict]:
    """Standardize every column of a (fan_in, fan_out) weight matrix at once.

    Each column is one output neuron's weight vector. Returns the standardized
    matrix and a cache for ws_backward_matrix. Matches ws_forward column-wise.
    """
    W = np.asarray(W, dtype=np.float64)
    centered = W - W.mean(axis=0, keepdims=True)
    sigma = np.sqrt(np.mean(centered * centered, axis=0))
    live = sigma > cfg.sigma_eps
    inv = np.where(live, cfg.rho / np.where(live, sigma, 1.0), 0.0)
    std = centered * inv
    return std, {"std": std, "inv": inv, "live": live}


def ws_backward_matrix(G: np.ndarray, cache: dict, cfg: WsConfig = WsConfig()) -> np.ndarray:
    """Column-wise filtered gradient for a matrix standardized by ws_forward_matrix."""
    G = np.asarray(G, dtype=np.float64)
    std = cache["std"]
    if G.shape != std.shape:
        raise DimensionError(f"gradient shape {G.shape} does not match weights {std.shape}")
    norm2 = np.sum(std * std, axis=0)
    safe = np.where(norm2 > 0, norm2, 1.0)
    g = G - std * (np.sum(G * std, axis=0) / safe)
    g = g - g.mean(axis=0, keepdims=True)
    return g * cache["inv"]
