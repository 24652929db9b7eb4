"""Server and client state machines for quantized federated rounds.

A round samples clients, runs WS-filtered local SGD on each, quantizes the
per-layer parameter updates against the shared global scaling vector, then
dequantizes, aggregates, and refreshes the scaling vector by momentum mixing.
Transport is simulated but byte accounting matches the wire format exactly.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import danuq, nncore, weightstd
from .config import RunConfig
from .datagen import Dataset, Partition
from .errors import ConfigError

logger = logging.getLogger("fedwsq.federation")

# RNG stream tags, combined with (seed, round[, client]) into seed sequences.
_STREAM_SAMPLE = 1
_STREAM_CLIENT = 2
_STREAM_ALLOC = 3
_STREAM_INIT = 4


@dataclass
class GlobalState:
    round: int
    params: list[nncore.ParamBlock]
    scales: np.ndarray | None  # per weight-layer stds; None before bootstrap
    lr: float


@dataclass
class ClientPool:
    features: np.ndarray
    labels: np.ndarray
    shards: list[np.ndarray]

    @classmethod
    def from_partition(cls, data: Dataset, part: Partition) -> "ClientPool":
        return cls(data.features, data.labels, part.client_shards)

    @property
    def num_clients(self) -> int:
        return len(self.shards)


@dataclass(frozen=True)
class BitAllocation:
    strategy: str  # constant | fba | dba
    constant_bits: int = 4
    palette: tuple[int, ...] = (1, 2, 4)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("constant", "fba", "dba"):
            raise ConfigError(f"unknown allocation strategy {self.strategy!r}")
        if self.constant_bits not in self.palette:
            raise ConfigError(f"bits {self.constant_bits} not in palette {self.palette}")


@dataclass
class ClientReport:
    client_id: int
    sample_count: int
    train_loss: float
    bits: int
    quantized: list[danuq.QuantizedBlock]  # weight blocks, in layer order
    raw_weights: list[np.ndarray] | None  # no-quant mode: local weight values
    local_scales: np.ndarray  # std of each weight-layer update
    fullprec_params: list[np.ndarray]  # local bias/norm values, in block order
    used_scale_fallback: bool
    uplink_bytes: int = 0


@dataclass
class RoundInfo:
    round: int
    participants: list[int]
    bits: dict[int, int]
    train_loss: float
    uplink_bytes: int
    weight_payload_bytes: int = 0
    bits_hist: dict[int, int] = field(default_factory=dict)
    scale_fallbacks: int = 0


def weight_payload_bytes(report: ClientReport) -> int:
    """Bytes of weight payload alone (codes or raw floats, headers excluded)."""
    if report.raw_weights is not None:
        return sum(d.size * 4 for d in report.raw_weights)
    return sum(-(-b.count * b.bits // 8) for b in report.quantized)


def model_spec_from_config(cfg: RunConfig) -> nncore.ModelSpec:
    hidden = range(1, len(cfg.layer_sizes) - 1)
    return nncore.ModelSpec(
        layer_sizes=tuple(cfg.layer_sizes),
        activation=cfg.activation,
        use_group_norm=cfg.use_group_norm,
        groups=cfg.groups,
        ws_layers=frozenset(hidden) if cfg.ws_enabled else frozenset(),
    )


def init_global_state(cfg: RunConfig) -> GlobalState:
    spec = model_spec_from_config(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0, _STREAM_INIT)))
    return GlobalState(round=0, params=nncore.init_params(spec, rng), scales=None, lr=cfg.lr0)


def weight_blocks(params: list[nncore.ParamBlock]) -> list[int]:
    """Indices of weight blocks, defining the scaling-vector layer order."""
    return [i for i, p in enumerate(params) if p.kind == "weight"]


def assign_bits(alloc: BitAllocation, round: int, client_id: int) -> int:
    """constant -> B; fba -> palette[id mod 3]; dba -> seeded uniform draw per (round, id)."""
    if alloc.strategy == "constant":
        return alloc.constant_bits
    if alloc.strategy == "fba":
        return alloc.palette[client_id % len(alloc.palette)]
    rng = np.random.default_rng(
        np.random.SeedSequence((alloc.seed, round, _STREAM_ALLOC, client_id))
    )
    return alloc.palette[int(rng.integers(len(alloc.palette)))]


def update_global_scales(
    s_g: np.ndarray | None, client_scales: list[np.ndarray], beta: float
) -> np.ndarray:
    """Momentum mix: ``s_g <- (1 - beta) s_g + beta * mean(client scales)``.

    A missing global vector bootstraps with beta = 1 (full replacement).
    """
    if not (0 < beta <= 1):
        raise ConfigError(f"beta must be in (0, 1], got {beta}")
    if not client_scales:
        raise ConfigError("no client scales to aggregate")
    mean = np.mean(np.stack(client_scales), axis=0)
    if s_g is None:
        return mean
    if s_g.shape != mean.shape:
        raise ConfigError("scaling vectors must share length L")
    return (1.0 - beta) * s_g + beta * mean


def _client_batches(n: int, epochs: int, iters_per_epoch: int, rng: np.random.Generator):
    steps = min(iters_per_epoch, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        yield from np.array_split(perm, steps)


def client_local_training(
    global_params: list[nncore.ParamBlock],
    global_scales: np.ndarray | None,
    pool: ClientPool,
    client_id: int,
    bits: int,
    cfg: RunConfig,
    round: int,
    lr: float,
) -> ClientReport:
    """Run K local steps from the global snapshot and return the quantized update.

    K = local_epochs * iterations_per_epoch (capped by shard size per epoch).
    Weight updates are encoded against the broadcast global scale, falling back
    to the client's own scale on the bootstrap round. Full-precision blocks
    (bias/norm always, weights when quantization is off) travel as parameter
    values, so the unquantized path degenerates to exact FedAvg.
    """
    spec = model_spec_from_config(cfg)
    shard = pool.shards[client_id]
    if shard.size == 0:
        raise ConfigError(f"client {client_id} has no data")
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, round, _STREAM_CLIENT, client_id))
    )
    ws_cfg = weightstd.WsConfig(rho=cfg.rho)
    params = [p.copy() for p in global_params]
    losses = []
    for batch in _client_batches(shard.size, cfg.local_epochs, cfg.iterations_per_epoch, rng):
        if batch.size == 0:
            continue
        x = pool.features[shard[batch]]
        y = pool.labels[shard[batch]]
        loss, grads = nncore.model_loss_and_grads(spec, params, x, y, ws_cfg)
        params = nncore.sgd_step(params, grads, lr, cfg.weight_decay, cfg.clip_norm)
        losses.append(loss)

    deltas = [p.tensor - g.tensor for p, g in zip(params, global_params)]
    w_idx = weight_blocks(global_params)
    local_scales = np.array([float(np.std(deltas[i])) for i in w_idx])

    quantized: list[danuq.QuantizedBlock] = []
    raw: list[np.ndarray] | None = None
    fallback = False
    if cfg.quantizer == "none":
        raw = [params[i].tensor for i in w_idx]
    elif cfg.quantizer == "uniform":
        qrng = np.random.default_rng(rng.integers(2**63))
        for l, i in enumerate(w_idx):
            block, _ = danuq.uniform_quantize_absmax(deltas[i], bits, qrng, layer_id=l + 1)
            quantized.append(block)
    else:
        levels = get_levels(bits)
        for l, i in enumerate(w_idx):
            s_enc = float(global_scales[l]) if global_scales is not None else 0.0
            if s_enc <= 0.0:
                s_enc = float(local_scales[l])
                fallback = True
            if s_enc <= 0.0:
                s_enc = 1.0  # all-zero update; codes collapse to the zero level
            quantized.append(danuq.quantize(deltas[i], s_enc, levels, layer_id=l + 1))

    fullprec = [params[i].tensor for i, p in enumerate(global_params) if p.kind != "weight"]
    report = ClientReport(
        client_id=client_id,
        sample_count=int(shard.size),
        train_loss=float(np.mean(losses)) if losses else 0.0,
        bits=bits,
        quantized=quantized,
        raw_weights=raw,
        local_scales=local_scales,
        fullprec_params=fullprec,
        used_scale_fallback=fallback,
    )
    report.uplink_bytes = account_bytes(report)
    return report


def account_bytes(report: ClientReport) -> int:
    """Exact uplink size: per-layer headers + packed codes + scales + raw blocks."""
    total = 0
    if report.raw_weights is not None:
        for d in report.raw_weights:
            total += danuq.WIRE_HEADER.size + d.size * 4
    else:
        for b in report.quantized:
            total += danuq.WIRE_HEADER.size + (-(-b.count * b.bits // 8))
    total += report.local_scales.size * 4
    total += sum(d.size * 4 for d in report.fullprec_params)
    return total


def serialize_report(report: ClientReport) -> bytes:
    """Serialize exactly what account_bytes counts, in a fixed order."""
    parts = []
    if report.raw_weights is not None:
        for l, d in enumerate(report.raw_weights):
            parts.append(danuq.serialize_raw_block(l + 1, d))
    else:
        for b in report.quantized:
            parts.append(danuq.serialize_block(b))
    parts.append(report.local_scales.astype("<f4").tobytes())
    for d in report.fullprec_params:
        parts.append(np.asarray(d, dtype="<f4").reshape(-1).tobytes())
    return b"".join(parts)


_LEVELS_CACHE: dict[int, danuq.QuantLevels] = {}


def get_levels(bits: int) -> danuq.QuantLevels:
    if bits not in _LEVELS_CACHE:
        _LEVELS_CACHE[bits] = danuq.optimize_levels(bits)
    return _LEVELS_CACHE[bits]


def _dequantize_report(
    report: ClientReport, global_params, cfg: RunConfig
) -> list[np.ndarray]:
    """Reconstruct per-block weight deltas from one quantized client report."""
    w_idx = weight_blocks(global_params)
    out = []
    for l, (i, block) in enumerate(zip(w_idx, report.quantized)):
        shape = global_params[i].tensor.shape
        if cfg.quantizer == "uniform":
            scale = block.scale_used  # absmax is the codec's own scale
        elif cfg.dequant_scale == "local":
            scale = float(report.local_scales[l])
        else:
            scale = block.scale_used
        if scale <= 0.0:
            logger.warning(
                "client %d layer %d: non-positive dequantize scale, dropping update",
                report.client_id, l + 1,
            )
            out.append(np.zeros(shape))
            continue
        if cfg.quantizer == "uniform":
            vals = danuq.uniform_dequantize(block, scale)
        else:
            vals = danuq.dequantize(block, scale, get_levels(block.bits))
        out.append(vals.reshape(shape))
    return out


def run_round(
    state: GlobalState, pool: ClientPool, alloc: BitAllocation, cfg: RunConfig
) -> tuple[GlobalState, RoundInfo]:
    """Execute one communication round and return the new state plus metrics."""
    t = state.round + 1
    n_part = max(1, round(cfg.participation_rate * pool.num_clients))
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, t, _STREAM_SAMPLE)))
    participants = sorted(
        int(c) for c in rng.choice(pool.num_clients, size=n_part, replace=False)
    )
    bits = {i: assign_bits(alloc, t, i) for i in participants}
    lr = cfg.lr0 * cfg.lr_decay ** (t - 1)

    def train(i):
        return client_local_training(
            state.params, state.scales, pool, i, bits[i], cfg, t, lr
        )

    workers = int(os.environ.get("FEDWSQ_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(train, participants))
    else:
        reports = [train(i) for i in participants]
    reports.sort(key=lambda r: r.client_id)

    total = sum(r.sample_count for r in reports)
    loss_weights = [r.sample_count / total for r in reports]
    weights = [
        r.sample_count / total if cfg.aggregate == "weighted" else 1.0 for r in reports
    ]
    # Quantized weight blocks aggregate as deltas around the global snapshot;
    # parameter-valued blocks (bias/norm, and weights in raw mode) aggregate
    # as a plain weighted average, which is exact FedAvg when Sum h_i = 1.
    w_idx = weight_blocks(state.params)
    fp_idx = [i for i, p in enumerate(state.params) if p.kind != "weight"]
    new_tensors: list[np.ndarray] = [None] * len(state.params)  # type: ignore[list-item]
    param_valued = set(fp_idx) | (set(w_idx) if cfg.quantizer == "none" else set())
    for i, p in enumerate(state.params):
        if i in param_valued and cfg.aggregate == "weighted":
            new_tensors[i] = np.zeros_like(p.tensor)
        else:
            new_tensors[i] = p.tensor.copy()
    for h, r in zip(weights, reports):
        if cfg.quantizer != "none":
            for i, d in zip(w_idx, _dequantize_report(r, state.params, cfg)):
                new_tensors[i] += h * d
            w_vals = []
        else:
            w_vals = r.raw_weights
        for idx_list, vals in ((w_idx, w_vals), (fp_idx, r.fullprec_params)):
            for i, v in zip(idx_list, vals):
                if cfg.aggregate == "weighted":
                    new_tensors[i] += h * v
                else:
                    new_tensors[i] += v - state.params[i].tensor

    new_params = [
        nncore.ParamBlock(p.layer_id, p.kind, a)
        for p, a in zip(state.params, new_tensors)
    ]
    new_scales = update_global_scales(
        state.scales, [r.local_scales for r in reports], cfg.beta
    )
    new_state = GlobalState(
        round=t, params=new_params, scales=new_scales, lr=cfg.lr0 * cfg.lr_decay**t
    )
    hist = {b: sum(1 for r in reports if r.bits == b) for b in (1, 2, 4)}
    info = RoundInfo(
        round=t,
        participants=participants,
        bits=bits,
        train_loss=float(sum(h * r.train_loss for h, r in zip(loss_weights, reports))),
        uplink_bytes=sum(r.uplink_bytes for r in reports),
        weight_payload_bytes=sum(weight_payload_bytes(r) for r in reports),
        bits_hist=hist,
        scale_fallbacks=sum(1 for r in reports if r.used_scale_fallback),
    )
    return new_state, info


def alloc_from_config(cfg: RunConfig) -> BitAllocation:
    return BitAllocation(strategy=cfg.alloc, constant_bits=cfg.bits, seed=cfg.seed)
