"""Distribution-aware non-uniform quantization under a standard-normal prior.

Level tables minimize the expected squared quantization error for N(0,1)
inputs. Encoding is nearest-level via half-open midpoint cells, packed into a
compact little-endian wire format. An absmax uniform quantizer with stochastic
rounding serves as the baseline.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, DecodingError, EncodingError, NumericalError

SUPPORTED_BITS = (1, 2, 4)
_NORMAL = NormalDist()

#: Reference level tables published for the three supported bit-widths.
REFERENCE_TABLES = {
    1: (-0.798, 0.798),
    2: (-1.224, 0.0, 0.765, 1.724),
    4: (
        -2.654, -1.974, -1.508, -1.149, -0.834, -0.544, -0.269, 0.0,
        0.230, 0.465, 0.708, 0.966, 1.248, 1.568, 1.968, 2.649,
    ),
}

WIRE_HEADER = struct.Struct("<HBIf")  # layer_id u16, bits u8, count u32, scale f32
RAW_BITS = 32  # marker for uncompressed float32 payloads in the same framing


def erf(x: float) -> float:
    """Error function; odd, saturating to +-1. Absolute error below 1e-7."""
    return math.erf(x)


def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _cdf(x: float) -> float:
    if x == -math.inf:
        return 0.0
    if x == math.inf:
        return 1.0
    return _NORMAL.cdf(x)


@dataclass(frozen=True)
class QuantLevels:
    """An ascending level table with midpoint cell boundaries for one bit-width."""

    bits: int
    levels: tuple[float, ...]
    zero_pinned: bool
    boundaries: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"unsupported bit-width {self.bits}; expected one of {SUPPORTED_BITS}")
        if len(self.levels) != 2 ** self.bits:
            raise ConfigError(f"{self.bits}-bit table needs {2 ** self.bits} levels")
        lv = np.asarray(self.levels, dtype=np.float64)
        if not np.all(np.diff(lv) > 0):
            raise ConfigError("levels must be strictly ascending")
        mids = tuple(float(m) for m in (lv[:-1] + lv[1:]) / 2.0)
        object.__setattr__(self, "boundaries", mids)

    @property
    def level_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)


@dataclass(frozen=True)
class QuantizedBlock:
    """Bit-packed codes plus the scale divided out before encoding."""

    layer_id: int
    bits: int
    count: int
    codes: bytes
    scale_used: float


def _cell_mean(a: float, b: float) -> float:
    """Conditional mean of N(0,1) over [a, b)."""
    mass = _cdf(b) - _cdf(a)
    pa = 0.0 if a == -math.inf else _phi(a)
    pb = 0.0 if b == math.inf else _phi(b)
    return (pa - pb) / mass


def optimize_levels(
    bits: int,
    pin_zero: bool = True,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> QuantLevels:
    """Find the MSE-optimal level table for N(0,1) by Lloyd-Max fixed-point iteration.

    Free levels move to the conditional mean of their midpoint cell each sweep;
    for bits >= 2 one level stays pinned at zero (1-bit tables omit the pin so
    both levels place freely).
    """
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    n = 2 ** bits
    q = np.array([_NORMAL.inv_cdf((r + 0.5) / n) for r in range(n)])
    pinned = n // 2 - 1 if (pin_zero and bits >= 2) else None
    if pinned is not None:
        q[pinned] = 0.0
    for _ in range(max_iter):
        u = (q[:-1] + q[1:]) / 2.0
        new = q.copy()
        for r in range(n):
            if r == pinned:
                continue
            a = -math.inf if r == 0 else u[r - 1]
            b = math.inf if r == n - 1 else u[r]
            new[r] = _cell_mean(a, b)
        if float(np.max(np.abs(new - q))) < tol:
            return QuantLevels(bits, tuple(float(v) for v in new), zero_pinned=pinned is not None)
        q = new
    raise NumericalError(f"level optimization did not converge within {max_iter} iterations")


def grid_search_levels(bits: int, pin_zero: bool = True) -> QuantLevels:
    """Coarse-to-fine grid minimization of the closed-form error; bits <= 2 only.

    Independent cross-check for the fixed-point iteration: same objective,
    different search strategy.
    """
    if bits not in (1, 2):
        raise ConfigError("grid search is only tractable for 1- and 2-bit tables")

    def error_of(levels):
        return _expected_error_of(np.asarray(levels, dtype=np.float64))

    if bits == 1:
        grid = np.arange(0.05, 3.0, 0.01)
        best = min(grid, key=lambda a: error_of([-a, a]))
        for step in (0.001, 0.0001):
            local = np.arange(best - 10 * step, best + 10 * step, step)
            best = min(local, key=lambda a: error_of([-a, a]))
        return QuantLevels(1, (-float(best), float(best)), zero_pinned=False)

    # 2-bit: three free levels around the zero pin (or four free without it).
    free = 3 if pin_zero else 4
    centers = [-1.0, 0.5, 1.5] if pin_zero else [-1.5, -0.5, 0.5, 1.5]
    widths = [1.5] * free
    best_vec = np.array(centers)
    for step in (0.1, 0.02, 0.004, 0.0008):
        axes = [np.arange(c - w, c + w + step / 2, step) for c, w in zip(best_vec, widths)]
        best_err = math.inf
        for combo in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, free):
            levels = np.sort(np.append(combo, 0.0) if pin_zero else combo)
            if np.any(np.diff(levels) <= 1e-6):
                continue
            err = error_of(levels)
            if err < best_err:
                best_err, best_vec = err, combo
        widths = [2 * step] * free
    levels = np.sort(np.append(best_vec, 0.0) if pin_zero else best_vec)
    if levels.sum() < 0:
        levels = -levels[::-1]  # the objective is mirror-symmetric; fix one orientation
    return QuantLevels(2, tuple(float(v) for v in levels), zero_pinned=pin_zero)


def _expected_error_of(levels: np.ndarray) -> float:
    """Closed-form E[(X - Q(X))^2] for X ~ N(0,1) over midpoint cells on the real line."""
    q = np.asarray(levels, dtype=np.float64)
    n = len(q)
    u = np.concatenate(([-math.inf], (q[:-1] + q[1:]) / 2.0, [math.inf]))
    total = 0.0
    for r in range(n):
        a, b = u[r], u[r + 1]
        # Per-cell antiderivative: (2 q_r - x) e^{-x^2/2} / sqrt(2 pi)
        #                        + (q_r^2 + 1) erf(x / sqrt 2) / 2, evaluated on [a, b).
        ea = 0.0 if math.isinf(a) else (2 * q[r] - a) * math.exp(-0.5 * a * a)
        eb = 0.0 if math.isinf(b) else (2 * q[r] - b) * math.exp(-0.5 * b * b)
        erfa = -1.0 if a == -math.inf else math.erf(a / math.sqrt(2))
        erfb = 1.0 if b == math.inf else math.erf(b / math.sqrt(2))
        total += (eb - ea) / math.sqrt(2 * math.pi) + 0.5 * (q[r] ** 2 + 1) * (erfb - erfa)
    return total


def expected_error(levels: QuantLevels | np.ndarray) -> float:
    """Expected squared quantization error of a level table under N(0,1)."""
    if isinstance(levels, QuantLevels):
        return _expected_error_of(levels.level_array)
    return _expected_error_of(np.asarray(levels, dtype=np.float64))


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------

def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes LSB-first into bytes; the tail is zero-padded."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit-width {bits}")
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size and int(codes.max()) >= (1 << bits):
        raise EncodingError(f"code {int(codes.max())} does not fit in {bits} bits")
    per = 8 // bits
    padded = np.zeros(-(-codes.size // per) * per, dtype=np.uint8)
    padded[: codes.size] = codes
    lanes = padded.reshape(-1, per)
    out = np.zeros(lanes.shape[0], dtype=np.uint8)
    for i in range(per):
        out |= lanes[:, i] << (bits * i)
    return out.tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes; raises DecodingError on truncated input."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit-width {bits}")
    per = 8 // bits
    need = -(-count // per)
    if len(data) < need:
        raise DecodingError(f"expected {need} bytes for {count} codes, got {len(data)}")
    raw = np.frombuffer(data[:need], dtype=np.uint8)
    mask = (1 << bits) - 1
    lanes = [(raw >> (bits * i)) & mask for i in range(per)]
    return np.stack(lanes, axis=1).reshape(-1)[:count]


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

def encode_codes(values: np.ndarray, scale: float, levels: QuantLevels) -> np.ndarray:
    """Map each value to its cell index; boundary ties go to the upper cell."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        pos = int(np.flatnonzero(~np.isfinite(v))[0])
        raise EncodingError(f"non-finite value at position {pos}")
    if scale <= 0:
        raise EncodingError(f"scale must be positive, got {scale}")
    return np.searchsorted(np.asarray(levels.boundaries), v / scale, side="right")


def quantize(
    values: np.ndarray, scale: float, levels: QuantLevels, layer_id: int = 0
) -> QuantizedBlock:
    """Quantize a tensor against ``scale`` and bit-pack the resulting codes."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    codes = encode_codes(v, scale, levels)
    return QuantizedBlock(
        layer_id=layer_id,
        bits=levels.bits,
        count=v.size,
        codes=pack_codes(codes, levels.bits),
        scale_used=float(scale),
    )


def dequantize(block: QuantizedBlock, scale: float, levels: QuantLevels) -> np.ndarray:
    """Reconstruct ``q_code * scale`` for every packed code."""
    if block.bits != levels.bits:
        raise DecodingError(f"block bits {block.bits} != table bits {levels.bits}")
    codes = unpack_codes(block.codes, block.bits, block.count)
    return levels.level_array[codes] * scale


def uniform_quantize_absmax(
    values: np.ndarray, bits: int, rng: np.random.Generator | None = None, layer_id: int = 0
) -> tuple[QuantizedBlock, float]:
    """Absmax-scaled uniform quantization with stochastic rounding (FedPAQ-style).

    Levels are 2^bits equally spaced points on [-1, 1]; each value rounds to one
    of its two neighbors with probability proportional to proximity.
    """
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"unsupported bit-width {bits}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise EncodingError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(v)):
        pos = int(np.flatnonzero(~np.isfinite(v))[0])
        raise EncodingError(f"non-finite value at position {pos}")
    scale = float(np.max(np.abs(v)))
    if scale == 0.0:
        scale = 1.0
    n = 2 ** bits
    pos = (v / scale + 1.0) / 2.0 * (n - 1)  # fractional level index in [0, n-1]
    lo = np.floor(pos)
    frac = pos - lo
    rng = rng if rng is not None else np.random.default_rng(0)
    codes = lo + (rng.random(v.size) < frac)
    codes = np.clip(codes, 0, n - 1).astype(np.uint8)
    block = QuantizedBlock(
        layer_id=layer_id, bits=bits, count=v.size, codes=pack_codes(codes, bits), scale_used=scale
    )
    return block, scale


def uniform_levels(bits: int) -> np.ndarray:
    """The 2^bits equally spaced reconstruction points on [-1, 1]."""
    return np.linspace(-1.0, 1.0, 2 ** bits)


def uniform_dequantize(block: QuantizedBlock, scale: float) -> np.ndarray:
    codes = unpack_codes(block.codes, block.bits, block.count)
    return uniform_levels(block.bits)[codes] * scale


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

def serialize_block(block: QuantizedBlock) -> bytes:
    """Header (layer_id u16 LE, bits u8, count u32 LE, scale f32 LE) + packed codes."""
    return WIRE_HEADER.pack(block.layer_id, block.bits, block.count, block.scale_used) + block.codes


def deserialize_block(data: bytes, offset: int = 0) -> tuple[QuantizedBlock, int]:
    """Parse one block starting at ``offset``; returns the block and the next offset."""
    if len(data) - offset < WIRE_HEADER.size:
        raise DecodingError("truncated block header")
    layer_id, bits, count, scale = WIRE_HEADER.unpack_from(data, offset)
    offset += WIRE_HEADER.size
    if bits == RAW_BITS:
        nbytes = count * 4
    elif bits in SUPPORTED_BITS:
        nbytes = -(-count * bits // 8)
    else:
        raise DecodingError(f"unsupported bits {bits} in wire header")
    if len(data) - offset < nbytes:
        raise DecodingError("truncated block payload")
    block = QuantizedBlock(layer_id, bits, count, data[offset : offset + nbytes], float(scale))
    return block, offset + nbytes


def serialize_raw_block(layer_id: int, values: np.ndarray) -> bytes:
    """Uncompressed float32 payload in the same framing (the 32-bit control path)."""
    v = np.asarray(values, dtype=np.float32).reshape(-1)
    header = WIRE_HEADER.pack(layer_id, RAW_BITS, v.size, 1.0)
    return header + v.astype("<f4").tobytes()
