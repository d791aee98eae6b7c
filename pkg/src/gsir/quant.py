"""Uniform quantization of Gaussian attributes and the bit-exact container.

Attributes quantize in a normalized domain: centers are divided by canvas
width/height first so ranges are resolution-independent. Three range
strategies exist: raw per-image min/max, a fixed global base, and the
adaptive combination of the global base with bounded per-image offsets
derived from robust percentiles. Every derived range lands in the stream
header, so decoding needs no side information.

Container layout (magic "GSIR", little-endian throughout) is documented
field-by-field in FORMAT.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import GaussianSet
from .metrics import loss_render
from .render import RenderConfig, render

MAGIC = b"GSIR"
FORMAT_VERSION = 1

ATTRIBUTES = ("mu_x", "mu_y", "log_scale", "theta", "color")

DEFAULT_BITS = {"mu_x": 16, "mu_y": 16, "log_scale": 12, "theta": 8, "color": 8}

# Coarse allocation for range-strategy comparisons: quantization noise has to
# rival the model error for range quality to show, as in low-bpp ablations.
ABLATION_BITS = {"mu_x": 12, "mu_y": 12, "log_scale": 10, "theta": 6, "color": 6}

# Fixed base ranges standing in for the trained global quantizer: normalized
# centers (with margin for primitives refined slightly off-canvas),
# log-scales spanning the render floor up to canvas-sized blobs, theta's
# canonical period, and a symmetric signed color band.
DEFAULT_GLOBAL_RANGES = {
    "mu_x": (-0.125, 1.125),
    "mu_y": (-0.125, 1.125),
    "log_scale": (float(np.log(0.3)), float(np.log(64.0))),
    "theta": (0.0, float(np.pi)),
    "color": (-2.0, 2.0),
}

ADAPTIVE_PERCENTILES = (0.5, 99.5)
ADAPTIVE_OFFSET_BOUND = 0.5  # |delta| <= bound * base alpha

_MIN_ALPHA = 1e-6


class QuantError(ValueError):
    pass


class BitstreamError(ValueError):
    """Base for container decode failures."""


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class RangeStrategy(Enum):
    PER_IMAGE = 0
    GLOBAL = 1
    ADAPTIVE = 2


@dataclass(frozen=True)
class AttrQuant:
    bits: int
    alpha: float  # range width, > 0
    beta: float  # range origin

    def __post_init__(self):
        if not (1 <= self.bits <= 16):
            raise QuantError(f"bit width {self.bits} outside [1, 16]")
        if not (self.alpha > 0.0):
            raise QuantError("alpha must be positive")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def step(self) -> float:
        return self.alpha / self.levels


@dataclass(frozen=True)
class QuantSpec:
    mu_x: AttrQuant
    mu_y: AttrQuant
    log_scale: AttrQuant
    theta: AttrQuant
    color: AttrQuant

    def attr(self, name: str) -> AttrQuant:
        return getattr(self, name)


def make_spec(ranges: dict, bits: dict | None = None) -> QuantSpec:
    bits = bits or DEFAULT_BITS
    fields = {}
    for name in ATTRIBUTES:
        lo, hi = ranges[name]
        fields[name] = AttrQuant(bits=bits[name], alpha=max(hi - lo, _MIN_ALPHA), beta=lo)
    return QuantSpec(**fields)


def default_global_spec(bits: dict | None = None) -> QuantSpec:
    return make_spec(DEFAULT_GLOBAL_RANGES, bits)


def uniform_spec(bit_width: int) -> QuantSpec:
    """Global base with one bit width everywhere (e.g. 16 for near-lossless)."""
    return make_spec(DEFAULT_GLOBAL_RANGES, {name: bit_width for name in ATTRIBUTES})


def _normalized_columns(gset: GaussianSet, width: int, height: int) -> dict[str, np.ndarray]:
    return {
        "mu_x": gset.mu[:, 0] / width,
        "mu_y": gset.mu[:, 1] / height,
        "log_scale": gset.log_scale.reshape(-1),
        "theta": gset.theta,
        "color": gset.color.reshape(-1),
    }


def quantize_values(x: np.ndarray, aq: AttrQuant) -> np.ndarray:
    clipped = np.clip(x, aq.beta, aq.beta + aq.alpha)
    return np.rint((clipped - aq.beta) / aq.alpha * aq.levels).astype(np.uint32)


def dequantize_values(symbols: np.ndarray, aq: AttrQuant) -> np.ndarray:
    return aq.beta + symbols.astype(np.float64) / aq.levels * aq.alpha


def quantize(gset: GaussianSet, spec: QuantSpec, width: int, height: int) -> dict[str, np.ndarray]:
    """Per-attribute symbol arrays in [0, 2^b - 1]."""
    cols = _normalized_columns(gset, width, height)
    return {name: quantize_values(cols[name], spec.attr(name)) for name in ATTRIBUTES}


def dequantize(
    symbols: dict[str, np.ndarray], spec: QuantSpec, width: int, height: int,
    stage_id: np.ndarray | None = None,
) -> GaussianSet:
    mu_x = dequantize_values(symbols["mu_x"], spec.mu_x) * width
    mu_y = dequantize_values(symbols["mu_y"], spec.mu_y) * height
    log_scale = dequantize_values(symbols["log_scale"], spec.log_scale).reshape(-1, 2)
    theta = dequantize_values(symbols["theta"], spec.theta)
    color = dequantize_values(symbols["color"], spec.color).reshape(-1, 3)
    return GaussianSet.from_arrays(
        mu=np.column_stack([mu_x, mu_y]), log_scale=log_scale, theta=theta, color=color,
        stage_id=stage_id,
    )


def quantize_roundtrip(gset: GaussianSet, spec: QuantSpec, width: int, height: int) -> GaussianSet:
    return dequantize(quantize(gset, spec, width, height), spec, width, height, stage_id=gset.stage_id)


def derive_ranges(
    gset: GaussianSet,
    strategy: RangeStrategy,
    global_base: QuantSpec | None = None,
    width: int = 1,
    height: int = 1,
    bits: dict | None = None,
) -> QuantSpec:
    """Quantization ranges per strategy.

    PER_IMAGE takes the raw min/max of each attribute; GLOBAL returns the base
    untouched; ADAPTIVE offsets the base toward robust (0.5%, 99.5%)
    percentiles of the set, with offsets clamped to +/- 0.5 * base alpha.
    """
    global_base = global_base or default_global_spec(bits)
    if strategy is RangeStrategy.GLOBAL:
        return global_base
    if gset.count == 0:
        raise QuantError(f"{strategy.name} ranges need a non-empty set")
    cols = _normalized_columns(gset, width, height)
    channels = {"log_scale": 2, "color": 3}
    fields = {}
    for name in ATTRIBUTES:
        base = global_base.attr(name)
        values = cols[name].reshape(-1, channels.get(name, 1))
        if strategy is RangeStrategy.PER_IMAGE:
            lo = float(np.min(values))
            hi = float(np.max(values))
            alpha, beta = max(hi - lo, _MIN_ALPHA), lo
        else:
            # per-channel order statistics: robust to outliers at scale yet
            # exact min/max for small sets, where every primitive matters
            lo = float(np.min(np.percentile(values, ADAPTIVE_PERCENTILES[0], axis=0, method="lower")))
            hi = float(np.max(np.percentile(values, ADAPTIVE_PERCENTILES[1], axis=0, method="higher")))
            bound = ADAPTIVE_OFFSET_BOUND * base.alpha
            d_beta = float(np.clip(lo - base.beta, -bound, bound))
            d_alpha = float(np.clip((hi - lo) - base.alpha, -bound, bound))
            alpha, beta = max(base.alpha + d_alpha, _MIN_ALPHA), base.beta + d_beta
        fields[name] = AttrQuant(bits=base.bits, alpha=alpha, beta=beta)
    return QuantSpec(**fields)


@dataclass
class StePassMask:
    """Per-attribute boolean arrays: True where gradients pass through."""

    mu: np.ndarray
    log_scale: np.ndarray
    theta: np.ndarray
    color: np.ndarray


def ste_quantize(gset: GaussianSet, spec: QuantSpec, width: int, height: int) -> tuple[GaussianSet, StePassMask]:
    """Quantized-value set plus the straight-through gradient rule.

    Forward is dequantize(quantize(x)); the gradient multiplier is 1 for
    in-range values and 0 for clamped ones.
    """
    qset = quantize_roundtrip(gset, spec, width, height)

    def in_range(values, aq):
        return (values >= aq.beta) & (values <= aq.beta + aq.alpha)

    cols = _normalized_columns(gset, width, height)
    mask = StePassMask(
        mu=np.column_stack([in_range(cols["mu_x"], spec.mu_x), in_range(cols["mu_y"], spec.mu_y)]),
        log_scale=in_range(cols["log_scale"], spec.log_scale).reshape(-1, 2),
        theta=in_range(cols["theta"], spec.theta),
        color=in_range(cols["color"], spec.color).reshape(-1, 3),
    )
    return qset, mask


def quantization_error_terms(gset: GaussianSet, spec: QuantSpec, width: int, height: int):
    """Normalized residuals (x - deq(q(x))) / alpha per attribute column."""
    cols = _normalized_columns(gset, width, height)
    out = {}
    for name in ATTRIBUTES:
        aq = spec.attr(name)
        deq = dequantize_values(quantize_values(cols[name], aq), aq)
        out[name] = (cols[name] - deq) / aq.alpha
    return out


def loss_q(
    gset: GaussianSet, spec: QuantSpec, target: np.ndarray,
    gamma: float = 0.1, render_cfg: RenderConfig | None = None,
) -> float:
    """Render loss of the quantized set plus gamma * mean squared normalized error."""
    height, width = target.shape[:2]
    qset = quantize_roundtrip(gset, spec, width, height)
    breakdown = loss_render(render(qset, width, height, render_cfg), target)
    errs = quantization_error_terms(gset, spec, width, height)
    flat = np.concatenate([e.reshape(-1) for e in errs.values()]) if gset.count else np.zeros(1)
    return breakdown.total + gamma * float(np.mean(flat**2))


# --- container ---------------------------------------------------------------

# Bit-packed payload channels in stream order; each pulls one column of
# symbols and its AttrQuant group.
_CHANNELS = (
    ("mu_x", "mu_x"),
    ("mu_y", "mu_y"),
    ("log_scale", "log_scale"),  # two columns packed consecutively
    ("theta", "theta"),
    ("color", "color"),  # three columns packed consecutively
)


@dataclass(frozen=True)
class StreamMeta:
    width: int
    height: int
    n_stages: int
    strategy: RangeStrategy
    stage_counts: tuple[int, ...]


def _channel_columns(symbols: dict[str, np.ndarray], count: int):
    yield "mu_x", symbols["mu_x"]
    yield "mu_y", symbols["mu_y"]
    ls = symbols["log_scale"].reshape(count, 2) if count else np.zeros((0, 2), dtype=np.uint32)
    yield "log_scale", ls[:, 0]
    yield "log_scale", ls[:, 1]
    yield "theta", symbols["theta"]
    col = symbols["color"].reshape(count, 3) if count else np.zeros((0, 3), dtype=np.uint32)
    for ch in range(3):
        yield "color", col[:, ch]


def bits_per_primitive(spec: QuantSpec) -> int:
    return spec.mu_x.bits + spec.mu_y.bits + 2 * spec.log_scale.bits + spec.theta.bits + 3 * spec.color.bits


def storage_spec(spec: QuantSpec) -> QuantSpec:
    """Spec with ranges rounded to the f32 precision the header stores.

    Encoding quantizes with this spec so decoded parameters are bit-identical
    to an in-memory quantize/dequantize against it.
    """
    fields = {
        name: AttrQuant(
            bits=spec.attr(name).bits,
            alpha=float(np.float32(spec.attr(name).alpha)),
            beta=float(np.float32(spec.attr(name).beta)),
        )
        for name in ATTRIBUTES
    }
    return QuantSpec(**fields)


def _pack_bits(columns, spec: QuantSpec) -> bytes:
    pieces = []
    for name, col in columns:
        b = spec.attr(name).bits
        if col.size == 0:
            continue
        # LSB-first bit matrix: (n, b) of the low b bits of each symbol
        bits = (col[:, None] >> np.arange(b)[None, :]) & 1
        pieces.append(bits.astype(np.uint8).reshape(-1))
    if not pieces:
        return b""
    stream = np.concatenate(pieces)
    return np.packbits(stream, bitorder="little").tobytes()


def _unpack_bits(payload: bytes, count: int, spec: QuantSpec):
    total_bits = count * bits_per_primitive(spec)
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size * 8 < total_bits:
        raise TruncatedStreamError(f"payload holds {raw.size * 8} bits, need {total_bits}")
    stream = np.unpackbits(raw, bitorder="little", count=total_bits)
    out = {"mu_x": None, "mu_y": None, "log_scale": [], "theta": None, "color": []}
    pos = 0
    for name in ("mu_x", "mu_y", "log_scale", "log_scale", "theta", "color", "color", "color"):
        b = getattr(spec, name).bits
        bits = stream[pos : pos + count * b].reshape(count, b).astype(np.uint32)
        col = (bits << np.arange(b, dtype=np.uint32)[None, :]).sum(axis=1, dtype=np.uint32)
        pos += count * b
        if name in ("log_scale", "color"):
            out[name].append(col)
        else:
            out[name] = col
    return {
        "mu_x": out["mu_x"],
        "mu_y": out["mu_y"],
        "log_scale": np.column_stack(out["log_scale"]).reshape(-1),
        "theta": out["theta"],
        "color": np.column_stack(out["color"]).reshape(-1),
    }


def encode_bitstream(gset: GaussianSet, spec: QuantSpec, meta: StreamMeta) -> bytes:
    """Serialize quantized symbols with a self-describing header."""
    if sum(meta.stage_counts) != gset.count or len(meta.stage_counts) != meta.n_stages:
        raise QuantError("stage counts do not match the set")
    spec = storage_spec(spec)
    symbols = quantize(gset, spec, meta.width, meta.height)
    head = bytearray()
    head += MAGIC
    head += struct.pack("<H", FORMAT_VERSION)
    head += struct.pack("<II", meta.width, meta.height)
    head += struct.pack("<H", meta.n_stages)
    head += struct.pack(f"<{meta.n_stages}I", *meta.stage_counts)
    head += struct.pack("<B", meta.strategy.value)
    for name in ATTRIBUTES:
        aq = spec.attr(name)
        head += struct.pack("<Bff", aq.bits, aq.alpha, aq.beta)
    payload = _pack_bits(_channel_columns(symbols, gset.count), spec)
    return bytes(head) + payload


def decode_bitstream(data: bytes) -> tuple[GaussianSet, QuantSpec, StreamMeta]:
    """Inverse of encode_bitstream; symbol-exact, no side information needed."""
    view = memoryview(data)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise TruncatedStreamError(f"stream ends {n - len(view)} bytes early")
        chunk, view = view[:n], view[n:]
        return chunk

    if bytes(take(4)) != MAGIC:
        raise BadMagicError("bad magic: not a GSIR stream")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    width, height = struct.unpack("<II", take(8))
    (n_stages,) = struct.unpack("<H", take(2))
    stage_counts = struct.unpack(f"<{n_stages}I", take(4 * n_stages))
    (strategy_tag,) = struct.unpack("<B", take(1))
    try:
        strategy = RangeStrategy(strategy_tag)
    except ValueError as exc:
        raise BitstreamError(f"unknown range strategy tag {strategy_tag}") from exc
    fields = {}
    for name in ATTRIBUTES:
        bits, alpha, beta = struct.unpack("<Bff", take(9))
        fields[name] = AttrQuant(bits=bits, alpha=float(alpha), beta=float(beta))
    spec = QuantSpec(**fields)
    meta = StreamMeta(width=width, height=height, n_stages=n_stages, strategy=strategy,
                      stage_counts=tuple(stage_counts))

    count = sum(stage_counts)
    expected = -(-count * bits_per_primitive(spec) // 8)
    if len(view) < expected:
        raise TruncatedStreamError(f"payload holds {len(view)} bytes, need {expected}")
    symbols = _unpack_bits(bytes(view), count, spec)
    stage_id = np.repeat(np.arange(1, n_stages + 1, dtype=np.int32), stage_counts)
    gset = dequantize(symbols, spec, width, height, stage_id=stage_id)
    return gset, spec, meta
