"""Fake quantization, magnitude top-k sparsification and their STE wrappers.

A ``CompressionSpec`` names the compression type applied to the linear layers
of a model. It has a short canonical string form used in configs and run
records::

    dense           no compression
    w4              4-bit weights, symmetric half-integer grid, absmax, per tensor
    w2:centered     2-bit weights on the integer grid {-2, -1, 0, 1}
    w4a4            4-bit weights and 4-bit (per-token) layer inputs
    a8              activation-only quantization
    s0.5:per_row    50% weight sparsity, top-k within each row
    s0.5:64of128    50% weight sparsity as 64:128 blocks
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from effscale.core import Tensor, custom_grad

SYMMETRIC = "symmetric_half_integer"
CENTERED = "centered_integer"
GRIDS = (SYMMETRIC, CENTERED)
STATS = ("absmax", "absmean")
QUANT_GRANULARITIES = ("per_tensor", "per_row", "per_token")
SPARSE_GRANULARITIES = ("per_tensor", "per_row", "block")
ALLOWED_BITS = (1, 2, 3, 4, 8)

# E|z| for z ~ N(0, 1)
_ABS_NORMAL_MEAN = math.sqrt(2.0 / math.pi)
# absmean anchors the grid extreme at this many estimated standard deviations
ABSMEAN_COVERAGE = 3.0


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    grid: str = SYMMETRIC
    scale_stat: str = "absmax"
    granularity: str = "per_tensor"

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.grid not in GRIDS:
            raise ValueError(f"unknown grid {self.grid!r}")
        if self.scale_stat not in STATS:
            raise ValueError(f"unknown scale statistic {self.scale_stat!r}")
        if self.granularity not in QUANT_GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def qmax(self) -> float:
        """Largest grid magnitude."""
        if self.grid == SYMMETRIC:
            return (2**self.bits - 1) / 2.0
        return float(2 ** (self.bits - 1))

    def levels(self) -> np.ndarray:
        if self.grid == SYMMETRIC:
            half = np.arange(2 ** (self.bits - 1)) + 0.5
            return np.concatenate([-half[::-1], half])
        lo = 2 ** (self.bits - 1)
        return np.arange(-lo, lo, dtype=np.float64)


@dataclass(frozen=True)
class SparsitySpec:
    """Fraction ``fraction`` of zeros, chosen by magnitude within each group.

    ``granularity="block"`` keeps exactly ``block[0]`` of every ``block[1]``
    contiguous entries (N:M sparsity).
    """

    fraction: float
    granularity: str = "per_row"
    block: tuple[int, int] | None = None

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ValueError(f"sparsity fraction must be in (0, 1), got {self.fraction}")
        if self.granularity not in SPARSE_GRANULARITIES:
            raise ValueError(f"unknown sparsity granularity {self.granularity!r}")
        if self.granularity == "block":
            if self.block is None:
                raise ValueError("block granularity needs (n, m)")
            n, m = self.block
            if not 0 < n < m:
                raise ValueError(f"invalid N:M block {n}:{m}")
            if abs((1 - n / m) - self.fraction) > 1e-9:
                raise ValueError(f"{n}:{m} does not match sparsity {self.fraction}")
        elif self.block is not None:
            raise ValueError("block given for non-block granularity")

    @classmethod
    def n_of_m(cls, n: int, m: int) -> "SparsitySpec":
        return cls(1 - n / m, "block", (n, m))


@dataclass(frozen=True)
class CompressionSpec:
    weight_compression: QuantSpec | SparsitySpec | None = None
    activation_quantization: QuantSpec | None = None

    def __post_init__(self):
        w = self.weight_compression
        if isinstance(w, QuantSpec) and w.granularity == "per_token":
            raise ValueError("per_token granularity is only valid for activations")
        a = self.activation_quantization
        if a is not None and a.granularity == "per_row":
            raise ValueError("per_row granularity is only valid for weights")

    @property
    def is_dense(self) -> bool:
        return self.weight_compression is None and self.activation_quantization is None

    @property
    def weight_bits(self) -> int:
        w = self.weight_compression
        return w.bits if isinstance(w, QuantSpec) else 16

    @property
    def activation_bits(self) -> int:
        a = self.activation_quantization
        return a.bits if a is not None else 16

    @property
    def sparsity(self) -> float:
        w = self.weight_compression
        return w.fraction if isinstance(w, SparsitySpec) else 0.0

    def __str__(self) -> str:
        return format_spec(self)

    @classmethod
    def parse(cls, text: str) -> "CompressionSpec":
        return parse_spec(text)


DENSE = CompressionSpec()
_WEIGHT_DEFAULT = QuantSpec(1)
_ACT_DEFAULT = QuantSpec(1, granularity="per_token")
_GRID_ALIASES = {"centered": CENTERED, "symmetric": SYMMETRIC}
_HEAD = re.compile(r"^(?:w(\d+)|s([0-9.]+))?(?:a(\d+))?$")


def _quant_mods(q: QuantSpec, default: QuantSpec, prefix: str) -> list[str]:
    mods = []
    if q.grid != default.grid:
        mods.append(prefix + ("centered" if q.grid == CENTERED else "symmetric"))
    if q.scale_stat != default.scale_stat:
        mods.append(prefix + q.scale_stat)
    if q.granularity != default.granularity:
        mods.append(prefix + q.granularity)
    return mods


def format_spec(spec: CompressionSpec) -> str:
    """Canonical short string; ``parse_spec(format_spec(s)) == s``."""
    if spec.is_dense:
        return "dense"
    w, a = spec.weight_compression, spec.activation_quantization
    head, mods = "", []
    if isinstance(w, QuantSpec):
        head = f"w{w.bits}"
        mods += _quant_mods(w, _WEIGHT_DEFAULT, "")
    elif isinstance(w, SparsitySpec):
        head = f"s{w.fraction:g}"
        mods.append(f"{w.block[0]}of{w.block[1]}" if w.granularity == "block" else w.granularity)
    if a is not None:
        head += f"a{a.bits}"
        mods += _quant_mods(a, _ACT_DEFAULT, "a-")
    return ":".join([head] + mods)


def parse_spec(text: str) -> CompressionSpec:
    text = text.strip()
    if text == "dense":
        return DENSE
    head, *mods = text.split(":")
    match = _HEAD.match(head)
    if not head or match is None:
        raise ValueError(f"cannot parse compression spec {text!r}")
    wbits, frac, abits = match.groups()
    wopts: dict = {}
    aopts: dict = {}
    sparse_gran: tuple[str, tuple[int, int] | None] = ("per_row", None)
    for mod in mods:
        target, key = (aopts, mod[2:]) if mod.startswith("a-") else (wopts, mod)
        if key in _GRID_ALIASES:
            target["grid"] = _GRID_ALIASES[key]
        elif key in STATS:
            target["scale_stat"] = key
        elif frac is not None and target is wopts and (key in ("per_tensor", "per_row") or "of" in key):
            if "of" in key:
                n, m = key.split("of")
                sparse_gran = ("block", (int(n), int(m)))
            else:
                sparse_gran = (key, None)
        elif key in QUANT_GRANULARITIES:
            target["granularity"] = key
        else:
            raise ValueError(f"unknown modifier {mod!r} in {text!r}")
    weight: QuantSpec | SparsitySpec | None = None
    if wbits is not None:
        weight = QuantSpec(int(wbits), **wopts)
    elif frac is not None:
        if wopts:
            raise ValueError(f"quantizer modifiers on a sparsity spec: {text!r}")
        weight = SparsitySpec(float(frac), sparse_gran[0], sparse_gran[1])
    elif wopts:
        raise ValueError(f"weight modifiers without weight compression: {text!r}")
    act = None
    if abits is not None:
        act = QuantSpec(int(abits), **{"granularity": "per_token", **aopts})
    elif aopts:
        raise ValueError(f"activation modifiers without activation bits: {text!r}")
    return CompressionSpec(weight, act)


# ---------------------------------------------------------------------------
# Quantization

def _groups(x: np.ndarray, granularity: str) -> np.ndarray:
    if x.size == 0:
        raise ValueError("cannot quantize an empty group")
    if granularity == "per_tensor":
        return x.reshape(1, -1)
    if granularity == "per_row":
        if x.ndim != 2:
            raise ValueError("per_row granularity needs a 2-D tensor")
        return x
    return x.reshape(-1, x.shape[-1])


def _anchor(g: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-group (magnitude, grid level) pair; the scale is magnitude / level."""
    if spec.scale_stat == "absmean":
        mag = np.abs(g).mean(axis=1) * (ABSMEAN_COVERAGE / _ABS_NORMAL_MEAN)
        return mag, np.full_like(mag, spec.qmax)
    if spec.grid == SYMMETRIC:
        mag = np.abs(g).max(axis=1)
        return mag, np.full_like(mag, spec.qmax)
    # Integer grid is asymmetric: pick the side that needs the larger scale
    # so that neither extreme of the group is clipped. Near ties go to the
    # negative side, whose power-of-two level maps any scale back exactly.
    neg_lvl = float(2 ** (spec.bits - 1))
    pos_lvl = neg_lvl - 1.0
    neg = np.maximum(-g.min(axis=1), 0.0)
    pos = np.maximum(g.max(axis=1), 0.0)
    if pos_lvl == 0:
        return neg, np.full_like(neg, neg_lvl)
    use_pos = pos * neg_lvl > neg * pos_lvl * (1 + 1e-12)
    return np.where(use_pos, pos, neg), np.where(use_pos, pos_lvl, neg_lvl)


def _snap(scale: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Nudge ``scale`` (by at most an ulp or two) to a value that the round
    trip ``(ref * scale) / ref`` reproduces exactly.

    The extreme quantized value is ``ref * scale``, so requantizing the output
    recovers the same scale and quantization is idempotent.
    """
    for _ in range(4):
        back = (ref * scale) / ref
        if np.array_equal(back, scale):
            break
        scale = back
    return scale


def quantize_codes(x: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Grid levels of ``x`` plus the per-group scale."""
    g = _groups(np.asarray(x), spec.granularity)
    dtype = g.dtype if np.issubdtype(g.dtype, np.floating) else np.float64
    g = g.astype(dtype, copy=False)
    mag, ref = _anchor(g, spec)
    ref = ref.astype(dtype)
    scale = _snap(np.where(mag > 0, mag, ref) / ref, ref)  # all-zero group: scale 1
    ay = np.abs(g / scale[:, None])
    if spec.grid == SYMMETRIC:
        lvl = np.minimum(np.maximum(np.ceil(ay), 1.0) - 0.5, spec.qmax)
    else:
        lvl = np.minimum(np.ceil(ay - 0.5), np.where(g < 0, 2.0 ** (spec.bits - 1), 2.0 ** (spec.bits - 1) - 1))
    lvl = np.copysign(lvl, g)
    lvl = np.where(mag[:, None] > 0, lvl, 0.0).astype(dtype, copy=False)
    return lvl, scale


def quantize(x, spec: QuantSpec):
    """Fake-quantize ``x`` to ``spec``'s grid with a dynamic per-group scale.

    Each value is mapped to the nearest grid level of ``x / scale`` (ties
    toward the level nearer zero) and multiplied back by the scale. An
    all-zero group quantizes to zeros. Returns the same type as ``x``.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(arr).all():
        raise ValueError("quantize needs finite input")
    lvl, scale = quantize_codes(arr, spec)
    out = (lvl * scale[:, None]).astype(arr.dtype, copy=False).reshape(arr.shape)
    return Tensor(out) if isinstance(x, Tensor) else out


def quantize_ste(latent: Tensor, spec: QuantSpec) -> Tensor:
    """Quantized forward, identity backward to the full-precision latent."""
    return custom_grad(quantize(latent.data, spec), latent)


# ---------------------------------------------------------------------------
# Sparsity

def keep_count(group_size: int, spec: SparsitySpec) -> int:
    if spec.granularity == "block":
        return spec.block[0]
    return max(1, math.ceil((1.0 - spec.fraction) * group_size - 1e-9))


def topk_mask(x, spec: SparsitySpec) -> np.ndarray:
    """0/1 mask keeping the largest-magnitude entries of every group.

    Ties are broken toward the lowest flat index.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(arr).all():
        raise ValueError("topk_mask needs finite input")
    if spec.granularity == "per_tensor":
        g = arr.reshape(1, -1)
    elif spec.granularity == "per_row":
        if arr.ndim != 2:
            raise ValueError("per_row sparsity needs a 2-D tensor")
        g = arr
    else:
        m = spec.block[1]
        if arr.size % m:
            raise ValueError(f"tensor of size {arr.size} does not split into groups of {m}")
        g = arr.reshape(-1, m)
    k = keep_count(g.shape[1], spec)
    order = np.argsort(-np.abs(g), axis=1, kind="stable")[:, :k]
    mask = np.zeros(g.shape, dtype=arr.dtype)
    np.put_along_axis(mask, order, 1, axis=1)
    return mask.reshape(arr.shape)


def sparsify_ste(latent: Tensor, spec: SparsitySpec) -> Tensor:
    """Top-k masked forward (mask recomputed each call), identity backward."""
    return custom_grad(latent.data * topk_mask(latent.data, spec), latent)


def compress_weight(w: Tensor, spec: CompressionSpec) -> Tensor:
    """Apply the weight part of ``spec`` through the matching STE wrapper."""
    c = spec.weight_compression
    if c is None:
        return w
    if isinstance(c, QuantSpec):
        return quantize_ste(w, c)
    return sparsify_ste(w, c)
