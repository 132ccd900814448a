"""Scalar, group, and binary weight quantizers plus bit accounting.

Affine quantization follows the asymmetric min-max scheme:

    scale = (max - min) / (2^bits - 1)        (floored for constant groups)
    zero  = clamp(round(-min / scale), 0, 2^bits - 1)
    code  = clamp(round(v / scale + zero), 0, 2^bits - 1)
    v_hat = (code - zero) * scale

Rounding is half-away-from-zero everywhere. Scales are rounded *up* to the
nearest float32 on construction so that serialized layers dequantize
bit-identically after a reload while the half-step error bound survives the
cast. Constant groups keep their exact value through the stored group min.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimMismatch, EmptyGroup, NonFinite
from .linalg import as_matrix

# Snapped to float32 so the constant-group flag survives serialization.
SCALE_FLOOR = float(np.float32(1e-12))

# Bit costs used by the accounting formulas below.
FP32_BITS = 32
FP16_BITS = 16
OUTLIER_INDEX_BITS = 16

__all__ = [
    "SCALE_FLOOR",
    "round_half_away",
    "AffineParams",
    "fit_affine",
    "quantize_dequantize",
    "BitAccount",
    "affine_bit_account",
    "binary_bit_account",
    "QuantizedLayer",
    "rtn_quantize",
    "StatsQuant",
    "double_quantize_stats",
    "binarize_region",
    "residual_binarize",
    "splitting_search",
    "BinaryLayer",
    "layer_to_tensors",
    "layer_from_tensors",
]


def round_half_away(x):
    """Round to nearest integer, ties away from zero (np.round ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return out if out.ndim else float(out)


def _f32_round_up(x):
    """Smallest float32 >= x, as float64. Keeps quantization grids covering."""
    x = np.asarray(x, dtype=np.float64)
    y = x.astype(np.float32)
    bump = y.astype(np.float64) < x
    if np.any(bump):
        y = np.where(bump, np.nextafter(y, np.float32(np.inf)), y)
    return y.astype(np.float64) if y.ndim else float(np.float64(y))


@dataclass(frozen=True)
class AffineParams:
    """Per-group affine parameters.

    `zero` is an integer-valued float after fitting; fractional values appear
    only after the statistics themselves have been double-quantized.
    `min_val` is the group minimum, used to dequantize constant groups exactly.
    """

    scale: float
    zero: float
    min_val: float


def fit_affine(values, bits: int) -> AffineParams:
    """Fit asymmetric min-max parameters for one group of values.

    The fitted range is widened to include zero (except for constant groups,
    which take the floored scale and dequantize through the stored min), so
    the integer zero point always lands inside the code range and the
    half-step error bound holds for every input.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyGroup("cannot fit affine params on an empty group")
    if not 1 <= bits <= 8:
        raise DimMismatch(f"bits must be in [1, 8], got {bits}")
    if not np.all(np.isfinite(v)):
        raise NonFinite("group contains NaN or Inf")
    mn = float(v.min())
    mx = float(v.max())
    maxq = (1 << bits) - 1
    if mx == mn:
        return AffineParams(scale=SCALE_FLOOR, zero=0.0, min_val=mn)
    lo = min(mn, 0.0)
    hi = max(mx, 0.0)
    scale = _f32_round_up((hi - lo) / maxq)
    zero = float(np.clip(round_half_away(-lo / scale), 0, maxq))
    return AffineParams(scale=scale, zero=zero, min_val=mn)


def quantize_dequantize(v, p: AffineParams, bits: int):
    """Quantize value(s) under `p`; returns (integer codes, reconstruction).

    Constant groups (scale at the floor) dequantize to the stored group min,
    whatever the code says.
    """
    maxq = (1 << bits) - 1
    x = np.asarray(v, dtype=np.float64)
    code = np.clip(round_half_away(x / p.scale + p.zero), 0, maxq)
    if p.scale <= SCALE_FLOOR:
        deq = np.full_like(x, p.min_val)
    else:
        deq = (code - p.zero) * p.scale
    if x.ndim == 0:
        return int(code), float(deq)
    return code.astype(np.int64), deq


# ---------------------------------------------------------------------------
# Bit accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BitAccount:
    """Total stored bits split by category; avg is total / weight count."""

    weight_bits: float
    stats_bits: float
    outlier_bits: float
    avg_bits_per_weight: float

    @property
    def total_bits(self) -> float:
        return self.weight_bits + self.stats_bits + self.outlier_bits


def affine_bit_account(
    n_rows: int,
    n_cols: int,
    bits: int,
    group_size: int,
    n_outliers: int,
    stat_bits: int | None = None,
    stat_group: int | None = None,
) -> BitAccount:
    """Accounting for group-affine layers.

    Per weight: `bits` for the code, (s_bits + z_bits) / group_size for the
    first-level statistics (fp16 each without double quantization, stat_bits
    each with it), 2 x 32 / (group_size * stat_group) for the second-level
    parameters when statistics are double-quantized, and 32 + 16 bits per
    outlier (fp32 value plus a 16-bit column index).
    """
    n = n_rows * n_cols
    if stat_bits is None:
        stats_rate = 2 * FP16_BITS / group_size
    else:
        stats_rate = 2 * stat_bits / group_size + 2 * FP32_BITS / (
            group_size * stat_group
        )
    weight_bits = float(bits) * n
    stats_bits = stats_rate * n
    outlier_bits = float(n_outliers) * (FP32_BITS + OUTLIER_INDEX_BITS)
    avg = bits + stats_rate + (n_outliers / n) * (FP32_BITS + OUTLIER_INDEX_BITS)
    return BitAccount(weight_bits, stats_bits, outlier_bits, avg)


def binary_bit_account(n_rows: int, n_cols: int, n_salient_cols: int) -> BitAccount:
    """Accounting for binary layers.

    One sign plane per weight plus a second plane on salient columns; fp16
    alphas (two per salient column, two shared low/high magnitudes, one split
    threshold) and a one-bit per-column salient mask. The low/high membership
    of non-salient weights is decode-side metadata and is not charged, which
    matches the convention behind reported ~1.1-bit binary footprints.
    """
    n = n_rows * n_cols
    weight_bits = float(n) + float(n_salient_cols * n_rows)
    stats_bits = FP16_BITS * (2 * n_salient_cols + 2 + 1) + float(n_cols)
    avg = (weight_bits + stats_bits) / n
    return BitAccount(weight_bits, stats_bits, 0.0, avg)


# ---------------------------------------------------------------------------
# Group-affine layers
# ---------------------------------------------------------------------------


def group_edges(d_col: int, group_size: int) -> list[tuple[int, int]]:
    """Column ranges of consecutive groups; the last group may be ragged."""
    if group_size < 1:
        raise DimMismatch(f"group_size must be >= 1, got {group_size}")
    return [(g, min(g + group_size, d_col)) for g in range(0, d_col, group_size)]


@dataclass
class QuantizedLayer:
    """Integer codes plus per-(row, group) statistics and isolated outliers."""

    bits: int
    group_size: int
    codes: np.ndarray  # int64, d_row x d_col
    scales: np.ndarray  # float64, d_row x n_groups
    zeros: np.ndarray  # float64, d_row x n_groups
    mins: np.ndarray  # float64, d_row x n_groups
    outliers: list[tuple[int, int, float]]  # sorted by (row, col)
    stats_q: "StatsQuant | None"
    accounting: BitAccount

    @property
    def d_row(self) -> int:
        return self.codes.shape[0]

    @property
    def d_col(self) -> int:
        return self.codes.shape[1]

    def dequantize(self) -> np.ndarray:
        """Reconstruct the weight matrix; outliers return their stored value."""
        edges = group_edges(self.d_col, self.group_size)
        out = np.empty(self.codes.shape)
        for g, (c0, c1) in enumerate(edges):
            scale = self.scales[:, g : g + 1]
            zero = self.zeros[:, g : g + 1]
            deq = (self.codes[:, c0:c1] - zero) * scale
            const = (scale <= SCALE_FLOOR).ravel()
            if np.any(const):
                deq[const] = self.mins[const, g : g + 1]
            out[:, c0:c1] = deq
        for r, c, val in self.outliers:
            out[r, c] = val
        return out


def _fit_group_rows(block: np.ndarray, bits: int, valid: np.ndarray | None = None):
    """Vectorized fit_affine per row over one group's columns.

    `valid` masks entries allowed to shape the range (outliers excluded);
    rows whose entries are all masked fall back to the full row.
    """
    if block.shape[1] == 0:
        raise EmptyGroup("group has no columns")
    if valid is None:
        mn = block.min(axis=1)
        mx = block.max(axis=1)
    else:
        none_valid = ~valid.any(axis=1)
        big = np.where(valid, block, np.inf)
        small = np.where(valid, block, -np.inf)
        mn = np.where(none_valid, block.min(axis=1), big.min(axis=1))
        mx = np.where(none_valid, block.max(axis=1), small.max(axis=1))
    maxq = (1 << bits) - 1
    lo = np.minimum(mn, 0.0)
    hi = np.maximum(mx, 0.0)
    constant = mx == mn
    scale = np.where(
        constant, SCALE_FLOOR, _f32_round_up(np.where(constant, 1.0, (hi - lo) / maxq))
    )
    zero = np.where(constant, 0.0, np.clip(round_half_away(-lo / scale), 0, maxq))
    return scale, zero, mn


def _code_group(block, scale, zero, bits):
    maxq = (1 << bits) - 1
    codes = np.clip(
        round_half_away(block / scale[:, None] + zero[:, None]), 0, maxq
    ).astype(np.int64)
    deq = (codes - zero[:, None]) * scale[:, None]
    return codes, deq


def rtn_quantize(w, bits: int, group_size: int) -> QuantizedLayer:
    """Round-to-nearest group quantization with no outliers or compensation."""
    m = as_matrix(w)
    d_row, d_col = m.shape
    edges = group_edges(d_col, group_size)
    codes = np.empty((d_row, d_col), dtype=np.int64)
    scales = np.empty((d_row, len(edges)))
    zeros = np.empty((d_row, len(edges)))
    mins = np.empty((d_row, len(edges)))
    for g, (c0, c1) in enumerate(edges):
        scale, zero, mn = _fit_group_rows(m[:, c0:c1], bits)
        codes[:, c0:c1], _ = _code_group(m[:, c0:c1], scale, zero, bits)
        scales[:, g] = scale
        zeros[:, g] = zero
        mins[:, g] = mn
    account = affine_bit_account(d_row, d_col, bits, group_size, n_outliers=0)
    return QuantizedLayer(
        bits=bits,
        group_size=group_size,
        codes=codes,
        scales=scales,
        zeros=zeros,
        mins=mins,
        outliers=[],
        stats_q=None,
        accounting=account,
    )


# ---------------------------------------------------------------------------
# Double quantization of quantization statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StatsQuant:
    """Second-round quantization record for first-level scales and zeros.

    Each run of `stat_group` statistics is quantized relative to its minimum
    (`bases`), which keeps the second-level grid tight even though scales are
    strictly positive.
    """

    stat_bits: int
    stat_group: int
    scale_codes: np.ndarray
    zero_codes: np.ndarray
    scale_params: list[AffineParams]
    zero_params: list[AffineParams]
    scale_bases: np.ndarray
    zero_bases: np.ndarray


def _dq_runs(values: np.ndarray, stat_bits: int, stat_group: int):
    codes = np.empty(values.shape, dtype=np.int64)
    deq = np.empty_like(values)
    params = []
    bases = []
    for r0 in range(0, values.size, stat_group):
        r1 = min(r0 + stat_group, values.size)
        base = float(values[r0:r1].min())
        p = fit_affine(values[r0:r1] - base, stat_bits)
        codes[r0:r1], run_deq = quantize_dequantize(
            values[r0:r1] - base, p, stat_bits
        )
        deq[r0:r1] = run_deq + base
        params.append(p)
        bases.append(base)
    return codes, deq, params, np.array(bases)


def double_quantize_stats(
    groups: list[AffineParams], stat_bits: int, stat_group: int
) -> tuple[StatsQuant, list[AffineParams]]:
    """Affine-quantize first-level scales and zeros in runs of `stat_group`.

    Returns the record plus replacement params whose dequantized statistics
    supersede the originals for every later dequantization. Dequantized
    scales are floored to stay positive and snapped to float32 so reloads
    reproduce them exactly.
    """
    if stat_bits < 2:
        raise DimMismatch(f"stat_bits must be >= 2, got {stat_bits}")
    if not groups:
        raise EmptyGroup("no statistics to quantize")
    scales = np.array([p.scale for p in groups])
    zeros = np.array([p.zero for p in groups])
    s_codes, s_deq, s_params, s_bases = _dq_runs(scales, stat_bits, stat_group)
    z_codes, z_deq, z_params, z_bases = _dq_runs(zeros, stat_bits, stat_group)
    s_deq = np.maximum(s_deq, SCALE_FLOOR)
    s_deq = np.asarray(s_deq, dtype=np.float32).astype(np.float64)
    z_deq = np.asarray(z_deq, dtype=np.float32).astype(np.float64)
    record = StatsQuant(
        stat_bits, stat_group, s_codes, z_codes, s_params, z_params, s_bases, z_bases
    )
    new_groups = [
        replace(p, scale=float(s), zero=float(z))
        for p, s, z in zip(groups, s_deq, z_deq)
    ]
    return record, new_groups


# ---------------------------------------------------------------------------
# Binary quantization primitives
# ---------------------------------------------------------------------------


def _signs(v: np.ndarray) -> np.ndarray:
    # sign(0) = +1 for a deterministic tie-break
    return np.where(v < 0.0, -1.0, 1.0)


def binarize_region(values) -> tuple[float, np.ndarray]:
    """Best single-plane approximation alpha * sign(v) in the l2 sense."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyGroup("cannot binarize an empty region")
    alpha = float(np.mean(np.abs(v)))
    return alpha, _signs(v)


def residual_binarize(values) -> tuple[float, np.ndarray, float, np.ndarray]:
    """Two-plane approximation: binarize v, then binarize the residual."""
    v = np.asarray(values, dtype=np.float64).ravel()
    alpha1, signs1 = binarize_region(v)
    residual = v - alpha1 * signs1
    alpha2, signs2 = binarize_region(residual)
    return alpha1, signs1, alpha2, signs2


def _split_error(mags: np.ndarray, threshold: float) -> float:
    low = mags[mags <= threshold]
    high = mags[mags > threshold]
    err = 0.0
    if low.size:
        err += float(np.sum((low - low.mean()) ** 2))
    if high.size:
        err += float(np.sum((high - high.mean()) ** 2))
    return err


def splitting_search(values, n_candidates: int = 64) -> float:
    """Magnitude threshold that best separates a bell-shaped region in two.

    Candidates are the distinct |v| values when few, otherwise their
    quantiles on a grid of at most `n_candidates`; ties resolve to the
    smallest threshold.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyGroup("cannot split an empty region")
    mags = np.abs(v)
    distinct = np.unique(mags)
    if distinct.size <= n_candidates:
        candidates = distinct
    else:
        qs = np.linspace(0.0, 1.0, n_candidates)
        candidates = np.unique(np.quantile(distinct, qs))
    best_t = float(candidates[0])
    best_err = _split_error(mags, best_t)
    for t in candidates[1:]:
        err = _split_error(mags, float(t))
        if err < best_err - 1e-15:
            best_err = err
            best_t = float(t)
    return best_t


@dataclass
class BinaryLayer:
    """Sign planes with per-segment magnitudes.

    Salient columns carry two planes (base plus residual) with per-column
    alphas; the remaining columns carry one plane whose magnitude is the
    shared low or high alpha selected by the split threshold. `membership`
    marks the high-magnitude region and is decode-side metadata.
    """

    split_threshold: float
    alpha_low: float
    alpha_high: float
    salient_cols: np.ndarray  # bool, d_col
    sal_alpha1: np.ndarray  # float64, d_col (0 on non-salient)
    sal_alpha2: np.ndarray  # float64, d_col (0 on non-salient)
    signs1: np.ndarray  # int8 +-1, d_row x d_col
    signs2: np.ndarray  # int8 +-1, d_row x d_col (used on salient cols)
    membership: np.ndarray  # bool, d_row x d_col (True = high region)
    accounting: BitAccount

    @property
    def d_row(self) -> int:
        return self.signs1.shape[0]

    @property
    def d_col(self) -> int:
        return self.signs1.shape[1]

    def dequantize(self) -> np.ndarray:
        sal = self.salient_cols
        out = np.empty(self.signs1.shape)
        mags = np.where(self.membership, self.alpha_high, self.alpha_low)
        out[:, ~sal] = (self.signs1 * mags)[:, ~sal]
        two_plane = (
            self.signs1 * self.sal_alpha1[None, :]
            + self.signs2 * self.sal_alpha2[None, :]
        )
        out[:, sal] = two_plane[:, sal]
        return out


# ---------------------------------------------------------------------------
# Archive wire format for quantized layers
# ---------------------------------------------------------------------------


def layer_to_tensors(name: str, layer) -> tuple[dict[str, np.ndarray], dict]:
    """Tensor entries plus JSON-able metadata for one quantized layer."""
    account = layer.accounting
    meta = {
        "accounting": {
            "weight_bits": account.weight_bits,
            "stats_bits": account.stats_bits,
            "outlier_bits": account.outlier_bits,
            "avg_bits_per_weight": account.avg_bits_per_weight,
        },
        "d_row": layer.d_row,
        "d_col": layer.d_col,
    }
    if isinstance(layer, QuantizedLayer):
        outliers = np.array(
            [[r, c, v] for r, c, v in layer.outliers], dtype=np.float64
        ).reshape(-1, 3)
        tensors = {
            f"codes/{name}": layer.codes.astype(np.float64),
            f"scales/{name}": layer.scales,
            f"zeros/{name}": layer.zeros,
            f"mins/{name}": layer.mins,
            f"outliers/{name}": outliers,
        }
        meta.update(
            {
                "kind": "affine",
                "bits": layer.bits,
                "group_size": layer.group_size,
                "outlier_count": len(layer.outliers),
                "double_quantized": layer.stats_q is not None,
                "stat_bits": layer.stats_q[0].stat_bits if layer.stats_q else None,
                "stat_group": layer.stats_q[0].stat_group if layer.stats_q else None,
            }
        )
        return tensors, meta
    if isinstance(layer, BinaryLayer):
        alphas = np.concatenate(
            [
                [layer.split_threshold, layer.alpha_low, layer.alpha_high],
                layer.sal_alpha1,
                layer.sal_alpha2,
            ]
        )
        tensors = {
            f"binsigns1/{name}": layer.signs1.astype(np.float64),
            f"binsigns2/{name}": layer.signs2.astype(np.float64),
            f"binmember/{name}": layer.membership.astype(np.float64),
            f"binsalient/{name}": layer.salient_cols.astype(np.float64),
            f"binalphas/{name}": alphas,
        }
        meta.update(
            {"kind": "binary", "n_salient_cols": int(layer.salient_cols.sum())}
        )
        return tensors, meta
    raise DimMismatch(f"unknown layer type {type(layer)!r}")


def layer_from_tensors(name: str, tensors: dict, meta: dict):
    """Rebuild a layer from archive tensors; inverse of layer_to_tensors."""
    if meta["kind"] == "affine":
        outliers_arr = np.asarray(tensors[f"outliers/{name}"], dtype=np.float64)
        outliers = [
            (int(r), int(c), float(v)) for r, c, v in outliers_arr.reshape(-1, 3)
        ]
        account = BitAccount(
            meta["accounting"]["weight_bits"],
            meta["accounting"]["stats_bits"],
            meta["accounting"]["outlier_bits"],
            meta["accounting"]["avg_bits_per_weight"],
        )
        return QuantizedLayer(
            bits=meta["bits"],
            group_size=meta["group_size"],
            codes=np.asarray(tensors[f"codes/{name}"], dtype=np.int64),
            scales=np.asarray(tensors[f"scales/{name}"], dtype=np.float64),
            zeros=np.asarray(tensors[f"zeros/{name}"], dtype=np.float64),
            mins=np.asarray(tensors[f"mins/{name}"], dtype=np.float64),
            outliers=outliers,
            stats_q=None,
            accounting=account,
        )
    if meta["kind"] == "binary":
        alphas = np.asarray(tensors[f"binalphas/{name}"], dtype=np.float64)
        d_col = np.asarray(tensors[f"binsalient/{name}"]).shape[0]
        account = BitAccount(
            meta["accounting"]["weight_bits"],
            meta["accounting"]["stats_bits"],
            meta["accounting"]["outlier_bits"],
            meta["accounting"]["avg_bits_per_weight"],
        )
        return BinaryLayer(
            split_threshold=float(alphas[0]),
            alpha_low=float(alphas[1]),
            alpha_high=float(alphas[2]),
            salient_cols=np.asarray(tensors[f"binsalient/{name}"]) != 0,
            sal_alpha1=alphas[3 : 3 + d_col].astype(np.float64),
            sal_alpha2=alphas[3 + d_col : 3 + 2 * d_col].astype(np.float64),
            signs1=np.asarray(tensors[f"binsigns1/{name}"], dtype=np.int8),
            signs2=np.asarray(tensors[f"binsigns2/{name}"], dtype=np.int8),
            membership=np.asarray(tensors[f"binmember/{name}"]) != 0,
            accounting=account,
        )
    raise DimMismatch(f"unknown layer kind {meta['kind']!r}")
