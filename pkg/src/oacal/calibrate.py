"""Hessian-driven layer calibration.

Columns are quantized left to right. Quantizing column q forces a residual
delta on that column; the unquantized columns to the right absorb the
compensation

    update_q = -(residual / inv_qq) * inv_q_row

evaluated on the inverse of the Hessian restricted to the still-active
columns. The trailing-submatrix inverses are read off the upper Cholesky
factor of the full damped inverse, so one factorization per layer suffices.
Updates are batched per block: columns inside the current block are
compensated immediately, everything to the right receives the accumulated
block update when the block closes.

Every backend (plain, outlier-isolating, binary) accepts both Hessian
flavours through the same interface.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    NonPositiveDiagonal,
    ShapeMismatch,
)
from .hessian import HessianMode, regularize
from .linalg import (
    as_matrix,
    as_sym_matrix,
    cholesky,
    cholesky_inverse,
    inverse_upper_factor,
)
from .quant import (
    BinaryLayer,
    QuantizedLayer,
    SCALE_FLOOR,
    AffineParams,
    affine_bit_account,
    binarize_region,
    binary_bit_account,
    double_quantize_stats,
    group_edges,
    residual_binarize,
    round_half_away,
    rtn_quantize,
    splitting_search,
    _fit_group_rows,
    _signs,
)

__all__ = [
    "Backend",
    "CalibSpec",
    "CalibReport",
    "saliency",
    "detect_outliers",
    "optimal_update",
    "calibrate_layer",
    "calibrate_layer_binary",
    "sweep_alpha",
]


class Backend(enum.Enum):
    OPTQ = "optq"
    SPQR = "spqr"
    BINARY = "binary"


@dataclass(frozen=True)
class CalibSpec:
    """Per-layer calibration configuration."""

    bits: int = 2
    group_size: int = 16
    tau: float = 3.5
    alpha: float = 0.1
    block_size: int = 32
    backend: Backend = Backend.OPTQ
    hessian_mode: HessianMode = HessianMode.AGNOSTIC
    stat_bits: int = 3
    stat_group: int = 16
    salient_fraction: float = 0.10

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if self.alpha < 0.0:
            raise ConfigError("alpha must be >= 0")
        if self.backend is Backend.SPQR and self.tau <= 0.0:
            raise ConfigError("tau must be > 0 for the outlier-isolating backend")
        if not 0.0 <= self.salient_fraction <= 1.0:
            raise ConfigError("salient_fraction must be in [0, 1]")


@dataclass
class CalibReport:
    """Per-layer result summary; every threshold echoed for auditability."""

    layer: str
    proxy_error: float
    outlier_count: int
    outlier_rate: float
    column_update_norms: list[float]
    avg_bits_per_weight: float
    alpha: float
    tau: float | None
    tau_normalization: str = "mean_saliency"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "proxy_error": self.proxy_error,
            "outlier_count": self.outlier_count,
            "outlier_rate": self.outlier_rate,
            "column_update_norms": self.column_update_norms,
            "avg_bits_per_weight": self.avg_bits_per_weight,
            "alpha": self.alpha,
            "tau": self.tau,
            "tau_normalization": self.tau_normalization,
            **self.extra,
        }


def saliency(w, w_hat, h_inv_diag_k):
    """Quantization sensitivity (w - w_hat)^2 / inv_diag; zero iff w == w_hat."""
    d = np.asarray(h_inv_diag_k, dtype=np.float64)
    if np.any(d <= 0.0):
        raise NonPositiveDiagonal(
            "inverse-Hessian diagonal must be > 0; increase damping"
        )
    s = (np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64)) ** 2 / d
    return s if s.ndim else float(s)


def _inverse_diag(h) -> np.ndarray:
    inv = cholesky_inverse(cholesky(h))
    diag = np.diag(inv).copy()
    if np.any(diag <= 0.0):
        raise NonPositiveDiagonal("inverse diagonal not strictly positive")
    return diag


def detect_outliers(w, h, spec: CalibSpec, h_inv_diag=None) -> np.ndarray:
    """Mark weights whose naive group-RTN saliency exceeds tau x mean saliency.

    `h` must already be damped and invertible. The tau threshold multiplies
    the layer's mean saliency; that normalization is echoed in reports.
    """
    m = as_matrix(w)
    diag = _inverse_diag(h) if h_inv_diag is None else np.asarray(h_inv_diag)
    if diag.shape[0] != m.shape[1]:
        raise ShapeMismatch("hessian dim must match the column count")
    naive = rtn_quantize(m, spec.bits, spec.group_size).dequantize()
    s = saliency(m, naive, diag[None, :])
    return s > spec.tau * float(np.mean(s))


def optimal_update(w_col_residual, h_inv, q: int) -> np.ndarray:
    """Rank-1 compensation for pinning column q to its quantized value.

    Returns the full d_row x d_col update matrix
    -(residual / inv[q,q]) outer inv[q,:]; with a diagonal Hessian it touches
    only column q.
    """
    residual = np.asarray(w_col_residual, dtype=np.float64)
    inv = as_sym_matrix(h_inv)
    if not 0 <= q < inv.shape[0]:
        raise ShapeMismatch(f"column index {q} outside 0..{inv.shape[0] - 1}")
    if residual.shape != (inv.shape[0],) and residual.ndim != 1:
        raise ShapeMismatch("residual must be a vector")
    d = inv[q, q]
    if d <= 0.0:
        raise NonPositiveDiagonal("inv[q, q] must be > 0; increase damping")
    return -np.outer(residual / d, inv[q, :])


def _prepare(w, h, spec: CalibSpec):
    m = as_matrix(w)
    sym = as_sym_matrix(h)
    if sym.shape[0] != m.shape[1]:
        raise ShapeMismatch(
            f"hessian dim {sym.shape[0]} != layer column count {m.shape[1]}"
        )
    damped = regularize(sym, spec.alpha)
    hinv = cholesky_inverse(cholesky(damped))
    diag = np.diag(hinv).copy()
    if np.any(diag <= 0.0):
        raise NonPositiveDiagonal("inverse diagonal not strictly positive")
    upper = inverse_upper_factor(damped)
    return m, damped, diag, upper


def _proxy_error(delta: np.ndarray, damped: np.ndarray) -> float:
    return float(np.sum((delta @ damped) * delta))


def calibrate_layer(
    w,
    h,
    spec: CalibSpec,
    layer_name: str = "layer",
    trace: list | None = None,
    guard: bool = True,
) -> tuple[QuantizedLayer, CalibReport]:
    """Column-wise calibrated group quantization under any Hessian source.

    With `guard` enabled (the default) the result is compared against plain
    group RTN under the same damped-Hessian objective and the better of the
    two is returned; greedy clamped rounding can occasionally lose to RTN on
    adversarial layers, and the guard makes "never worse than RTN" hold by
    construction. A fallback is disclosed in the report.

    When `trace` is a list, a copy of the working matrix is appended after
    every block flush (per column with block_size=1), which lets tests check
    the sequential updates against a direct constrained solver step by step.
    """
    if spec.backend is Backend.BINARY:
        raise ConfigError("use calibrate_layer_binary for the binary backend")
    m, damped, inv_diag, upper = _prepare(w, h, spec)
    d_row, d_col = m.shape
    bits = spec.bits
    maxq = (1 << bits) - 1

    outlier_mask = np.zeros(m.shape, dtype=bool)
    if spec.backend is Backend.SPQR:
        outlier_mask = detect_outliers(m, damped, spec, h_inv_diag=inv_diag)

    edges = group_edges(d_col, spec.group_size)
    group_start = {c0: g for g, (c0, c1) in enumerate(edges)}
    col_group = np.repeat(np.arange(len(edges)), [c1 - c0 for c0, c1 in edges])

    work = m.copy()
    w_hat = np.empty_like(m)
    codes = np.empty((d_row, d_col), dtype=np.int64)
    scales = np.empty((d_row, len(edges)))
    zeros = np.empty((d_row, len(edges)))
    mins = np.empty((d_row, len(edges)))
    stats_records = [] if spec.backend is Backend.SPQR else None
    update_norms: list[float] = []

    for i1 in range(0, d_col, spec.block_size):
        i2 = min(i1 + spec.block_size, d_col)
        err_block = np.zeros((d_row, i2 - i1))
        for q in range(i1, i2):
            if q in group_start:
                g = group_start[q]
                c0, c1 = edges[g]
                scale, zero, mn = _fit_group_rows(
                    work[:, c0:c1], bits, valid=~outlier_mask[:, c0:c1]
                )
                if spec.backend is Backend.SPQR:
                    params = [
                        AffineParams(scale[r], zero[r], mn[r]) for r in range(d_row)
                    ]
                    record, params = double_quantize_stats(
                        params, spec.stat_bits, spec.stat_group
                    )
                    stats_records.append(record)
                    scale = np.array([p.scale for p in params])
                    zero = np.array([p.zero for p in params])
                scales[:, g] = scale
                zeros[:, g] = zero
                mins[:, g] = mn
            g = col_group[q]
            s_col = scales[:, g]
            z_col = zeros[:, g]
            col = work[:, q]
            code = np.clip(round_half_away(col / s_col + z_col), 0, maxq)
            deq = (code - z_col) * s_col
            const = s_col <= SCALE_FLOOR
            if np.any(const):
                deq = np.where(const, mins[:, g], deq)
            out_rows = outlier_mask[:, q]
            if np.any(out_rows):
                deq = np.where(out_rows, m[:, q], deq)
            codes[:, q] = code.astype(np.int64)
            w_hat[:, q] = deq
            d = upper[q, q]
            if d <= 0.0:
                raise NonPositiveDiagonal("upper factor diagonal not positive")
            err_scaled = (col - deq) / d
            work[:, q:i2] -= np.outer(err_scaled, upper[q, q:i2])
            err_block[:, q - i1] = err_scaled
            tail = upper[q, q + 1 :]
            update_norms.append(
                float(np.linalg.norm(err_scaled) * np.linalg.norm(tail))
            )
        if i2 < d_col:
            work[:, i2:] -= err_block @ upper[i1:i2, i2:]
        if trace is not None:
            trace.append(work.copy())

    outliers = [
        (int(r), int(c), float(m[r, c])) for r, c in np.argwhere(outlier_mask)
    ]
    n_out = len(outliers)
    account = affine_bit_account(
        d_row,
        d_col,
        bits,
        spec.group_size,
        n_out,
        stat_bits=spec.stat_bits if spec.backend is Backend.SPQR else None,
        stat_group=spec.stat_group,
    )
    layer = QuantizedLayer(
        bits=bits,
        group_size=spec.group_size,
        codes=codes,
        scales=scales,
        zeros=zeros,
        mins=mins,
        outliers=outliers,
        stats_q=stats_records,
        accounting=account,
    )
    proxy = _proxy_error(w_hat - m, damped)
    extra = {"backend": spec.backend.value, "hessian_mode": spec.hessian_mode.value}
    if guard:
        rtn_layer = rtn_quantize(m, bits, spec.group_size)
        rtn_proxy = _proxy_error(rtn_layer.dequantize() - m, damped)
        if rtn_proxy < proxy:
            layer = rtn_layer
            proxy = rtn_proxy
            n_out = 0
            update_norms = [0.0] * d_col
            account = rtn_layer.accounting
            extra["fallback"] = "rtn"
    report = CalibReport(
        layer=layer_name,
        proxy_error=proxy,
        outlier_count=n_out,
        outlier_rate=n_out / m.size,
        column_update_norms=update_norms,
        avg_bits_per_weight=account.avg_bits_per_weight,
        alpha=spec.alpha,
        tau=spec.tau if spec.backend is Backend.SPQR else None,
        extra=extra,
    )
    return layer, report


def calibrate_layer_binary(
    w,
    h,
    spec: CalibSpec,
    layer_name: str = "layer",
    compensate: bool = True,
    guard: bool = True,
) -> tuple[BinaryLayer, CalibReport]:
    """Binary calibration: residual planes on salient columns, split elsewhere.

    Salient columns are the top `salient_fraction` by column saliency of a
    naive one-plane binarization. Non-salient weights reconstruct as
    sign * (low | high alpha) selected by the magnitude split threshold; the
    same left-to-right compensation as the affine path runs over the
    binarization residuals. `compensate=False` skips the updates (baseline
    for paired comparisons); with `guard` the better of the compensated and
    plain results under the damped objective is returned.
    """
    if spec.backend is not Backend.BINARY:
        raise ConfigError("spec.backend must be BINARY")
    m, damped, inv_diag, upper = _prepare(w, h, spec)
    d_row, d_col = m.shape

    col_alpha = np.mean(np.abs(m), axis=0)
    naive = _signs(m) * col_alpha[None, :]
    sal_score = np.sum(saliency(m, naive, inv_diag[None, :]), axis=0)
    n_sal = int(round(spec.salient_fraction * d_col))
    if spec.salient_fraction > 0.0:
        n_sal = max(1, n_sal)
    order = np.argsort(-sal_score, kind="stable")
    salient = np.zeros(d_col, dtype=bool)
    salient[order[:n_sal]] = True

    # alphas and threshold snap to float32 so archived layers dequantize
    # bit-identically on reload
    non_sal_values = m[:, ~salient]
    if non_sal_values.size:
        threshold = float(np.float32(splitting_search(non_sal_values)))
        mags = np.abs(non_sal_values)
        low = mags[mags <= threshold]
        high = mags[mags > threshold]
        alpha_low = float(np.float32(low.mean())) if low.size else 0.0
        alpha_high = float(np.float32(high.mean())) if high.size else 0.0
    else:
        threshold, alpha_low, alpha_high = 0.0, 0.0, 0.0

    work = m.copy()
    w_hat = np.empty_like(m)
    signs1 = np.ones((d_row, d_col), dtype=np.int8)
    signs2 = np.ones((d_row, d_col), dtype=np.int8)
    membership = np.zeros((d_row, d_col), dtype=bool)
    sal_alpha1 = np.zeros(d_col)
    sal_alpha2 = np.zeros(d_col)
    update_norms: list[float] = []

    for i1 in range(0, d_col, spec.block_size):
        i2 = min(i1 + spec.block_size, d_col)
        err_block = np.zeros((d_row, i2 - i1))
        for q in range(i1, i2):
            col = work[:, q]
            if salient[q]:
                a1, s1, a2, s2 = residual_binarize(col)
                a1 = float(np.float32(a1))
                a2 = float(np.float32(a2))
                deq = a1 * s1 + a2 * s2
                sal_alpha1[q] = a1
                sal_alpha2[q] = a2
                signs1[:, q] = s1.astype(np.int8)
                signs2[:, q] = s2.astype(np.int8)
            else:
                sgn = _signs(col)
                high_rows = np.abs(col) > threshold
                deq = sgn * np.where(high_rows, alpha_high, alpha_low)
                signs1[:, q] = sgn.astype(np.int8)
                membership[:, q] = high_rows
            w_hat[:, q] = deq
            if compensate:
                d = upper[q, q]
                if d <= 0.0:
                    raise NonPositiveDiagonal("upper factor diagonal not positive")
                err_scaled = (col - deq) / d
                work[:, q:i2] -= np.outer(err_scaled, upper[q, q:i2])
                err_block[:, q - i1] = err_scaled
                tail = upper[q, q + 1 :]
                update_norms.append(
                    float(np.linalg.norm(err_scaled) * np.linalg.norm(tail))
                )
            else:
                update_norms.append(0.0)
        if compensate and i2 < d_col:
            work[:, i2:] -= err_block @ upper[i1:i2, i2:]

    account = binary_bit_account(d_row, d_col, int(np.sum(salient)))
    layer = BinaryLayer(
        split_threshold=float(threshold),
        alpha_low=alpha_low,
        alpha_high=alpha_high,
        salient_cols=salient,
        sal_alpha1=sal_alpha1,
        sal_alpha2=sal_alpha2,
        signs1=signs1,
        signs2=signs2,
        membership=membership,
        accounting=account,
    )
    extra = {
        "backend": spec.backend.value,
        "hessian_mode": spec.hessian_mode.value,
        "salient_fraction": spec.salient_fraction,
        "n_salient_cols": int(np.sum(salient)),
        "split_threshold": float(threshold),
    }
    proxy = _proxy_error(w_hat - m, damped)
    if compensate and guard:
        plain_layer, plain_report = calibrate_layer_binary(
            w, h, spec, layer_name, compensate=False, guard=False
        )
        if plain_report.proxy_error < proxy:
            layer = plain_layer
            proxy = plain_report.proxy_error
            update_norms = [0.0] * d_col
            extra["fallback"] = "no_compensation"
    report = CalibReport(
        layer=layer_name,
        proxy_error=proxy,
        outlier_count=0,
        outlier_rate=0.0,
        column_update_norms=update_norms,
        avg_bits_per_weight=account.avg_bits_per_weight,
        alpha=spec.alpha,
        tau=None,
        extra=extra,
    )
    return layer, report


def sweep_alpha(w, h, spec: CalibSpec, grid) -> tuple[float, dict]:
    """Calibrate once per damping factor; report every candidate.

    Layer-level selection is by smallest proxy error (ties go to the smaller
    alpha); the pipeline-level sweep reselects by validation perplexity.
    Candidates whose Cholesky fails are recorded as failed, not fatal.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("alpha grid must be nonempty")
    results: dict[float, dict] = {}
    best_alpha = None
    best_proxy = np.inf
    for a in sorted(grid):
        trial = replace(spec, alpha=float(a))
        try:
            if spec.backend is Backend.BINARY:
                layer, report = calibrate_layer_binary(w, h, trial)
            else:
                layer, report = calibrate_layer(w, h, trial)
        except Exception as exc:  # noqa: BLE001 - candidate failure is a result
            results[float(a)] = {"status": "failed", "error": str(exc)}
            continue
        results[float(a)] = {"status": "ok", "layer": layer, "report": report}
        if report.proxy_error < best_proxy:
            best_proxy = report.proxy_error
            best_alpha = float(a)
    if best_alpha is None:
        raise ConfigError(f"every alpha candidate failed: {results}")
    return best_alpha, results
