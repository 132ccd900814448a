"""Hessian accumulation for calibration plus the logistic-regression oracle.

Two Hessian flavours share one accumulator type:

* agnostic  - running sum of layer-input outer products x x^T
* adaptive  - running sum of per-sample gradient Gram matrices G^T G

The logistic-regression half provides exact, analytic, and sampled versions
of the same curvature matrix so the gradient-outer-product approximation can
be verified against a closed form.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimMismatch,
    EmptyAccumulator,
    EmptyInput,
    NegativeAlpha,
    NonFinite,
)
from .linalg import as_matrix, as_sym_matrix, require_finite, symmetrize

__all__ = [
    "HessianMode",
    "Reduction",
    "HessianAccumulator",
    "accumulate_agnostic",
    "accumulate_agnostic_batch",
    "accumulate_adaptive",
    "merge",
    "finalize",
    "regularize",
    "LogisticModel",
    "sigmoid",
    "logistic_loss",
    "logistic_gradient",
    "logistic_exact_hessian",
    "fisher_expected_outer",
    "fisher_sampled_outer",
    "row_hessians",
    "aggregate_row_hessians",
]


class HessianMode(enum.Enum):
    AGNOSTIC = "agnostic"
    ADAPTIVE = "adaptive"


class Reduction(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class HessianAccumulator:
    """Single-writer accumulator; merge per-thread instances by summation."""

    dim: int
    mode: HessianMode
    reduction: Reduction = Reduction.SUM
    sum: np.ndarray = field(init=False)
    n_samples: int = field(init=False, default=0)

    def __post_init__(self):
        if self.dim < 1:
            raise DimMismatch("accumulator dim must be >= 1")
        self.sum = np.zeros((self.dim, self.dim))


def accumulate_agnostic(acc: HessianAccumulator, x) -> None:
    """Add one layer-input outer product x x^T."""
    if acc.mode is not HessianMode.AGNOSTIC:
        raise DimMismatch("accumulator mode is not agnostic")
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != acc.dim:
        raise DimMismatch(f"expected vector of length {acc.dim}, got shape {v.shape}")
    require_finite(v, "input vector")
    acc.sum += np.outer(v, v)
    acc.n_samples += 1


def accumulate_agnostic_batch(acc: HessianAccumulator, xs) -> None:
    """Add every row of `xs` as one agnostic sample (vectorized x x^T sum)."""
    if acc.mode is not HessianMode.AGNOSTIC:
        raise DimMismatch("accumulator mode is not agnostic")
    m = as_matrix(xs, cols=acc.dim)
    acc.sum += m.T @ m
    acc.n_samples += m.shape[0]


def accumulate_adaptive(acc: HessianAccumulator, g) -> None:
    """Add one per-sample gradient Gram matrix G^T G."""
    if acc.mode is not HessianMode.ADAPTIVE:
        raise DimMismatch("accumulator mode is not adaptive")
    m = as_matrix(g, cols=acc.dim)
    acc.sum += m.T @ m
    acc.n_samples += 1


def merge(a: HessianAccumulator, b: HessianAccumulator) -> HessianAccumulator:
    """Combine two accumulators built over disjoint sample sets."""
    if a.dim != b.dim or a.mode is not b.mode or a.reduction is not b.reduction:
        raise DimMismatch("accumulators are not compatible")
    out = HessianAccumulator(a.dim, a.mode, a.reduction)
    out.sum = a.sum + b.sum
    out.n_samples = a.n_samples + b.n_samples
    return out


def finalize(acc: HessianAccumulator) -> np.ndarray:
    """Return the accumulated Hessian, divided by n_samples in MEAN mode."""
    if acc.n_samples < 1:
        raise EmptyAccumulator("no samples accumulated")
    h = acc.sum
    if acc.reduction is Reduction.MEAN:
        h = h / acc.n_samples
    require_finite(h, "hessian")
    return symmetrize(h)


def regularize(h, alpha: float) -> np.ndarray:
    """Add alpha * mean(diag(h)) to every diagonal entry."""
    if alpha < 0.0:
        raise NegativeAlpha(f"alpha must be >= 0, got {alpha}")
    sym = as_sym_matrix(h)
    out = sym.copy()
    out[np.diag_indices_from(out)] += alpha * float(np.mean(np.diag(sym)))
    return out


# ---------------------------------------------------------------------------
# Binomial logistic regression oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticModel:
    """Weights of a binomial logistic classifier, P(y=1|x) = sigmoid(w.x)."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64))
        if self.w.ndim != 1:
            raise DimMismatch("logistic weights must be a vector")
        require_finite(self.w, "logistic weights")


def sigmoid(t):
    """Numerically stable sigmoid, branching on the sign of t."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def _check_x(m: LogisticModel, x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != m.w.shape:
        raise DimMismatch(f"x has shape {v.shape}, weights {m.w.shape}")
    return v


def logistic_loss(m: LogisticModel, x, y: int) -> float:
    """Per-sample cross-entropy -[y log pi + (1-y) log(1-pi)], overflow-safe."""
    v = _check_x(m, x)
    t = float(m.w @ v)
    # log(1 + e^t) computed stably:  max(t, 0) + log1p(e^{-|t|})
    softplus = max(t, 0.0) + np.log1p(np.exp(-abs(t)))
    return softplus - y * t


def logistic_gradient(m: LogisticModel, x, y: int) -> np.ndarray:
    """Per-sample gradient x * (pi - y)."""
    v = _check_x(m, x)
    pi = sigmoid(float(m.w @ v))
    return v * (pi - y)


def _as_sample_block(m: LogisticModel, xs) -> np.ndarray:
    block = np.asarray(xs, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] == 0:
        raise EmptyInput("need a nonempty list of input vectors")
    if block.shape[1] != m.w.shape[0]:
        raise DimMismatch(
            f"inputs have dim {block.shape[1]}, weights {m.w.shape[0]}"
        )
    require_finite(block, "inputs")
    return block


def logistic_exact_hessian(m: LogisticModel, xs) -> np.ndarray:
    """Closed-form mean Hessian (1/N) sum_i x_i pi(1-pi) x_i^T."""
    block = _as_sample_block(m, xs)
    pi = sigmoid(block @ m.w)
    weights = pi * (1.0 - pi)
    h = (block * weights[:, None]).T @ block / block.shape[0]
    return symmetrize(h)


def fisher_expected_outer(m: LogisticModel, xs) -> np.ndarray:
    """Mean over samples of E_{y|x}[g g^T], summing y in {0, 1} analytically."""
    block = _as_sample_block(m, xs)
    pi = sigmoid(block @ m.w)
    # E_y[(pi - y)^2] expanded literally: P(y=0) pi^2 + P(y=1) (pi-1)^2
    weights = (1.0 - pi) * pi**2 + pi * (pi - 1.0) ** 2
    h = (block * weights[:, None]).T @ block / block.shape[0]
    return symmetrize(h)


def fisher_sampled_outer(m: LogisticModel, xs, n_draws: int, rng) -> np.ndarray:
    """Monte-Carlo estimate of the Fisher matrix.

    Draws (x, y) pairs with x uniform over the rows of `xs` and
    y ~ Bernoulli(sigmoid(w.x)), then averages the gradient outer products.
    """
    block = _as_sample_block(m, xs)
    if n_draws < 1:
        raise EmptyInput("need at least one draw")
    idx = rng.integers(0, block.shape[0], size=n_draws)
    chosen = block[idx]
    pi = sigmoid(chosen @ m.w)
    y = (rng.random(n_draws) < pi).astype(np.float64)
    scaled = chosen * (pi - y)[:, None]
    return symmetrize(scaled.T @ scaled / n_draws)


# ---------------------------------------------------------------------------
# Row-wise Hessians (test-only: production code never materializes these)
# ---------------------------------------------------------------------------


def row_hessians(gradient_samples) -> list[np.ndarray]:
    """Per-row curvature blocks (1/N) sum_i G_j[i]^T G_j[i] for each row j."""
    mats = [as_matrix(g) for g in gradient_samples]
    if not mats:
        raise EmptyInput("need at least one gradient sample")
    d_row, d_col = mats[0].shape
    for g in mats:
        if g.shape != (d_row, d_col):
            raise DimMismatch("gradient samples disagree in shape")
    blocks = []
    for j in range(d_row):
        h = np.zeros((d_col, d_col))
        for g in mats:
            h += np.outer(g[j], g[j])
        blocks.append(symmetrize(h / len(mats)))
    return blocks


def aggregate_row_hessians(blocks) -> np.ndarray:
    """Sum of per-row blocks; equals the adaptive accumulator result."""
    if not blocks:
        raise EmptyInput("need at least one block")
    total = np.zeros_like(as_sym_matrix(blocks[0]))
    for b in blocks:
        total += as_sym_matrix(b)
    return symmetrize(total)
