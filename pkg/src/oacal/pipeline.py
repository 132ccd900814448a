"""End-to-end quantization runs: config, per-block two-phase loop, reports.

A run walks the transformer blocks in order. Phase 1 builds each layer's
Hessian on the current model state (earlier blocks already quantized, so
later statistics see the propagated error); phase 2 calibrates and installs
the dequantized float32 weights. Everything numeric that affects the output
is echoed into the JSON report.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .archive import archive_read, archive_write
from .calibrate import (
    Backend,
    CalibReport,
    CalibSpec,
    calibrate_layer,
    calibrate_layer_binary,
)
from .errors import ConfigError, OacalError
from .hessian import HessianMode, Reduction, finalize
from .quant import layer_to_tensors, rtn_quantize
from .tinylm import (
    TinyLM,
    block_layer_names,
    collect_agnostic_accumulators,
    harvest_block_gradients,
    load_checkpoint,
    perplexity,
    sample_calibration_windows,
    save_checkpoint,
    tokenize,
    with_weights,
)

METHODS = (
    "RTN",
    "OPTQ",
    "SpQR",
    "OAC_OPTQ",
    "OAC_SpQR",
    "Binary_BiLLM_style",
    "OAC_Binary",
)

_METHOD_TABLE = {
    "RTN": (None, HessianMode.AGNOSTIC),
    "OPTQ": (Backend.OPTQ, HessianMode.AGNOSTIC),
    "SpQR": (Backend.SPQR, HessianMode.AGNOSTIC),
    "OAC_OPTQ": (Backend.OPTQ, HessianMode.ADAPTIVE),
    "OAC_SpQR": (Backend.SPQR, HessianMode.ADAPTIVE),
    "Binary_BiLLM_style": (Backend.BINARY, HessianMode.AGNOSTIC),
    "OAC_Binary": (Backend.BINARY, HessianMode.ADAPTIVE),
}

DEFAULT_ALPHA_GRID = (0.001, 0.01, 0.1, 1.0)

__all__ = [
    "METHODS",
    "DEFAULT_ALPHA_GRID",
    "RunConfig",
    "RunReport",
    "run_quantize",
    "run_eval",
    "run_alpha_sweep",
    "run_verify_oracles",
    "load_token_streams",
    "render_report_table",
    "REPORT_SCHEMA",
]


@dataclass(frozen=True)
class RunConfig:
    """One quantization run; JSON-serializable, CLI flags override 1:1."""

    checkpoint: str
    corpus_train: str
    corpus_valid: str
    corpus_test: str
    out_dir: str
    method: str = "OAC_SpQR"
    bits: int = 2
    group_size: int = 16
    tau: float = 3.5
    alpha: float = 0.1
    block_size: int = 32
    stat_bits: int = 3
    stat_group: int = 16
    salient_fraction: float = 0.08
    n_calibration_samples: int = 128
    reduction: str = "sum"
    alpha_grid: tuple = DEFAULT_ALPHA_GRID
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown method {self.method!r}; choose from {METHODS}"
            )
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")

    def calib_spec(self, alpha: float | None = None) -> CalibSpec:
        backend, mode = _METHOD_TABLE[self.method]
        return CalibSpec(
            bits=self.bits,
            group_size=self.group_size,
            tau=self.tau,
            alpha=self.alpha if alpha is None else alpha,
            block_size=self.block_size,
            backend=backend or Backend.OPTQ,
            hessian_mode=mode,
            stat_bits=self.stat_bits,
            stat_group=self.stat_group,
            salient_fraction=self.salient_fraction,
        )

    @staticmethod
    def from_json(path, **overrides) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        if "alpha_grid" in data:
            data["alpha_grid"] = tuple(data["alpha_grid"])
        return RunConfig(**data)


@dataclass
class RunReport:
    config: dict
    seed: int
    method: str
    layer_reports: list[dict] = field(default_factory=list)
    global_avg_bits: float = 0.0
    valid_perplexity: float | None = None
    test_perplexity: float | None = None
    phase_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "method": self.method,
            "layer_reports": self.layer_reports,
            "global_avg_bits": self.global_avg_bits,
            "valid_perplexity": self.valid_perplexity,
            "test_perplexity": self.test_perplexity,
            "phase_seconds": self.phase_seconds,
        }


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "config",
        "seed",
        "method",
        "layer_reports",
        "global_avg_bits",
        "valid_perplexity",
        "test_perplexity",
        "phase_seconds",
    ],
    "properties": {
        "config": {"type": "object"},
        "seed": {"type": "integer"},
        "method": {"enum": list(METHODS)},
        "layer_reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "layer",
                    "proxy_error",
                    "outlier_count",
                    "outlier_rate",
                    "avg_bits_per_weight",
                    "alpha",
                ],
                "properties": {
                    "layer": {"type": "string"},
                    "proxy_error": {"type": "number", "minimum": -1e-9},
                    "outlier_count": {"type": "integer", "minimum": 0},
                    "outlier_rate": {"type": "number", "minimum": 0},
                    "avg_bits_per_weight": {"type": "number", "minimum": 0},
                    "alpha": {"type": "number", "minimum": 0},
                },
            },
        },
        "global_avg_bits": {"type": "number", "minimum": 0},
        "valid_perplexity": {"type": ["number", "null"], "minimum": 1},
        "test_perplexity": {"type": ["number", "null"], "minimum": 1},
        "phase_seconds": {"type": "object"},
    },
}


def _read_corpus(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {path!r}: {exc}") from exc


def load_token_streams(config: RunConfig) -> dict[str, np.ndarray]:
    """Token streams for calibration/validation/test.

    Distinct files are used whole. When the validation or test path equals
    the training path, the deterministic 80/10/10 byte split of that file is
    applied instead (train gets [0, 80%), validation [80%, 90%), test the
    rest); calibration always draws from the training stream.
    """
    train_raw = _read_corpus(config.corpus_train)
    n = len(train_raw)
    shared_valid = config.corpus_valid == config.corpus_train
    shared_test = config.corpus_test == config.corpus_train
    train_end = int(0.8 * n) if (shared_valid or shared_test) else n
    streams = {"train": tokenize(train_raw[:train_end])}
    if shared_valid:
        streams["valid"] = tokenize(train_raw[int(0.8 * n) : int(0.9 * n)])
    else:
        streams["valid"] = tokenize(_read_corpus(config.corpus_valid))
    if shared_test:
        streams["test"] = tokenize(train_raw[int(0.9 * n) :])
    else:
        streams["test"] = tokenize(_read_corpus(config.corpus_test))
    return streams


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def run_quantize(
    config: RunConfig, alpha: float | None = None, write: bool = True
) -> tuple[TinyLM, RunReport]:
    """Quantize every block layer of the checkpointed model.

    Blocks are processed front to back; each block's Hessians are built on
    the current (partially quantized) model immediately before that block is
    calibrated. Returns the dequantized-view model plus the report; with
    `write` the quantized checkpoint, the per-layer artifact archive, and the
    JSON report land in the output directory.
    """
    t_start = time.time()
    model = load_checkpoint(config.checkpoint)
    streams = load_token_streams(config)
    rng = np.random.default_rng(config.seed)
    samples = sample_calibration_windows(
        streams["train"],
        config.n_calibration_samples,
        model.config.context_length,
        rng,
    )
    spec = config.calib_spec(alpha)
    reduction = Reduction.SUM if config.reduction == "sum" else Reduction.MEAN
    backend, mode = _METHOD_TABLE[config.method]
    adaptive = mode is HessianMode.ADAPTIVE

    report = RunReport(
        config={**asdict(config), "alpha": spec.alpha, "alpha_grid": list(config.alpha_grid)},
        seed=config.seed,
        method=config.method,
    )
    current = model
    layer_artifacts: dict[str, np.ndarray] = {}
    layer_meta: dict[str, dict] = {}
    phase1 = phase2 = 0.0
    total_bits = 0.0
    total_weights = 0
    for b in range(model.config.n_blocks):
        t0 = time.time()
        accs = None
        if backend is not None:
            collector = (
                harvest_block_gradients if adaptive else collect_agnostic_accumulators
            )
            accs = collector(current, b, samples, reduction)
        phase1 += time.time() - t0

        t0 = time.time()
        updates = {}
        for name in block_layer_names(b):
            w = current.params[name]
            try:
                if backend is None:
                    layer = rtn_quantize(w, config.bits, config.group_size)
                    cal_report = CalibReport(
                        layer=name,
                        proxy_error=0.0,
                        outlier_count=0,
                        outlier_rate=0.0,
                        column_update_norms=[0.0] * w.shape[1],
                        avg_bits_per_weight=layer.accounting.avg_bits_per_weight,
                        alpha=0.0,
                        tau=None,
                        extra={"backend": "rtn", "hessian_mode": mode.value},
                    )
                elif backend is Backend.BINARY:
                    layer, cal_report = calibrate_layer_binary(
                        w, finalize(accs[name]), spec, name
                    )
                else:
                    layer, cal_report = calibrate_layer(
                        w, finalize(accs[name]), spec, name
                    )
            except OacalError as exc:
                raise OacalError(f"layer {name!r}: {exc}") from exc
            tensors, meta = layer_to_tensors(name, layer)
            layer_artifacts.update(tensors)
            layer_meta[name] = meta
            report.layer_reports.append(cal_report.to_dict())
            total_bits += layer.accounting.total_bits
            total_weights += w.size
            updates[name] = _f32(layer.dequantize())
        current = with_weights(current, updates)
        phase2 += time.time() - t0

    report.global_avg_bits = total_bits / total_weights
    report.phase_seconds = {
        "phase1_hessians": phase1,
        "phase2_calibration": phase2,
        "total": time.time() - t_start,
    }

    t0 = time.time()
    report.valid_perplexity = perplexity(current, streams["valid"])
    report.test_perplexity = perplexity(current, streams["test"])
    report.phase_seconds["eval"] = time.time() - t0
    report.phase_seconds["total"] = time.time() - t_start

    if write:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(current, out / "quantized.oack")
        archive_write(out / "layers.oack", layer_artifacts)
        with open(out / "layers.json", "w", encoding="utf-8") as fh:
            json.dump(layer_meta, fh, indent=2, sort_keys=True)
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        _append_summary_row(out / "summary.csv", report)
    return current, report


def _append_summary_row(path, report: RunReport) -> None:
    exists = Path(path).exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(
                ["method", "seed", "alpha", "avg_bits", "valid_ppl", "test_ppl"]
            )
        writer.writerow(
            [
                report.method,
                report.seed,
                report.config["alpha"],
                f"{report.global_avg_bits:.6f}",
                f"{report.valid_perplexity:.6f}",
                f"{report.test_perplexity:.6f}",
            ]
        )


def run_eval(config: RunConfig, checkpoint_path) -> dict:
    """Perplexity of a stored checkpoint on the validation and test streams."""
    model = load_checkpoint(checkpoint_path)
    streams = load_token_streams(config)
    return {
        "checkpoint": str(checkpoint_path),
        "valid_perplexity": perplexity(model, streams["valid"]),
        "test_perplexity": perplexity(model, streams["test"]),
    }


def run_alpha_sweep(config: RunConfig, write: bool = True) -> dict:
    """One full quantize+eval per grid alpha; best = lowest validation ppl.

    Ties resolve to the smaller alpha; candidates that fail (e.g. Cholesky
    on an undamped singular Hessian) are recorded and skipped.
    """
    if not config.alpha_grid:
        raise ConfigError("alpha grid must be nonempty")
    candidates = {}
    best_alpha = None
    best_valid = np.inf
    for a in sorted(config.alpha_grid):
        try:
            _, rep = run_quantize(config, alpha=float(a), write=False)
        except OacalError as exc:
            candidates[float(a)] = {"status": "failed", "error": str(exc)}
            continue
        candidates[float(a)] = {"status": "ok", "report": rep.to_dict()}
        if rep.valid_perplexity < best_valid:
            best_valid = rep.valid_perplexity
            best_alpha = float(a)
    if best_alpha is None:
        raise ConfigError(f"every alpha candidate failed: {candidates}")
    result = {
        "best_alpha": best_alpha,
        "best_valid_perplexity": best_valid,
        "best_test_perplexity": candidates[best_alpha]["report"]["test_perplexity"],
        "candidates": candidates,
    }
    if write:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        # rerun the winner with artifacts enabled
        run_quantize(config, alpha=best_alpha, write=True)
        with open(out / "sweep.json", "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    return result


# ---------------------------------------------------------------------------
# Oracle bundle
# ---------------------------------------------------------------------------


def run_verify_oracles(seed: int = 0, corrupt_update: bool = False) -> dict:
    """Self-contained property checks with measured error magnitudes.

    `corrupt_update` is a negative-control hook: it perturbs the Hessian fed
    to the production column loop (but not the reference solver), which must
    make the update-optimality oracle fail.
    """
    from .hessian import (
        HessianAccumulator,
        LogisticModel,
        accumulate_adaptive,
        aggregate_row_hessians,
        fisher_expected_outer,
        fisher_sampled_outer,
        logistic_exact_hessian,
        row_hessians,
    )
    from .linalg import symmetrize

    rng = np.random.default_rng(seed)
    results = {}

    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 17))
        m = LogisticModel(rng.standard_normal(d))
        xs = rng.standard_normal((int(rng.integers(1, 30)), d))
        worst = max(
            worst,
            float(
                np.max(
                    np.abs(fisher_expected_outer(m, xs) - logistic_exact_hessian(m, xs))
                )
            ),
        )
    results["fisher_identity_exact"] = {"max_abs_err": worst, "pass": worst < 1e-12}

    wins = 0
    for trial in range(20):
        trial_rng = np.random.default_rng(seed * 1000 + trial)
        d = 4
        m = LogisticModel(trial_rng.standard_normal(d))
        xs = trial_rng.standard_normal((32, d))
        exact = logistic_exact_hessian(m, xs)
        e_small = float(np.max(np.abs(fisher_sampled_outer(m, xs, 100, trial_rng) - exact)))
        e_big = float(np.max(np.abs(fisher_sampled_outer(m, xs, 10_000, trial_rng) - exact)))
        wins += e_big < e_small
    results["fisher_sampled_convergence"] = {"wins": wins, "trials": 20, "pass": wins >= 19}

    from .calibrate import CalibSpec as _Spec, calibrate_layer as _cal
    from .quant import fit_affine as _fit, quantize_dequantize as _qdq

    worst_dev = 0.0
    for _ in range(100):
        d_row = int(rng.integers(1, 9))
        d_col = int(rng.integers(2, 7))
        w = rng.standard_normal((d_row, d_col))
        a = rng.standard_normal((d_col, d_col))
        h = symmetrize(a @ a.T + d_col * np.eye(d_col))
        h_prod = h.copy()
        if corrupt_update:
            h_prod = symmetrize(h_prod + 0.35 * np.diag(np.arange(d_col) + 1.0))
        spec = _Spec(bits=2, group_size=d_col, alpha=0.0, block_size=1)
        layer, _ = _cal(w, h_prod, spec, guard=False)
        got = layer.dequantize()

        w_hat = np.empty_like(w)
        params = [None] * d_row
        for q in range(d_col):
            if q == 0:
                work = w.copy()
            else:
                delta_c = w_hat[:, :q] - w[:, :q]
                delta_f = np.linalg.solve(h[q:, q:], -h[q:, :q] @ delta_c.T).T
                work = w.copy()
                work[:, :q] = w_hat[:, :q]
                work[:, q:] = w[:, q:] + delta_f
            if q % d_col == 0:
                params = [_fit(work[r, q:], 2) for r in range(d_row)]
            for r in range(d_row):
                _, w_hat[r, q] = _qdq(work[r, q], params[r], 2)
        worst_dev = max(worst_dev, float(np.max(np.abs(got - w_hat))))
    results["update_optimality"] = {
        "max_abs_dev": worst_dev,
        "pass": worst_dev < 1e-8,
        "corrupt_update": corrupt_update,
    }

    bound_ok = True
    worst_gap = 0.0
    for _ in range(100):
        d_row = int(rng.integers(1, 6))
        d_col = int(rng.integers(1, 6))
        blocks = []
        for _ in range(d_row):
            a = rng.standard_normal((d_col, d_col))
            blocks.append(symmetrize(a @ a.T))
        total = aggregate_row_hessians(blocks)
        delta = rng.standard_normal((d_row, d_col))
        lhs = float(np.sum((delta @ total) * delta))
        rhs = sum(float(delta[j] @ blocks[j] @ delta[j]) for j in range(d_row))
        worst_gap = min(worst_gap, lhs - rhs)
        bound_ok &= lhs >= rhs - 1e-9
    results["aggregation_bound"] = {"worst_margin": worst_gap, "pass": bool(bound_ok)}

    samples = [rng.standard_normal((5, 4)) for _ in range(6)]
    acc = HessianAccumulator(4, HessianMode.ADAPTIVE, Reduction.MEAN)
    for g in samples:
        accumulate_adaptive(acc, g)
    gram_dev = float(
        np.max(np.abs(finalize(acc) - aggregate_row_hessians(row_hessians(samples))))
    )
    results["aggregation_equivalence"] = {"max_abs_dev": gram_dev, "pass": gram_dev < 1e-10}

    results["all_pass"] = all(
        v["pass"] for k, v in results.items() if isinstance(v, dict)
    )
    results["seed"] = seed
    return results


def render_report_table(report_paths, fmt: str = "markdown") -> str:
    """CSV or Markdown table across run reports."""
    rows = []
    for path in report_paths:
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        rows.append(
            {
                "method": rep["method"],
                "seed": rep["seed"],
                "alpha": rep["config"]["alpha"],
                "avg_bits": f"{rep['global_avg_bits']:.4f}",
                "valid_ppl": f"{rep['valid_perplexity']:.4f}",
                "test_ppl": f"{rep['test_perplexity']:.4f}",
            }
        )
    headers = ["method", "seed", "alpha", "avg_bits", "valid_ppl", "test_ppl"]
    if fmt == "csv":
        lines = [",".join(headers)]
        lines += [",".join(str(r[h]) for h in headers) for r in rows]
        return "\n".join(lines) + "\n"
    widths = {h: max(len(h), *(len(str(r[h])) for r in rows)) if rows else len(h) for h in headers}
    head = "| " + " | ".join(h.ljust(widths[h]) for h in headers) + " |"
    sep = "|" + "|".join("-" * (widths[h] + 2) for h in headers) + "|"
    body = [
        "| " + " | ".join(str(r[h]).ljust(widths[h]) for h in headers) + " |"
        for r in rows
    ]
    return "\n".join([head, sep, *body]) + "\n"
