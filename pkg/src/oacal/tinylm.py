"""Byte-level toy transformer with hand-written backpropagation.

The model is deliberately small (vocab 128, d_model 64, two pre-norm blocks
of single-head attention plus a tanh MLP) so that exact per-sample weight
gradients are cheap: they feed the adaptive Hessian accumulators, and every
derivative is checked against finite differences in the tests.

Activations are row vectors; a linear layer with weight W (d_out x d_in)
computes x @ W.T, so W's columns line up with the layer's input dimension.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .archive import archive_read, archive_write
from .errors import (
    ArchitectureMismatch,
    CorpusTooSmall,
    DimMismatch,
    TokenOutOfRange,
)
from .hessian import (
    HessianAccumulator,
    HessianMode,
    LogisticModel,
    Reduction,
    accumulate_adaptive,
    fisher_expected_outer,
    fisher_sampled_outer,
    logistic_exact_hessian,
    sigmoid,
)

RMS_EPS = 1e-6

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "TinyLM",
    "CalibSample",
    "tokenize",
    "init_model",
    "block_layer_names",
    "quantizable_layers",
    "layer_input_name_map",
    "lm_forward",
    "lm_forward_loss",
    "lm_backward",
    "harvest_block_gradients",
    "collect_agnostic_accumulators",
    "perplexity",
    "sample_calibration_windows",
    "train_tiny_lm",
    "save_checkpoint",
    "load_checkpoint",
    "with_weights",
    "logistic_suite",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    d_ff: int = 256
    n_blocks: int = 2
    context_length: int = 64


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1200
    batch_size: int = 16
    learning_rate: float = 2e-3
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TinyLM:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "TinyLM":
        return TinyLM(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass(frozen=True)
class CalibSample:
    ids: np.ndarray
    offset: int


def tokenize(data: bytes) -> np.ndarray:
    """Byte mapping to the 128-token vocabulary."""
    return (np.frombuffer(data, dtype=np.uint8) % 128).astype(np.int64)


def _check_ids(ids, vocab_size: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1:
        raise DimMismatch("token ids must be a 1-D sequence")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise TokenOutOfRange(f"token ids must lie in [0, {vocab_size})")
    return arr


def block_layer_names(block: int) -> list[str]:
    base = f"blk{block}"
    return [
        f"{base}.attn.wq",
        f"{base}.attn.wk",
        f"{base}.attn.wv",
        f"{base}.attn.wo",
        f"{base}.mlp.fc1",
        f"{base}.mlp.fc2",
    ]


def quantizable_layers(model: TinyLM) -> list[str]:
    names = []
    for b in range(model.config.n_blocks):
        names.extend(block_layer_names(b))
    return names


def init_model(config: ModelConfig, seed: int) -> TinyLM:
    rng = np.random.default_rng(seed)
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    resid_scale = 1.0 / np.sqrt(2.0 * config.n_blocks)
    params = {
        "embed": rng.normal(0.0, 0.02, size=(v, d)),
        "head": rng.normal(0.0, 0.02, size=(v, d)),
    }
    for b in range(config.n_blocks):
        base = f"blk{b}"
        params[f"{base}.attn.wq"] = rng.normal(0.0, 0.02, size=(d, d))
        params[f"{base}.attn.wk"] = rng.normal(0.0, 0.02, size=(d, d))
        params[f"{base}.attn.wv"] = rng.normal(0.0, 0.02, size=(d, d))
        params[f"{base}.attn.wo"] = rng.normal(0.0, 0.02 * resid_scale, size=(d, d))
        params[f"{base}.mlp.fc1"] = rng.normal(0.0, 0.02, size=(ff, d))
        params[f"{base}.mlp.fc2"] = rng.normal(0.0, 0.02 * resid_scale, size=(d, ff))
    return TinyLM(config, params)


def with_weights(model: TinyLM, replacements: dict[str, np.ndarray]) -> TinyLM:
    """New model with some weight matrices swapped (shapes must match)."""
    out = model.copy()
    for name, mat in replacements.items():
        if name not in out.params:
            raise ArchitectureMismatch(f"unknown layer {name!r}")
        if out.params[name].shape != mat.shape:
            raise ArchitectureMismatch(
                f"{name}: shape {mat.shape} != {out.params[name].shape}"
            )
        out.params[name] = np.asarray(mat, dtype=np.float64)
    return out


def _positions(context: int, d_model: int) -> np.ndarray:
    pos = np.arange(context)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _rms_norm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def _rms_backward(dy: np.ndarray, x: np.ndarray, r: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    dot = np.sum(dy * x, axis=-1, keepdims=True)
    return dy / r - x * dot / (n * r**3)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_input_name_map(block: int) -> dict[str, str]:
    """Which cached activation feeds each linear layer of a block."""
    base = f"blk{block}"
    return {
        f"{base}.attn.wq": "attn_in",
        f"{base}.attn.wk": "attn_in",
        f"{base}.attn.wv": "attn_in",
        f"{base}.attn.wo": "attn_mix",
        f"{base}.mlp.fc1": "mlp_in",
        f"{base}.mlp.fc2": "mlp_act",
    }


def lm_forward(model: TinyLM, ids) -> tuple[np.ndarray, dict]:
    """Next-token probabilities per position plus the backward cache."""
    cfg = model.config
    ids = _check_ids(ids, cfg.vocab_size)
    t = ids.shape[0]
    if t > cfg.context_length:
        raise DimMismatch(
            f"sequence length {t} exceeds context {cfg.context_length}"
        )
    p = model.params
    scale = 1.0 / np.sqrt(cfg.d_model)
    mask = np.triu(np.full((t, t), -np.inf), k=1)

    x = p["embed"][ids] + _positions(cfg.context_length, cfg.d_model)[:t]
    cache: dict = {"ids": ids, "x0": x, "blocks": []}
    for b in range(cfg.n_blocks):
        base = f"blk{b}"
        a, ra = _rms_norm(x)
        q = a @ p[f"{base}.attn.wq"].T
        k = a @ p[f"{base}.attn.wk"].T
        v = a @ p[f"{base}.attn.wv"].T
        att = _softmax(q @ k.T * scale + mask)
        mix = att @ v
        x_mid = x + mix @ p[f"{base}.attn.wo"].T
        m_in, rm = _rms_norm(x_mid)
        h_pre = m_in @ p[f"{base}.mlp.fc1"].T
        h_act = np.tanh(h_pre)
        x = x_mid + h_act @ p[f"{base}.mlp.fc2"].T
        cache["blocks"].append(
            {
                "x_in": cache["x0"] if b == 0 else cache["blocks"][-1]["x_out"],
                "attn_in": a,
                "r_attn": ra,
                "q": q,
                "k": k,
                "v": v,
                "att": att,
                "attn_mix": mix,
                "x_mid": x_mid,
                "mlp_in": m_in,
                "r_mlp": rm,
                "mlp_act": h_act,
                "x_out": x,
            }
        )
    f, rf = _rms_norm(x)
    logits = f @ p["head"].T
    cache["final_in"] = x
    cache["r_final"] = rf
    cache["final_norm"] = f
    cache["logits"] = logits
    probs = _softmax(logits)
    return probs, cache


def _mean_ce_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-np.mean(logp[np.arange(targets.shape[0]), targets]))


def lm_forward_loss(model: TinyLM, sample: CalibSample) -> float:
    """Mean next-token cross-entropy over the sample's positions."""
    ids = _check_ids(sample.ids, model.config.vocab_size)
    if ids.shape[0] < 2:
        raise DimMismatch("need at least two tokens for a next-token loss")
    _, cache = lm_forward(model, ids)
    return _mean_ce_from_logits(cache["logits"][:-1], ids[1:])


def lm_backward(
    model: TinyLM, sample: CalibSample, blocks: list[int] | None = None
) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy for the weight matrices.

    With `blocks` given, only those blocks' layer gradients are produced and
    backpropagation stops once the earliest requested block is done; the
    other blocks stay frozen, as in per-block gradient harvesting.
    """
    cfg = model.config
    p = model.params
    ids = _check_ids(sample.ids, cfg.vocab_size)
    t = ids.shape[0]
    if t < 2:
        raise DimMismatch("need at least two tokens for a next-token loss")
    _, cache = lm_forward(model, ids)

    want_all = blocks is None
    wanted = set(range(cfg.n_blocks)) if want_all else set(blocks)
    if not want_all:
        bad = [b for b in wanted if not 0 <= b < cfg.n_blocks]
        if bad:
            raise DimMismatch(f"block index out of range: {bad}")
    lowest = min(wanted) if wanted else 0

    n_pred = t - 1
    probs = _softmax(cache["logits"])
    dlogits = probs.copy()
    dlogits[np.arange(n_pred), ids[1:]] -= 1.0
    dlogits[:n_pred] /= n_pred
    dlogits[n_pred:] = 0.0

    grads: dict[str, np.ndarray] = {}
    f = cache["final_norm"]
    if want_all:
        grads["head"] = dlogits.T @ f
    dx = _rms_backward(dlogits @ p["head"], cache["final_in"], cache["r_final"])

    scale = 1.0 / np.sqrt(cfg.d_model)
    for b in reversed(range(cfg.n_blocks)):
        blk = cache["blocks"][b]
        base = f"blk{b}"
        take = b in wanted

        # MLP half: x_out = x_mid + tanh(m_in @ W1.T) @ W2.T
        dh_act = dx @ p[f"{base}.mlp.fc2"]
        dh_pre = dh_act * (1.0 - blk["mlp_act"] ** 2)
        if take:
            grads[f"{base}.mlp.fc2"] = dx.T @ blk["mlp_act"]
            grads[f"{base}.mlp.fc1"] = dh_pre.T @ blk["mlp_in"]
        dm_in = dh_pre @ p[f"{base}.mlp.fc1"]
        dx_mid = dx + _rms_backward(dm_in, blk["x_mid"], blk["r_mlp"])

        # attention half: x_mid = x_in + (att @ v) @ Wo.T
        dmix = dx_mid @ p[f"{base}.attn.wo"]
        if take:
            grads[f"{base}.attn.wo"] = dx_mid.T @ blk["attn_mix"]
        datt = dmix @ blk["v"].T
        dv = blk["att"].T @ dmix
        att = blk["att"]
        dlogit_att = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dq = dlogit_att @ blk["k"] * scale
        dk = dlogit_att.T @ blk["q"] * scale
        if take:
            grads[f"{base}.attn.wq"] = dq.T @ blk["attn_in"]
            grads[f"{base}.attn.wk"] = dk.T @ blk["attn_in"]
            grads[f"{base}.attn.wv"] = dv.T @ blk["attn_in"]
        if not want_all and b == lowest:
            return grads
        da = (
            dq @ p[f"{base}.attn.wq"]
            + dk @ p[f"{base}.attn.wk"]
            + dv @ p[f"{base}.attn.wv"]
        )
        dx = dx_mid + _rms_backward(da, blk["x_in"], blk["r_attn"])

    if want_all:
        dembed = np.zeros_like(p["embed"])
        np.add.at(dembed, ids, dx)
        grads["embed"] = dembed
    return grads


def harvest_block_gradients(
    model: TinyLM,
    block_index: int,
    samples: list[CalibSample],
    reduction: Reduction = Reduction.SUM,
) -> dict[str, HessianAccumulator]:
    """Adaptive Hessian accumulators for one block's linear layers.

    Gradients for the other blocks are never computed (they stay frozen);
    each sample contributes one G^T G term per layer.
    """
    if not samples:
        raise DimMismatch("need at least one calibration sample")
    if not 0 <= block_index < model.config.n_blocks:
        raise DimMismatch(f"block index {block_index} out of range")
    accs: dict[str, HessianAccumulator] = {}
    for name in block_layer_names(block_index):
        accs[name] = HessianAccumulator(
            model.params[name].shape[1], HessianMode.ADAPTIVE, reduction
        )
    for sample in samples:
        grads = lm_backward(model, sample, blocks=[block_index])
        for name, acc in accs.items():
            accumulate_adaptive(acc, grads[name])
    return accs


def collect_agnostic_accumulators(
    model: TinyLM,
    block_index: int,
    samples: list[CalibSample],
    reduction: Reduction = Reduction.SUM,
) -> dict[str, HessianAccumulator]:
    """Classic input-outer-product accumulators for one block's layers.

    Every position of every sample contributes one x x^T term to the layer
    whose input it feeds.
    """
    from .hessian import accumulate_agnostic_batch

    if not samples:
        raise DimMismatch("need at least one calibration sample")
    input_map = layer_input_name_map(block_index)
    accs: dict[str, HessianAccumulator] = {}
    for name in block_layer_names(block_index):
        accs[name] = HessianAccumulator(
            model.params[name].shape[1], HessianMode.AGNOSTIC, reduction
        )
    for sample in samples:
        _, cache = lm_forward(model, sample.ids)
        blk = cache["blocks"][block_index]
        for name, acc in accs.items():
            accumulate_agnostic_batch(acc, blk[input_map[name]])
    return accs


def perplexity(model: TinyLM, tokens) -> float:
    """exp(mean next-token cross-entropy) over non-overlapping windows."""
    cfg = model.config
    ids = _check_ids(tokens, cfg.vocab_size)
    ctx = cfg.context_length
    if ids.shape[0] <= ctx:
        raise DimMismatch("need more eval tokens than one context window")
    total = 0.0
    count = 0
    for start in range(0, ids.shape[0] - ctx + 1, ctx):
        window = ids[start : start + ctx]
        total = total + lm_forward_loss(model, CalibSample(window, start)) * (
            ctx - 1
        )
        count += ctx - 1
    return float(np.exp(total / count))


def sample_calibration_windows(
    tokens, n_samples: int, context_length: int, rng
) -> list[CalibSample]:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.shape[0] < context_length + 1:
        raise CorpusTooSmall("not enough tokens for one calibration window")
    offsets = rng.integers(0, ids.shape[0] - context_length, size=n_samples)
    return [
        CalibSample(ids[o : o + context_length].copy(), int(o))
        for o in sorted(int(o) for o in offsets)
    ]


def train_tiny_lm(
    corpus: bytes,
    config: ModelConfig,
    train: TrainConfig,
    seed: int,
) -> tuple[TinyLM, dict]:
    """Adam training on random corpus windows; bit-deterministic per seed."""
    if len(corpus) < 64 * 1024:
        raise CorpusTooSmall(
            f"corpus must be at least 64 KiB, got {len(corpus)} bytes"
        )
    tokens = tokenize(corpus)
    model = init_model(config, seed)
    rng = np.random.default_rng(seed + 1)

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = {"loss": []}
    ctx = config.context_length
    for step in range(1, train.steps + 1):
        offsets = rng.integers(0, tokens.shape[0] - ctx, size=train.batch_size)
        total_loss = 0.0
        grad_sum: dict[str, np.ndarray] = {
            k: np.zeros_like(v) for k, v in model.params.items()
        }
        for off in offsets:
            sample = CalibSample(tokens[off : off + ctx], int(off))
            total_loss += lm_forward_loss(model, sample)
            for k, g in lm_backward(model, sample).items():
                grad_sum[k] += g
        inv_b = 1.0 / train.batch_size
        gnorm = np.sqrt(
            sum(float(np.sum((g * inv_b) ** 2)) for g in grad_sum.values())
        )
        clip = min(1.0, train.grad_clip / max(gnorm, 1e-12))
        for k in model.params:
            g = grad_sum[k] * inv_b * clip
            m_state[k] = train.adam_beta1 * m_state[k] + (1 - train.adam_beta1) * g
            v_state[k] = train.adam_beta2 * v_state[k] + (1 - train.adam_beta2) * (
                g * g
            )
            m_hat = m_state[k] / (1 - train.adam_beta1**step)
            v_hat = v_state[k] / (1 - train.adam_beta2**step)
            model.params[k] -= (
                train.learning_rate * m_hat / (np.sqrt(v_hat) + train.adam_eps)
            )
        history["loss"].append(total_loss * inv_b)
    history["final_loss"] = history["loss"][-1] if history["loss"] else None
    return model, history


def save_checkpoint(model: TinyLM, path) -> None:
    """Archive of all parameters plus a JSON architecture sidecar."""
    tensors = {f"param/{k}": v for k, v in sorted(model.params.items())}
    archive_write(path, tensors)
    sidecar = {"architecture": asdict(model.config), "params": sorted(model.params)}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> TinyLM:
    with open(str(path) + ".json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    config = ModelConfig(**sidecar["architecture"])
    tensors = archive_read(path)
    params: dict[str, np.ndarray] = {}
    for name in sidecar["params"]:
        key = f"param/{name}"
        if key not in tensors:
            raise ArchitectureMismatch(f"checkpoint is missing tensor {key!r}")
        params[name] = tensors[key].astype(np.float64)
    reference = init_model(config, seed=0)
    for name, mat in reference.params.items():
        if name not in params:
            raise ArchitectureMismatch(f"sidecar is missing layer {name!r}")
        if params[name].shape != mat.shape:
            raise ArchitectureMismatch(
                f"{name}: checkpoint shape {params[name].shape} != {mat.shape}"
            )
    return TinyLM(config, params)


def logistic_suite(seed: int) -> dict:
    """End-to-end curvature oracle on a trained logistic classifier.

    Trains on synthetic separable-with-noise data, then reports the exact
    Hessian, the analytic label-expectation of the gradient outer product,
    and seeded sampled estimates at several sample counts.
    """
    rng = np.random.default_rng(seed)
    d = 8
    n = 256
    w_true = rng.standard_normal(d) * 2.0
    xs = rng.standard_normal((n, d))
    y = (rng.random(n) < sigmoid(xs @ w_true)).astype(np.int64)

    w = np.zeros(d)
    lr = 0.5
    for _ in range(300):
        pi = sigmoid(xs @ w)
        w -= lr * xs.T @ (pi - y) / n
    model = LogisticModel(w)

    exact = logistic_exact_hessian(model, xs)
    analytic = fisher_expected_outer(model, xs)
    sampled = {}
    for n_draws in (100, 10_000):
        est = fisher_sampled_outer(model, xs, n_draws, rng)
        sampled[n_draws] = float(np.max(np.abs(est - exact)))
    return {
        "seed": seed,
        "weights": w.tolist(),
        "analytic_vs_exact_max_abs": float(np.max(np.abs(analytic - exact))),
        "sampled_error_by_n": {str(k): v for k, v in sampled.items()},
        "diag_exact": np.diag(exact).tolist(),
    }
