"""Two-stage speculator training, plus next-token training for the base model.

Stage 1 teaches the speculator to continue ground-truth text from frozen
base-model states: one full-window base forward yields a state at every
position, and each speculator stage is teacher-forced with the ground-truth
token at its lookahead offset. Stage 2 swaps the data source: the base model
greedily generates short continuations and the speculator trains on those,
aligning it to base behavior rather than corpus statistics.

All gradients are hand-derived. The base model's own pretraining is plain
next-token cross-entropy through the same backprop machinery. Training math
runs through BLAS; run-to-run determinism comes from stateless per-step RNG
streams and exact float32 state in checkpoints, which is what makes
mid-stage resume bit-identical to an uninterrupted run.
"""

import copy
import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import PAD, DocumentStream, window_pool
from .errors import ConfigError, DataError
from .kernels import gelu, gelu_grad, log_softmax, matmul_fast, softmax
from .model import LN_EPS, BaseModel, BaseModelConfig, forward, greedy_next
from .speculator import MLPSpeculator, SpeculatorConfig
from .checkpoint import load_checkpoint, save_checkpoint

GradientSet = Dict[str, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    """Two-stage budget and schedules; defaults keep the 5:2 step ratio."""

    stage1_steps: int = 2000
    stage2_steps: int = 800
    stage1_seq_len: int = 512
    stage2_gen_len: int = 64
    stage2_prompt_len: int = 32
    stage1_batch: int = 4
    stage2_batch: int = 16
    stage1_peak_lr: float = 1e-3
    stage1_floor_lr: float = 1e-4
    stage2_peak_lr: float = 1e-4
    stage2_floor_lr: float = 1e-5
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0
    checkpoint_every: int = 0   # 0 disables periodic state saves

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in (0, 1)")
        if min(self.stage1_steps, self.stage2_steps) < 1:
            raise ConfigError("stage step budgets must be positive")


@dataclass
class LossReport:
    head_losses: List[float]
    step: int = 0
    stage: int = 1

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.head_losses))


def cosine_lr(step: int, total: int, peak: float, floor: float,
              warmup_frac: float) -> float:
    """Linear warmup to `peak` over the first warmup fraction of steps,
    then cosine decay reaching `floor` at the final step."""
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside budget [0, {total})")
    warmup = max(1, int(round(warmup_frac * total)))
    if step <= warmup:
        return peak * step / warmup
    span = max(1, total - 1 - warmup)
    t = (step - warmup) / span
    return floor + 0.5 * (peak - floor) * (1.0 + np.cos(np.pi * t))


def lr_at(config: TrainConfig, step: int, stage: int) -> float:
    if stage == 1:
        return cosine_lr(step, config.stage1_steps, config.stage1_peak_lr,
                         config.stage1_floor_lr, config.warmup_frac)
    if stage == 2:
        return cosine_lr(step, config.stage2_steps, config.stage2_peak_lr,
                         config.stage2_floor_lr, config.warmup_frac)
    raise ValueError(f"stage must be 1 or 2, got {stage}")


class AdamW:
    """Adam with decoupled weight decay; moments are float32 and
    checkpointable. Decay applies to matrices only, not norm/bias vectors."""

    def __init__(self, weights: Dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0
        self.beta1, self.beta2 = beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay

    def step(self, weights: Dict[str, np.ndarray], grads: GradientSet,
             lr: float) -> bool:
        """Apply one update in place. Returns False (step aborted) if any
        gradient is non-finite."""
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, w in weights.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and w.ndim >= 2:
                update = update + self.weight_decay * w
            w -= (np.float32(lr) * update).astype(w.dtype)
        return True


def apply_update(weights: Dict[str, np.ndarray], grads: GradientSet,
                 lr: float, optimizer: Optional[AdamW] = None) -> AdamW:
    """Functional wrapper: creates the optimizer on first use."""
    opt = optimizer or AdamW(weights)
    opt.step(weights, grads, lr)
    return opt


# ---------------------------------------------------------------------------
# layernorm backward shared by both networks

def _layernorm_cache(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean(np.square(x - mu), axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = (x - mu) / sigma
    return xhat * g + b, (xhat, sigma)


def _layernorm_backward(dout: np.ndarray, cache, g: np.ndarray):
    xhat, sigma = cache
    dg = np.sum(dout * xhat, axis=tuple(range(dout.ndim - 1)))
    db = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * g
    mean1 = np.mean(dxhat, axis=-1, keepdims=True)
    mean2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = (dxhat - mean1 - xhat * mean2) / sigma
    return dx, dg, db


# ---------------------------------------------------------------------------
# base model: training-path forward/backward (BLAS, full window, causal)

def base_forward_train(model: BaseModel, tokens: np.ndarray,
                       keep_caches: bool = True):
    """Full-window causal forward returning logits, final states and caches."""
    cfg, w = model.config, model.weights
    tokens = np.asarray(tokens, dtype=np.int64)
    B, T = tokens.shape
    if T > cfg.max_seq:
        raise DataError(f"window {T} exceeds max_seq {cfg.max_seq}")
    H, dh = cfg.n_heads, cfg.head_dim
    scale = np.float32(1.0 / np.sqrt(dh))
    neg = np.float32(-1e30)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)

    x = w["tok_emb"][tokens] + w["pos_emb"][:T]
    caches = []
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        a, ln1c = _layernorm_cache(x, w[p + "ln1_g"], w[p + "ln1_b"])
        flat = a.reshape(B * T, cfg.d_model)
        q = matmul_fast(flat, w[p + "wq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = matmul_fast(flat, w[p + "wk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = matmul_fast(flat, w[p + "wv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(causal, neg, scores)
        probs = softmax(scores, axis=-1)
        attn = np.matmul(probs, v)                       # [B,H,T,dh]
        merged = attn.transpose(0, 2, 1, 3).reshape(B * T, cfg.d_model)
        o = matmul_fast(merged, w[p + "wo"]).reshape(B, T, cfg.d_model)
        x_attn = x + o
        a2, ln2c = _layernorm_cache(x_attn, w[p + "ln2_g"], w[p + "ln2_b"])
        flat2 = a2.reshape(B * T, cfg.d_model)
        pre = matmul_fast(flat2, w[p + "w1"])
        mid = gelu(pre)
        ff = matmul_fast(mid, w[p + "w2"]).reshape(B, T, cfg.d_model)
        x_new = x_attn + ff
        if keep_caches:
            caches.append((x, a, ln1c, q, k, v, probs, merged, x_attn,
                           a2, ln2c, pre, mid))
        x = x_new
    states, lnfc = _layernorm_cache(x, w["ln_f_g"], w["ln_f_b"])
    logits = matmul_fast(states.reshape(B * T, cfg.d_model),
                         w["head"]).reshape(B, T, cfg.vocab_size)
    return logits, states, (caches, lnfc, x)


def base_states(model: BaseModel, tokens: np.ndarray) -> np.ndarray:
    """Frozen forward for speculator training: final states per position."""
    _, states, _ = base_forward_train(model, tokens, keep_caches=False)
    return states


def base_loss_and_grads(model: BaseModel, tokens: np.ndarray
                        ) -> Tuple[float, GradientSet]:
    """Next-token cross-entropy and gradients for every base weight."""
    cfg, w = model.config, model.weights
    tokens = np.asarray(tokens, dtype=np.int64)
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.head_dim
    scale = np.float32(1.0 / np.sqrt(dh))
    logits, states, (caches, lnfc, x_final) = base_forward_train(model, tokens)

    targets = tokens[:, 1:]
    valid = (targets != PAD) & (tokens[:, :-1] != PAD)
    n_valid = max(1, int(valid.sum()))
    lsm = log_softmax(logits[:, :-1], axis=-1)
    nll = -np.take_along_axis(lsm, targets[..., None], axis=-1)[..., 0]
    loss = float(np.sum(nll * valid) / n_valid)

    dlogits = softmax(logits[:, :-1], axis=-1)
    rows = np.arange(B)[:, None], np.arange(T - 1)[None, :]
    dlogits[rows[0], rows[1], targets] -= 1.0
    dlogits *= (valid / n_valid)[..., None]
    dlogits = np.concatenate(
        [dlogits, np.zeros((B, 1, cfg.vocab_size), np.float32)], axis=1)

    grads: GradientSet = {k: np.zeros_like(v) for k, v in w.items()}
    flatL = dlogits.reshape(B * T, cfg.vocab_size)
    grads["head"] = matmul_fast(states.reshape(B * T, cfg.d_model).T, flatL)
    dstates = matmul_fast(flatL, w["head"].T).reshape(B, T, cfg.d_model)
    dx, dg, db = _layernorm_backward(dstates, lnfc, w["ln_f_g"])
    grads["ln_f_g"], grads["ln_f_b"] = dg, db

    for layer in reversed(range(cfg.n_layers)):
        p = f"layer{layer}."
        (x_in, a, ln1c, q, k, v, probs, merged, x_attn,
         a2, ln2c, pre, mid) = caches[layer]
        # feed-forward branch
        dff = dx.reshape(B * T, cfg.d_model)
        grads[p + "w2"] = matmul_fast(mid.T, dff)
        dmid = matmul_fast(dff, w[p + "w2"].T)
        dpre = dmid * gelu_grad(pre)
        grads[p + "w1"] = matmul_fast(
            a2.reshape(B * T, cfg.d_model).T, dpre)
        da2 = matmul_fast(dpre, w[p + "w1"].T).reshape(B, T, cfg.d_model)
        dx_attn, dg2, db2 = _layernorm_backward(da2, ln2c, w[p + "ln2_g"])
        grads[p + "ln2_g"], grads[p + "ln2_b"] = dg2, db2
        dx_attn = dx_attn + dx                     # residual
        # attention branch
        do = dx_attn.reshape(B * T, cfg.d_model)
        grads[p + "wo"] = matmul_fast(merged.T, do)
        dmerged = matmul_fast(do, w[p + "wo"].T)
        dattn = dmerged.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        dprobs = np.matmul(dattn, v.transpose(0, 1, 3, 2))
        dv = np.matmul(probs.transpose(0, 1, 3, 2), dattn)
        inner = np.sum(dprobs * probs, axis=-1, keepdims=True)
        dscores = (probs * (dprobs - inner)) * scale
        dq = np.matmul(dscores, k)
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)
        dqf = dq.transpose(0, 2, 1, 3).reshape(B * T, cfg.d_model)
        dkf = dk.transpose(0, 2, 1, 3).reshape(B * T, cfg.d_model)
        dvf = dv.transpose(0, 2, 1, 3).reshape(B * T, cfg.d_model)
        aflat = a.reshape(B * T, cfg.d_model)
        grads[p + "wq"] = matmul_fast(aflat.T, dqf)
        grads[p + "wk"] = matmul_fast(aflat.T, dkf)
        grads[p + "wv"] = matmul_fast(aflat.T, dvf)
        da = (matmul_fast(dqf, w[p + "wq"].T) +
              matmul_fast(dkf, w[p + "wk"].T) +
              matmul_fast(dvf, w[p + "wv"].T)).reshape(B, T, cfg.d_model)
        dx_in, dg1, db1 = _layernorm_backward(da, ln1c, w[p + "ln1_g"])
        grads[p + "ln1_g"], grads[p + "ln1_b"] = dg1, db1
        dx = dx_in + dx_attn                       # residual into layer input
    # embeddings
    np.add.at(grads["tok_emb"], tokens, dx)
    grads["pos_emb"][:T] = dx.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# speculator loss (shared by both stages)

def _speculator_loss(config: SpeculatorConfig, weights: Dict[str, np.ndarray],
                     anchor_states: np.ndarray, tok_in: np.ndarray,
                     targets: np.ndarray, valid: np.ndarray,
                     per_anchor: bool = False):
    """Teacher-forced multi-head loss and gradients.

    anchor_states: [N, d_base] frozen base states, one per anchor.
    tok_in/targets/valid: [h, N] per-stage input tokens, target tokens and
    validity masks. Gradients flow through the speculator only.
    """
    h = config.n_stages
    alpha_s, alpha_e = config.stage_mix
    N = anchor_states.shape[0]
    S = anchor_states
    caches = []
    losses = np.zeros(h)
    anchor_nll = np.zeros((h, N)) if per_anchor else None
    for i in range(1, h + 1):
        p = f"spec.stage{i}."
        proj = matmul_fast(S, weights[p + "ws"]) * np.float32(alpha_s)
        emb = weights[p + "emb"][tok_in[i - 1]] * np.float32(alpha_e)
        x = proj + emb
        u, lnc = _layernorm_cache(x, weights[p + "ln_g"], weights[p + "ln_b"])
        s_out = gelu(u)
        logits = matmul_fast(s_out, weights[p + "head"])
        lsm = log_softmax(logits, axis=-1)
        nll = -lsm[np.arange(N), targets[i - 1]]
        count = max(1, int(valid[i - 1].sum()))
        losses[i - 1] = float(np.sum(nll * valid[i - 1]) / count)
        if per_anchor:
            anchor_nll[i - 1] = np.where(valid[i - 1], nll, np.nan)
        caches.append((S, u, lnc, s_out, logits, count))
        S = s_out

    grads: GradientSet = {k: np.zeros_like(v) for k, v in weights.items()}
    dS_next = np.zeros_like(S)
    for i in range(h, 0, -1):
        p = f"spec.stage{i}."
        S_prev, u, lnc, s_out, logits, count = caches[i - 1]
        dlogits = softmax(logits, axis=-1)
        dlogits[np.arange(N), targets[i - 1]] -= 1.0
        dlogits *= (valid[i - 1] / count)[:, None]
        grads[p + "head"] = matmul_fast(s_out.T, dlogits)
        ds = matmul_fast(dlogits, weights[p + "head"].T) + dS_next
        du = ds * gelu_grad(u)
        dx, dg, db = _layernorm_backward(du, lnc, weights[p + "ln_g"])
        grads[p + "ln_g"], grads[p + "ln_b"] = dg, db
        grads[p + "ws"] = matmul_fast(S_prev.T, dx) * np.float32(alpha_s)
        np.add.at(grads[p + "emb"], tok_in[i - 1],
                  dx * np.float32(alpha_e))
        dS_next = matmul_fast(dx, weights[p + "ws"].T) * np.float32(alpha_s)
    if per_anchor:
        return losses, grads, anchor_nll
    return losses, grads


def _stage_token_slices(tokens: np.ndarray, h: int, first_anchor: int,
                        n_anchors: int):
    """Flattened per-stage (inputs, targets, valid) over an anchor range.

    Anchor j pairs the state after consuming token j with input token
    t[j+i] and target t[j+i+1] at stage i. A head is valid only if every
    token it touches (and the anchor position itself) is real.
    """
    j0 = first_anchor
    N = tokens.shape[0] * n_anchors
    tok_in = np.empty((h, N), dtype=np.int64)
    targets = np.empty((h, N), dtype=np.int64)
    valid = np.empty((h, N), dtype=bool)
    running = tokens[:, j0:j0 + n_anchors] != PAD
    for i in range(1, h + 1):
        inp = tokens[:, j0 + i:j0 + i + n_anchors]
        tgt = tokens[:, j0 + i + 1:j0 + i + 1 + n_anchors]
        running = running & (inp != PAD) & (tgt != PAD)
        tok_in[i - 1] = np.where(inp != PAD, inp, 0).reshape(N)
        targets[i - 1] = np.where(tgt != PAD, tgt, 0).reshape(N)
        valid[i - 1] = running.reshape(N)
    return tok_in, targets, valid


def stage1_batch_loss(base: BaseModel, speculator: MLPSpeculator,
                      window: np.ndarray, per_anchor: bool = False):
    """Ground-truth alignment: frozen base states + teacher-forced heads."""
    window = np.asarray(window, dtype=np.int64)
    h = speculator.config.n_stages
    T = window.shape[1]
    n_anchors = T - 1 - h
    if n_anchors < 1:
        raise DataError(f"window of {T} too short for {h} stages "
                        f"(need at least {h + 2})")
    states = base_states(base, window)
    B = window.shape[0]
    anchor_states = states[:, :n_anchors].reshape(B * n_anchors, -1)
    tok_in, targets, valid = _stage_token_slices(window, h, 0, n_anchors)
    out = _speculator_loss(speculator.config, speculator.weights,
                           anchor_states, tok_in, targets, valid,
                           per_anchor=per_anchor)
    losses, grads = out[0], out[1]
    report = LossReport(head_losses=[float(x) for x in losses], stage=1)
    if per_anchor:
        return report, grads, out[2]
    return report, grads


def stage2_generate(base: BaseModel, prompts: np.ndarray, gen_len: int
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """Batched greedy continuations plus states at the positions that fed them.

    Returns (full tokens [B, P+G], gen states [B, G, d]) where gen state
    column s is the state after consuming token P-1+s; the last generated
    token is never fed back, so no state exists beyond P+G-2.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    B = prompts.shape[0]
    cache = base.fresh_cache(B)
    logits, states = forward(base, prompts, cache)
    toks = [np.array([greedy_next(logits[i, -1]) for i in range(B)])]
    state_cols = [states[:, -1]]
    for _ in range(gen_len - 1):
        block = toks[-1][:, None]
        logits, states = forward(base, block, cache)
        toks.append(np.array([greedy_next(logits[i, 0]) for i in range(B)]))
        state_cols.append(states[:, 0])
    full = np.concatenate([prompts, np.stack(toks, axis=1)], axis=1)
    gen_states = np.stack(state_cols, axis=1)
    return full, gen_states


def stage2_batch_loss(base: BaseModel, speculator: MLPSpeculator,
                      prompts: np.ndarray, gen_len: int):
    """Behavior alignment: train only on base-generated continuations."""
    h = speculator.config.n_stages
    if gen_len < h + 1:
        raise DataError(f"gen_len {gen_len} too short for {h} stages")
    prompts = np.asarray(prompts, dtype=np.int64)
    B, P = prompts.shape
    full, gen_states = stage2_generate(base, prompts, gen_len)
    # anchors j = P-1 .. P+G-2-h keep every input/target inside the
    # generated region
    n_anchors = gen_len - h
    anchor_states = gen_states[:, :n_anchors].reshape(B * n_anchors, -1)
    tok_in, targets, valid = _stage_token_slices(full, h, P - 1, n_anchors)
    losses, grads = _speculator_loss(speculator.config, speculator.weights,
                                     anchor_states, tok_in, targets, valid)
    report = LossReport(head_losses=[float(x) for x in losses], stage=2)
    return report, grads


# ---------------------------------------------------------------------------
# training loops

@dataclass(frozen=True)
class BaseTrainConfig:
    """Next-token pretraining budget for the desk-scale base model."""

    steps: int = 800
    batch: int = 8
    seq_len: int = 256
    peak_lr: float = 1e-3
    floor_lr: float = 1e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0


def _step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    """Stateless per-step stream: resuming at any step reproduces the draws."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(stage, step)))


def split_windows(pool: np.ndarray, holdout_frac: float = 0.1
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic train/held-out split of a window pool (tail held out)."""
    n_hold = max(1, int(round(len(pool) * holdout_frac)))
    n_hold = min(n_hold, len(pool) - 1)
    return pool[:-n_hold], pool[-n_hold:]


def train_base_model(model: BaseModel, stream: DocumentStream,
                     config: BaseTrainConfig = BaseTrainConfig(),
                     log_every: int = 0) -> List[float]:
    """Pretrain the base model in place with next-token cross-entropy."""
    pool = window_pool(stream, config.seq_len)
    train_pool, _ = split_windows(pool)
    opt = AdamW(model.weights, weight_decay=config.weight_decay)
    losses = []
    for step in range(config.steps):
        rng = _step_rng(config.seed, 0, step)
        idx = rng.integers(0, len(train_pool), size=config.batch)
        loss, grads = base_loss_and_grads(model, train_pool[idx])
        lr = cosine_lr(step, config.steps, config.peak_lr, config.floor_lr,
                       config.warmup_frac)
        if not opt.step(model.weights, grads, lr):
            raise FloatingPointError(f"non-finite gradient at base step {step}")
        losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"base step {step:5d}  lr {lr:.2e}  loss {loss:.4f}")
    return losses


def save_train_state(path: Path, speculator: MLPSpeculator, opt: AdamW,
                     stage: int, step: int, config: TrainConfig) -> None:
    """Training-state container + sidecar JSON of counters."""
    path = Path(path)
    tensors = dict(speculator.weights)
    for k, v in opt.m.items():
        tensors["opt.m." + k] = v
    for k, v in opt.v.items():
        tensors["opt.v." + k] = v
    save_checkpoint(path, {"kind": "train_state",
                           "speculator": asdict(speculator.config)}, tensors)
    sidecar = {"stage": stage, "step": step, "opt_t": opt.t,
               "train_config": asdict(config)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True,
                                                    indent=1))


def load_train_state(path: Path) -> Tuple[MLPSpeculator, AdamW, int, int]:
    path = Path(path)
    header_config, tensors = load_checkpoint(path)
    spec_cfg = SpeculatorConfig(**header_config["speculator"])
    weights = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    speculator = MLPSpeculator(spec_cfg, weights)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    tc = sidecar["train_config"]
    opt = AdamW(weights, beta1=tc["beta1"], beta2=tc["beta2"],
                weight_decay=tc["weight_decay"])
    opt.m = {k[len("opt.m."):]: v for k, v in tensors.items()
             if k.startswith("opt.m.")}
    opt.v = {k[len("opt.v."):]: v for k, v in tensors.items()
             if k.startswith("opt.v.")}
    opt.t = sidecar["opt_t"]
    return speculator, opt, sidecar["stage"], sidecar["step"]


def write_loss_csv(path: Path, reports: Sequence[LossReport]) -> None:
    """Loss curves as CSV: step, stage, loss_head_1..h."""
    if not reports:
        return
    h = len(reports[0].head_losses)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "stage"] + [f"loss_head_{i}"
                                             for i in range(1, h + 1)])
        for r in reports:
            writer.writerow([r.step, r.stage] +
                            [f"{x:.6f}" for x in r.head_losses])


def run_two_stage_training(config: TrainConfig, base: BaseModel,
                           stream: DocumentStream,
                           speculator: Optional[MLPSpeculator] = None,
                           spec_config: Optional[SpeculatorConfig] = None,
                           state_path: Optional[Path] = None,
                           resume_from: Optional[Path] = None,
                           log_every: int = 0):
    """Stage 1 then stage 2 on a frozen base. Reproducible from the seed.

    Returns (speculator, reports, stage1_weights) where stage1_weights is a
    snapshot taken at the stage boundary. Pass `state_path` to write
    periodic resumable snapshots; pass `resume_from` to continue one.
    """
    pool = window_pool(stream, config.stage1_seq_len)
    train_pool, _ = split_windows(pool)
    prompt_pool = train_pool[:, :config.stage2_prompt_len]

    reports: List[LossReport] = []
    stage1_weights = None
    if resume_from is not None:
        speculator, opt, start_stage, start_step = load_train_state(resume_from)
    else:
        if speculator is None:
            cfg = spec_config or SpeculatorConfig(
                d_base=base.config.d_model, vocab_size=base.config.vocab_size)
            speculator = MLPSpeculator.fresh(cfg, config.seed)
        opt = AdamW(speculator.weights, beta1=config.beta1, beta2=config.beta2,
                    weight_decay=config.weight_decay)
        start_stage, start_step = 1, 0

    def maybe_checkpoint(stage, step):
        if state_path is not None and config.checkpoint_every and \
                step % config.checkpoint_every == 0:
            save_train_state(state_path, speculator, opt, stage, step, config)

    if start_stage == 1:
        for step in range(start_step, config.stage1_steps):
            maybe_checkpoint(1, step)
            rng = _step_rng(config.seed, 1, step)
            idx = rng.integers(0, len(train_pool), size=config.stage1_batch)
            report, grads = stage1_batch_loss(base, speculator, train_pool[idx])
            report.step = step
            lr = lr_at(config, step, 1)
            if not opt.step(speculator.weights, grads, lr):
                raise FloatingPointError(f"non-finite gradient, stage 1 "
                                         f"step {step}")
            reports.append(report)
            if log_every and step % log_every == 0:
                print(f"stage1 step {step:5d}  lr {lr:.2e}  "
                      f"loss {report.mean_loss:.4f}")
        stage1_weights = copy.deepcopy(speculator.weights)
        start_step = 0

    for step in range(start_step, config.stage2_steps):
        maybe_checkpoint(2, step)
        rng = _step_rng(config.seed, 2, step)
        idx = rng.integers(0, len(prompt_pool), size=config.stage2_batch)
        report, grads = stage2_batch_loss(base, speculator, prompt_pool[idx],
                                          config.stage2_gen_len)
        report.step = step
        lr = lr_at(config, step, 2)
        if not opt.step(speculator.weights, grads, lr):
            raise FloatingPointError(f"non-finite gradient, stage 2 "
                                     f"step {step}")
        reports.append(report)
        if log_every and step % log_every == 0:
            print(f"stage2 step {step:5d}  lr {lr:.2e}  "
                  f"loss {report.mean_loss:.4f}")

    if state_path is not None:
        save_train_state(state_path, speculator, opt, 2, config.stage2_steps,
                         config)
    return speculator, reports, stage1_weights
