"""AdamW, warmup + cosine schedule, token-budget batching, and the fit loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as m
from .autodiff import backward
from .codec import encode_for_training
from .vocab import PAD_ID, TaskRegistry

DEFAULTS = dict(lr_peak=5e-5, lr_init=1e-6, warmup_steps=256,
                weight_decay=0.1, beta1=0.9, beta2=0.98, epsilon=1e-7)


@dataclass
class OptimState:
    lr_peak: float = DEFAULTS["lr_peak"]
    lr_init: float = DEFAULTS["lr_init"]
    warmup_steps: int = DEFAULTS["warmup_steps"]
    weight_decay: float = DEFAULTS["weight_decay"]
    beta1: float = DEFAULTS["beta1"]
    beta2: float = DEFAULTS["beta2"]
    epsilon: float = DEFAULTS["epsilon"]
    total_steps: int = 0
    step: int = 0
    clip_norm: float = 1.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at_step(opt: OptimState, step: int) -> float:
    """Linear warmup lr_init -> lr_peak, then cosine decay back to lr_init."""
    if step <= opt.warmup_steps:
        if opt.warmup_steps == 0:
            return opt.lr_peak
        return opt.lr_init + (opt.lr_peak - opt.lr_init) * step / opt.warmup_steps
    decay_steps = max(opt.total_steps - opt.warmup_steps, 1)
    t = min(step - opt.warmup_steps, decay_steps) / decay_steps
    return opt.lr_init + 0.5 * (opt.lr_peak - opt.lr_init) * (1.0 + math.cos(math.pi * t))


def adamw_step(opt: OptimState, params: dict) -> None:
    """One decoupled-weight-decay Adam update over all trainable params."""
    gnorm_sq = 0.0
    for name, t in params.items():
        if not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
        gnorm_sq += float((t.grad * t.grad).sum())
    scale = 1.0
    gnorm = math.sqrt(gnorm_sq)
    if opt.clip_norm and gnorm > opt.clip_norm:
        scale = opt.clip_norm / gnorm

    opt.step += 1
    lr = lr_at_step(opt, opt.step)
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name, t in params.items():
        g = t.grad * scale
        if name not in opt.m:
            opt.m[name] = np.zeros_like(t.data)
            opt.v[name] = np.zeros_like(t.data)
        opt.m[name] = opt.beta1 * opt.m[name] + (1 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1 - opt.beta2) * g * g
        update = (opt.m[name] / bc1) / (np.sqrt(opt.v[name] / bc2) + opt.epsilon)
        t.data = t.data - lr * (update + opt.weight_decay * t.data)


# ---------------------------------------------------------------------------
# batching

@dataclass
class BatchPlan:
    token_budget: int = 4096
    seed: int = 0
    max_batch: int = 128


@dataclass
class EncodedSample:
    enc_ids: np.ndarray
    dec_tokens: tuple[int, ...]
    weights: tuple[float, ...]
    task: str
    index: int


def encode_sample(registry: TaskRegistry, sample, embeddings=None) -> EncodedSample:
    spec = registry.task(sample.task)
    ts = encode_for_training(spec, registry.vocabulary, sample.label)
    # target weights: one per predicted position (all tokens after <BOS>);
    # the task-token target gets weight 0
    n_targets = len(ts.tokens) - 1
    weights = [0.0] + [1.0] * (n_targets - 1)
    if spec.loss_weights:
        for i, w in enumerate(spec.loss_weights):
            if 1 + i < n_targets:
                weights[1 + i] = w
    return EncodedSample(m.sequence_to_ids(sample.sequence), ts.tokens, tuple(weights), sample.task, 0)


def _interleave_by_task(encoded: list[EncodedSample], rng: np.random.Generator) -> list[EncodedSample]:
    """Proportional round-robin: per-task shuffle, then largest-remainder interleave."""
    by_task: dict[str, list[EncodedSample]] = {}
    for s in encoded:
        by_task.setdefault(s.task, []).append(s)
    queues = {}
    for task in sorted(by_task):
        items = by_task[task]
        order = rng.permutation(len(items))
        queues[task] = [items[i] for i in order]
    total = len(encoded)
    out: list[EncodedSample] = []
    progress = {task: 0.0 for task in queues}
    counts = {task: len(q) for task, q in queues.items()}
    taken = {task: 0 for task in queues}
    for _ in range(total):
        best, best_lag = None, -1.0
        for task in queues:
            if taken[task] >= counts[task]:
                continue
            lag = counts[task] * (len(out) + 1) / total - taken[task]
            if lag > best_lag:
                best, best_lag = task, lag
        out.append(queues[best][taken[best]])
        taken[best] += 1
    return out


def make_batches(encoded: list[EncodedSample], plan: BatchPlan, epoch: int) -> list[list[EncodedSample]]:
    rng = np.random.default_rng((plan.seed, epoch))
    ordered = _interleave_by_task(encoded, rng)
    batches: list[list[EncodedSample]] = []
    cur: list[EncodedSample] = []
    cur_tokens = 0
    for s in ordered:
        cost = len(s.enc_ids) + len(s.dec_tokens)
        if cur and (cur_tokens + cost > plan.token_budget or len(cur) >= plan.max_batch):
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(s)
        cur_tokens += cost
    if cur:
        batches.append(cur)
    return batches


def collate(batch: list[EncodedSample]):
    B = len(batch)
    L = max(len(s.enc_ids) for s in batch)
    T = max(len(s.dec_tokens) for s in batch) - 1
    enc_ids = np.zeros((B, L), dtype=np.int64)
    enc_pad = np.ones((B, L), dtype=bool)
    dec_ids = np.full((B, T), PAD_ID, dtype=np.int64)
    dec_pad = np.ones((B, T), dtype=bool)
    targets = np.zeros((B, T), dtype=np.int64)
    weights = np.zeros((B, T), dtype=np.float64)
    for i, s in enumerate(batch):
        l, t = len(s.enc_ids), len(s.dec_tokens) - 1
        enc_ids[i, :l] = s.enc_ids
        enc_pad[i, :l] = False
        dec_ids[i, :t] = s.dec_tokens[:-1]
        dec_pad[i, :t] = False
        targets[i, :t] = s.dec_tokens[1:]
        weights[i, :t] = s.weights
    return enc_ids, enc_pad, dec_ids, dec_pad, targets, weights


# ---------------------------------------------------------------------------
# fit

@dataclass
class TrainingReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)
    final_step: int = 0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["epoch", "mean_loss", "lr", "extra"])
        for i, loss in enumerate(self.epoch_losses):
            extra = self.epoch_metrics[i] if i < len(self.epoch_metrics) else {}
            writer.writerow([i, f"{loss:.10f}", f"{extra.get('lr', '')}",
                             ";".join(f"{k}={v}" for k, v in sorted(extra.items()) if k != "lr")])
        return buf.getvalue()


def fit(state: m.ModelState, registry: TaskRegistry, corpus, plan: BatchPlan, epochs: int,
        freeze_encoder: bool | int = False, eval_hook=None, opt: OptimState | None = None,
        strict: bool = True, start_epoch: int = 0) -> TrainingReport:
    """Train in place; deterministic for a fixed plan seed.

    eval_hook(state, epoch, report) runs after each epoch.  freeze_encoder
    follows ModelState.set_encoder_trainable semantics.  Pass opt/start_epoch
    to resume a checkpointed run at an epoch boundary.
    """
    if not corpus:
        raise ValueError("corpus must be nonempty")
    report = TrainingReport()
    encoded: list[EncodedSample] = []
    for i, sample in enumerate(corpus):
        try:
            encoded.append(encode_sample(registry, sample))
        except Exception as e:
            if strict:
                raise
            report.skipped.append((i, str(e)))
    if not encoded:
        raise ValueError("no encodable samples")

    state.set_encoder_trainable(True if freeze_encoder is False else (False if freeze_encoder is True else freeze_encoder))
    params = state.trainable()
    if opt is None:
        opt = OptimState()
    if opt.total_steps == 0:
        opt.total_steps = epochs * len(make_batches(encoded, plan, 0))

    for epoch in range(start_epoch, epochs):
        batches = make_batches(encoded, plan, epoch)
        total_loss = 0.0
        total_weight = 0.0
        for batch in batches:
            arrays = collate(batch)
            state.zero_grad()
            loss = m.model_loss(state, *arrays)
            backward(loss)
            adamw_step(opt, params)
            total_loss += float(loss.data)
            total_weight += float(arrays[5].sum())
        mean_loss = total_loss / max(total_weight, 1.0)
        report.epoch_losses.append(mean_loss)
        report.epoch_metrics.append({"lr": lr_at_step(opt, opt.step)})
        if eval_hook is not None:
            eval_hook(state, epoch, report)
    report.final_step = opt.step
    return report
