"""Greedy decoding with the forced-EOS length constraint, plus metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as m
from .autodiff import Tensor
from .codec import (CompositeLabel, ClassLabel, DecodeResult, PtmLabel, RegLabel,
                    Seq2SeqLabel, SiteLabel, TokenSequence, decode_label)
from .vocab import BOS_ID, EOS_ID, TaskRegistry, TaskSpec


@dataclass
class DecodeOptions:
    max_new_tokens: int = 64
    eos_constraint: str = "none"  # "none" | "exact_input_length"
    task: TaskSpec | None = None

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.eos_constraint not in ("none", "exact_input_length"):
            raise ValueError(f"unknown eos_constraint {self.eos_constraint!r}")


@dataclass
class DecodeOutcome:
    sequence: TokenSequence
    truncated: bool = False


def greedy_decode(state: m.ModelState, seq: str, opts: DecodeOptions,
                  embeddings: np.ndarray | None = None) -> DecodeOutcome:
    """Argmax decoding; ties resolve to the lowest token id (np.argmax order).

    Under exact_input_length the <EOS> logit is forced to -inf until the body
    has one token per input residue, and to +inf once it does.
    """
    if opts.task is None or opts.task.task_token is None:
        raise ValueError("a registered task is required for decoding")
    h_proj = m.fuse(state, m.encode_protein(state, seq, embeddings=embeddings))
    tokens = [BOS_ID, opts.task.task_token]
    L = len(seq)
    truncated = False
    # the decoder positional table bounds how many tokens can be generated
    room = state.config.dec_pos_rows - len(tokens)
    for _ in range(min(opts.max_new_tokens, room)):
        logits = m.decode_forward(state, h_proj, tokens).data[-1]
        body_len = len(tokens) - 2
        if opts.eos_constraint == "exact_input_length":
            if body_len < L:
                logits = logits.copy()
                logits[EOS_ID] = -np.inf
            else:
                tokens.append(EOS_ID)
                break
        nxt = int(np.argmax(logits))
        tokens.append(nxt)
        if nxt == EOS_ID:
            break
    else:
        truncated = tokens[-1] != EOS_ID
        if truncated:
            tokens.append(EOS_ID)
    return DecodeOutcome(TokenSequence(tuple(tokens)), truncated=truncated)


# ---------------------------------------------------------------------------
# metrics

def site_f1(pred: SiteLabel, gold: SiteLabel, L: int):
    """Per-residue binary confusion over positions 1..L."""
    p, g = set(pred.indices), set(gold.indices)
    if (p | g) and max(p | g) > L:
        raise ValueError("site index exceeds sequence length")
    tp = len(p & g)
    fp = len(p - g)
    fn = len(g - p)
    denom = 2 * tp + fp + fn
    f1 = 1.0 if denom == 0 else 2 * tp / denom
    return f1, tp, fp, fn


def spearman(pred, gold) -> float:
    """Pearson correlation of mean ranks (ties averaged)."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.size < 2:
        raise ValueError("need two equal-length vectors of size >= 2")

    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        i = 0
        while i < len(x):
            j = i
            while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
                j += 1
            r[order[i : j + 1]] = (i + j) / 2 + 1
            i = j + 1
        return r

    rp, rg = ranks(pred), ranks(gold)
    sp, sg = rp.std(), rg.std()
    if sp == 0 or sg == 0:
        raise ValueError("constant input vector: spearman undefined")
    return float(((rp - rp.mean()) * (rg - rg.mean())).mean() / (sp * sg))


def _binary_f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def macro_f1(preds, golds, classes) -> float:
    """Unweighted mean of per-class binary F1.

    preds/golds are sets of class strings per sample (singleton sets for
    multi-class).  A class absent from both sides everywhere scores 1.
    """
    scores = []
    for cls in classes:
        tp = sum(1 for p, g in zip(preds, golds) if cls in p and cls in g)
        fp = sum(1 for p, g in zip(preds, golds) if cls in p and cls not in g)
        fn = sum(1 for p, g in zip(preds, golds) if cls not in p and cls in g)
        scores.append(_binary_f1(tp, fp, fn))
    return float(np.mean(scores))


def mae(pred, gold) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    return float(np.abs(pred - gold).mean())


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    unparseable: int = 0
    per_sample: list[dict] = field(default_factory=list)


def _tolerant_parse(spec: TaskSpec, registry: TaskRegistry, ts: TokenSequence) -> DecodeResult:
    return decode_label(spec, registry.vocabulary, ts, strict=False)


def evaluate_task(state: m.ModelState, registry: TaskRegistry, test_set, task_name: str,
                  max_new_tokens: int = 64) -> MetricReport:
    """Greedy-decode every sample, tolerant-parse, and score per category."""
    if not test_set:
        raise ValueError("empty test set")
    spec = registry.task(task_name)
    if any(s.task != task_name for s in test_set):
        raise ValueError("all samples must belong to the evaluated task")
    report = MetricReport(task=task_name)
    opts = DecodeOptions(
        max_new_tokens=max_new_tokens,
        eos_constraint="exact_input_length" if spec.category == "seq2seq" else "none",
        task=spec,
    )
    preds, golds = [], []
    tp = fp = fn = 0
    for sample in test_set:
        out = greedy_decode(state, sample.sequence, opts)
        try:
            result = _tolerant_parse(spec, registry, out.sequence)
            pred = result.label
        except Exception:
            pred = None
        if pred is None:
            report.unparseable += 1
        row = {"sequence": sample.sequence, "ok": pred is not None}
        if spec.category in ("classification", "multilabel", "composite"):
            gold_set = {sample.label.cls} if isinstance(sample.label, CompositeLabel) else set(sample.label.labels)
            pred_set = set()
            if isinstance(pred, ClassLabel):
                pred_set = set(pred.labels)
            elif isinstance(pred, CompositeLabel):
                pred_set = {pred.cls}
            preds.append(pred_set)
            golds.append(gold_set)
            row["pred"] = sorted(pred_set)
        elif spec.category == "regression":
            gold_v = sample.label.value
            pred_v = pred.value if isinstance(pred, RegLabel) and np.isfinite(pred.value) else None
            if pred_v is None:
                report.unparseable += 0 if pred is None else 1
                pred_v = float("nan")
            preds.append(pred_v)
            golds.append(gold_v)
            row["pred"] = pred_v
        elif spec.category in ("binding_site", "ptm"):
            if spec.category == "ptm":
                gold_sites = SiteLabel(sample.label.positives)
                pred_sites = SiteLabel(pred.positives) if isinstance(pred, PtmLabel) else SiteLabel(())
            else:
                gold_sites = sample.label
                pred_sites = pred if isinstance(pred, SiteLabel) else SiteLabel(())
            L = len(sample.sequence)
            pred_sites = SiteLabel(tuple(i for i in pred_sites.indices if i <= L))
            _, s_tp, s_fp, s_fn = site_f1(pred_sites, gold_sites, L)
            tp, fp, fn = tp + s_tp, fp + s_fp, fn + s_fn
            row["pred"] = list(pred_sites.indices)
        elif spec.category == "seq2seq":
            gold_syms = sample.label.symbols
            pred_syms = pred.symbols if isinstance(pred, Seq2SeqLabel) else ()
            pred_syms = tuple(pred_syms)[: len(gold_syms)]
            pred_syms = pred_syms + ("",) * (len(gold_syms) - len(pred_syms))
            preds.extend(pred_syms)
            golds.extend(gold_syms)
            row["pred"] = "".join(pred_syms)
        else:
            raise ValueError(f"no metric for category {spec.category!r}")
        report.per_sample.append(row)

    if spec.category in ("classification", "multilabel", "composite"):
        classes = spec.label_alphabet
        exact = sum(1 for p, g in zip(preds, golds) if p == g)
        report.metrics["accuracy"] = exact / len(preds)
        report.metrics["macro_f1"] = macro_f1(preds, golds, classes)
    elif spec.category == "regression":
        ok = [(p, g) for p, g in zip(preds, golds) if np.isfinite(p)]
        if len(ok) >= 2:
            p_arr = [p for p, _ in ok]
            g_arr = [g for _, g in ok]
            try:
                report.metrics["spearman"] = spearman(p_arr, g_arr)
            except ValueError:
                report.metrics["spearman"] = float("nan")
            report.metrics["mae"] = mae(p_arr, g_arr)
    elif spec.category in ("binding_site", "ptm"):
        report.counts.update(tp=tp, fp=fp, fn=fn)
        report.metrics["f1"] = _binary_f1(tp, fp, fn)
    elif spec.category == "seq2seq":
        match = sum(1 for p, g in zip(preds, golds) if p == g)
        report.metrics["accuracy"] = match / len(preds)
        report.metrics["macro_f1"] = macro_f1([{p} for p in preds], [{g} for g in golds], spec.label_alphabet)
    return report
