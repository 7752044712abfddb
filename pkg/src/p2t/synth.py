"""Synthetic corpora: self-supervised position tasks and toy supervised tasks.

Every toy task has an exact closed-form label rule so training runs can be
checked against ground truth.  Generation is pure in (seed, params).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .codec import ClassLabel, Label, RegLabel, Seq2SeqLabel, SiteLabel
from .vocab import TaskRegistry, TaskSpec

STANDARD_AA = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET = STANDARD_AA + "X"
MOTIF = "STY"

TOY_KINDS = ("position", "count_regression", "motif_class", "identity_seq2seq", "motif_sites")


def validate_sequence(seq: str, l_max: int | None = None) -> str:
    if not seq:
        raise ValueError("empty protein sequence")
    bad = set(seq) - set(ALPHABET)
    if bad:
        raise ValueError(f"invalid residues {sorted(bad)}")
    if l_max is not None and len(seq) > l_max:
        raise ValueError(f"sequence length {len(seq)} exceeds {l_max}")
    return seq


@dataclass(frozen=True)
class SynthSample:
    sequence: str
    task: str
    label: Label


def position_task_name(aa: str) -> str:
    return f"pos_{aa}"


def position_task_specs(amino_acids=STANDARD_AA) -> list[TaskSpec]:
    return [TaskSpec(name=position_task_name(aa), category="binding_site") for aa in amino_acids]


def toy_task_spec(kind: str) -> list[TaskSpec]:
    if kind == "position":
        return position_task_specs()
    if kind == "count_regression":
        return [TaskSpec(name="count_regression", category="regression", regression_range=(0.0, 1.0))]
    if kind == "motif_class":
        return [TaskSpec(name="motif_class", category="classification", label_alphabet=("absent", "present"))]
    if kind == "identity_seq2seq":
        return [TaskSpec(name="identity_seq2seq", category="seq2seq", label_alphabet=tuple(ALPHABET))]
    if kind == "motif_sites":
        return [TaskSpec(name="motif_sites", category="binding_site")]
    raise ValueError(f"unknown toy kind {kind!r}")


def find_positions(seq: str, aa: str) -> tuple[int, ...]:
    return tuple(i + 1 for i, c in enumerate(seq) if c == aa)


def find_motif_starts(seq: str, motif: str = MOTIF) -> tuple[int, ...]:
    return tuple(i + 1 for i in range(len(seq) - len(motif) + 1) if seq[i : i + len(motif)] == motif)


def synthesize_position_tasks(seq: str, amino_acids) -> list[SynthSample]:
    """One sample per amino acid: label = all 1-based positions of that residue."""
    validate_sequence(seq)
    if not amino_acids:
        raise ValueError("amino_acids must be nonempty")
    return [
        SynthSample(seq, position_task_name(aa), SiteLabel(find_positions(seq, aa)))
        for aa in amino_acids
    ]


def _random_sequence(rng: np.random.Generator, l_range: tuple[int, int]) -> str:
    L = int(rng.integers(l_range[0], l_range[1] + 1))
    return "".join(STANDARD_AA[i] for i in rng.integers(0, len(STANDARD_AA), size=L))


def _toy_label(kind: str, seq: str) -> Label:
    if kind == "count_regression":
        return RegLabel(seq.count("A") / len(seq))
    if kind == "motif_class":
        return ClassLabel.of("present" if MOTIF in seq else "absent")
    if kind == "identity_seq2seq":
        return Seq2SeqLabel(tuple(seq))
    if kind == "motif_sites":
        return SiteLabel(find_motif_starts(seq))
    raise ValueError(kind)


def make_toy_corpus(kind: str, n: int, l_range: tuple[int, int] = (6, 12), seed: int = 0) -> list[SynthSample]:
    """Deterministic corpus of n samples with closed-form labels.

    Motif kinds plant the motif in half the samples so both classes occur.
    The position kind emits one sample per (sequence, residue type present).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy kind {kind!r}")
    rng = np.random.default_rng(seed)
    out: list[SynthSample] = []

    if kind == "position":
        while len(out) < n:
            seq = _random_sequence(rng, l_range)
            aa = STANDARD_AA[int(rng.integers(0, len(STANDARD_AA)))]
            out.append(SynthSample(seq, position_task_name(aa), SiteLabel(find_positions(seq, aa))))
        return out

    for i in range(n):
        seq = _random_sequence(rng, l_range)
        if kind in ("motif_class", "motif_sites") and i % 2 == 0 and len(seq) >= len(MOTIF):
            at = int(rng.integers(0, len(seq) - len(MOTIF) + 1))
            seq = seq[:at] + MOTIF + seq[at + len(MOTIF):]
        out.append(SynthSample(seq, kind, _toy_label(kind, seq)))
    return out


def make_contradictory_pair(n: int, l_range: tuple[int, int] = (8, 12), seed: int = 0):
    """Two tasks with inverted labels over identical inputs, for prompt-steering runs.

    Sequences are composed with an A-fraction of roughly 0.2 or 0.8 so the
    underlying rule (A-rich vs A-poor) is cleanly learnable.  The mix is 3
    rich to 2 poor, which gives each task a distinct marginal label
    distribution; with a 50/50 mix the two prompts are exactly symmetric at
    initialization and joint training tends to stall on that saddle.
    """
    rng = np.random.default_rng(seed)
    specs = [
        TaskSpec(name="steer_a", category="classification", label_alphabet=("hi", "lo")),
        TaskSpec(name="steer_b", category="classification", label_alphabet=("hi", "lo")),
    ]
    samples: list[SynthSample] = []
    others = STANDARD_AA.replace("A", "")
    for i in range(n):
        L = int(rng.integers(l_range[0], l_range[1] + 1))
        rich = i % 5 < 3
        p_a = 0.8 if rich else 0.2
        seq = "".join("A" if rng.random() < p_a else others[int(rng.integers(0, len(others)))] for _ in range(L))
        rich = seq.count("A") / L >= 0.5
        samples.append(SynthSample(seq, "steer_a", ClassLabel.of("hi" if rich else "lo")))
        samples.append(SynthSample(seq, "steer_b", ClassLabel.of("lo" if rich else "hi")))
    return specs, samples


def split_dataset(samples: list[SynthSample], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint train/val/test cover with a deterministic shuffle."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be positive and sum to 1")
    n = len(samples)
    n_train = round(n * ratios[0])
    n_val = round(n * ratios[1])
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} samples cannot fill all three splits at {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


# ---------------------------------------------------------------------------
# persistence

def _label_to_json(label: Label):
    from . import codec as c

    if isinstance(label, c.ClassLabel):
        return {"classes": sorted(label.labels)}
    if isinstance(label, c.RegLabel):
        return {"value": label.value}
    if isinstance(label, c.Seq2SeqLabel):
        return {"symbols": list(label.symbols)}
    if isinstance(label, c.SiteLabel):
        return {"sites": list(label.indices)}
    if isinstance(label, c.PtmLabel):
        return {"candidates": list(label.candidates), "positives": list(label.positives)}
    if isinstance(label, c.HierLabel):
        return {"entries": [list(e) for e in label.entries]}
    if isinstance(label, c.CompositeLabel):
        return {"class": label.cls, "site": label.site}
    raise TypeError(type(label))


def label_from_json(category: str, doc: dict) -> Label:
    from . import codec as c

    if category in ("classification", "multilabel"):
        return c.ClassLabel(frozenset(doc["classes"]))
    if category == "regression":
        return c.RegLabel(float(doc["value"]))
    if category == "seq2seq":
        return c.Seq2SeqLabel(tuple(doc["symbols"]))
    if category == "binding_site":
        return c.SiteLabel(tuple(doc["sites"]))
    if category == "ptm":
        return c.PtmLabel(tuple(doc["candidates"]), tuple(doc["positives"]))
    if category == "hierarchical":
        return c.HierLabel(tuple(tuple(e) for e in doc["entries"]))
    if category == "composite":
        return c.CompositeLabel(doc["class"], doc.get("site"))
    raise ValueError(category)


def samples_to_jsonl(samples: list[SynthSample]) -> str:
    lines = [
        json.dumps({"sequence": s.sequence, "task": s.task, "label": _label_to_json(s.label)})
        for s in samples
    ]
    return "\n".join(lines) + "\n"


def samples_from_jsonl(text: str, registry: TaskRegistry, strict: bool = True):
    """Parse and validate; returns (samples, errors as (line_no, message))."""
    samples: list[SynthSample] = []
    errors: list[tuple[int, str]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            seq = validate_sequence(doc["sequence"])
            spec = registry.task(doc["task"])
            label = label_from_json(spec.category, doc["label"])
            _validate_label(spec, label, len(seq))
            samples.append(SynthSample(seq, spec.name, label))
        except Exception as e:  # report the line, keep or abort per mode
            errors.append((line_no, f"{type(e).__name__}: {e}"))
            if strict:
                raise ValueError(f"line {line_no}: {e}") from e
    return samples, errors


def _validate_label(spec: TaskSpec, label: Label, seq_len: int) -> None:
    from . import codec as c

    if isinstance(label, c.SiteLabel) and label.indices and label.indices[-1] > seq_len:
        raise ValueError(f"site index {label.indices[-1]} exceeds sequence length {seq_len}")
    if isinstance(label, c.Seq2SeqLabel) and len(label.symbols) != seq_len:
        raise ValueError(f"seq2seq label length {len(label.symbols)} != sequence length {seq_len}")
    if isinstance(label, c.PtmLabel) and label.candidates and label.candidates[-1] > seq_len:
        raise ValueError("ptm candidate index exceeds sequence length")
