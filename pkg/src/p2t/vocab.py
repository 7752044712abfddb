"""Decoder token alphabet and task registry.

The decoder shares one flat vocabulary across every task: four reserved
specials, digit tokens for numeric labels, index tokens for residue
positions, and per-task label/task tokens.  Index tokens reuse the digit
strings "1".."9", so the vocabulary stays a strict bijection between
strings and ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

PAD, BOS, EOS, SEP = "<PAD>", "<BOS>", "<EOS>", "<sep>"
RESERVED = (PAD, BOS, EOS, SEP)
PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3

DIGITS = tuple("0123456789") + (".", "minus")

CATEGORIES = (
    "classification",
    "multilabel",
    "hierarchical",
    "regression",
    "seq2seq",
    "binding_site",
    "ptm",
    "composite",
)

DEFAULT_L_MAX = 2048


class RegistrationError(ValueError):
    pass


class LookupError_(KeyError):
    """Unknown token string; carries the offending string."""

    def __init__(self, s: str):
        super().__init__(s)
        self.token = s


@dataclass(frozen=True)
class TaskSpec:
    name: str
    category: str
    label_alphabet: tuple[str, ...] = ()
    task_token: int | None = None
    loss_weights: tuple[float, ...] | None = None
    regression_range: tuple[float, float] | None = None
    flat: bool = False  # hierarchical category only: one token per full code

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise RegistrationError(f"unknown category {self.category!r}")
        needs_range = self.category == "regression"
        if self.regression_range is not None and not (needs_range or self.category == "composite"):
            raise RegistrationError(f"regression_range not allowed for {self.category}")
        if len(set(self.label_alphabet)) != len(self.label_alphabet):
            raise RegistrationError(f"duplicate label string in task {self.name!r}")

    @property
    def task_token_string(self) -> str:
        return f"<task_{self.name}>"


class Vocabulary:
    """Ordered token list with a reverse index (string -> id)."""

    def __init__(self, entries: list[str]):
        self.entries = list(entries)
        self.index = {s: i for i, s in enumerate(self.entries)}
        if len(self.index) != len(self.entries):
            raise RegistrationError("duplicate strings in vocabulary")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, s: str) -> bool:
        return s in self.index

    def lookup(self, s: str) -> int:
        try:
            return self.index[s]
        except KeyError:
            raise LookupError_(s) from None

    def string(self, token_id: int) -> str:
        return self.entries[token_id]

    def strings(self, ids) -> list[str]:
        return [self.entries[i] for i in ids]

    def serialize(self) -> str:
        return "\n".join(self.entries) + "\n"

    @classmethod
    def deserialize(cls, text: str) -> "Vocabulary":
        return cls(text.splitlines())


class TaskRegistry:
    """Build-phase owner of the vocabulary and the registered tasks."""

    def __init__(self, l_max: int = DEFAULT_L_MAX):
        if l_max < 1:
            raise RegistrationError("l_max must be >= 1")
        self.l_max = l_max
        entries = list(RESERVED) + list(DIGITS)
        seen = set(entries)
        for i in range(1, l_max + 1):
            s = str(i)
            if s not in seen:
                entries.append(s)
                seen.add(s)
        self._entries = entries
        self._seen = seen
        self.tasks: dict[str, TaskSpec] = {}
        self.order: list[str] = []
        self._vocab: Vocabulary | None = None

    def register_task(self, spec: TaskSpec) -> TaskSpec:
        if spec.name in self.tasks:
            raise RegistrationError(f"task {spec.name!r} already registered")
        token_string = spec.task_token_string
        if token_string in self._seen:
            raise RegistrationError(f"task token collision for {spec.name!r}")
        task_token = len(self._entries)
        self._entries.append(token_string)
        self._seen.add(token_string)
        for label in spec.label_alphabet:
            if label not in self._seen:
                self._entries.append(label)
                self._seen.add(label)
        spec = replace(spec, task_token=task_token)
        self.tasks[spec.name] = spec
        self.order.append(spec.name)
        self._vocab = None
        return spec

    @property
    def vocabulary(self) -> Vocabulary:
        if self._vocab is None:
            self._vocab = Vocabulary(self._entries)
        return self._vocab

    def task(self, name: str) -> TaskSpec:
        try:
            return self.tasks[name]
        except KeyError:
            raise LookupError_(name) from None

    def to_json(self) -> str:
        doc = {
            "l_max": self.l_max,
            "tasks": [
                {
                    "name": t.name,
                    "category": t.category,
                    "label_alphabet": list(t.label_alphabet),
                    "regression_range": list(t.regression_range) if t.regression_range else None,
                    "loss_weights": list(t.loss_weights) if t.loss_weights else None,
                    "flat": t.flat,
                }
                for t in (self.tasks[n] for n in self.order)
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TaskRegistry":
        doc = json.loads(text)
        reg = cls(l_max=doc["l_max"])
        for t in doc["tasks"]:
            reg.register_task(
                TaskSpec(
                    name=t["name"],
                    category=t["category"],
                    label_alphabet=tuple(t["label_alphabet"]),
                    regression_range=tuple(t["regression_range"]) if t.get("regression_range") else None,
                    loss_weights=tuple(t["loss_weights"]) if t.get("loss_weights") else None,
                    flat=t.get("flat", False),
                )
            )
        return reg


def build_vocabulary(tasks: list[TaskSpec], l_max: int = DEFAULT_L_MAX) -> Vocabulary:
    """Deterministic vocabulary for a task list; see TaskRegistry for the order."""
    reg = TaskRegistry(l_max=l_max)
    for spec in tasks:
        reg.register_task(spec)
    return reg.vocabulary


def lookup(vocab: Vocabulary, s: str) -> int:
    return vocab.lookup(s)
