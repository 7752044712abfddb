"""Label <-> token-sequence codec.

Each task category has an exact token grammar: classification emits sorted
label tokens, regression emits sign/digit/point characters with a fixed
4-digit fraction, sequence-to-sequence emits one token per residue, binding
sites emit sorted 1-based index tokens, PTM emits candidates <sep> positives,
and composite emits a class token plus an optional index.  Every sequence is
framed by <BOS>/<EOS>.  Decoding runs either strict (raise on the first
grammar violation) or tolerant (collect diagnostics, drop the malformed
tail) for raw model output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

from .vocab import BOS, BOS_ID, EOS, EOS_ID, SEP, SEP_ID, TaskSpec, Vocabulary

FRACTION_DIGITS = 4


class CodecError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} at position {position}")
        self.position = position


# ---------------------------------------------------------------------------
# labels

@dataclass(frozen=True)
class ClassLabel:
    labels: frozenset[str]

    @classmethod
    def of(cls, *labels: str) -> "ClassLabel":
        return cls(frozenset(labels))


@dataclass(frozen=True)
class HierLabel:
    entries: tuple[tuple[int, int, int, int], ...]


@dataclass(frozen=True)
class RegLabel:
    value: float


@dataclass(frozen=True)
class Seq2SeqLabel:
    symbols: tuple[str, ...]


@dataclass(frozen=True)
class SiteLabel:
    indices: tuple[int, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise CodecError("site indices must be strictly increasing")
        if self.indices and self.indices[0] < 1:
            raise CodecError("site indices are 1-based")


@dataclass(frozen=True)
class PtmLabel:
    candidates: tuple[int, ...]
    positives: tuple[int, ...]

    def __post_init__(self):
        if not set(self.positives) <= set(self.candidates):
            raise CodecError("ptm positives must be a subset of candidates")


@dataclass(frozen=True)
class CompositeLabel:
    cls: str
    site: int | None = None


Label = ClassLabel | HierLabel | RegLabel | Seq2SeqLabel | SiteLabel | PtmLabel | CompositeLabel


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]

    def body(self) -> tuple[int, ...]:
        return self.tokens[1:-1]


@dataclass
class Diagnostic:
    position: int
    message: str


@dataclass
class DecodeResult:
    label: Label
    diagnostics: list[Diagnostic] = field(default_factory=list)


# ---------------------------------------------------------------------------
# encoding

def _frame(vocab: Vocabulary, body_strings: list[str]) -> TokenSequence:
    ids = [BOS_ID] + [vocab.lookup(s) for s in body_strings] + [EOS_ID]
    return TokenSequence(tuple(ids))


def encode_classification(spec: TaskSpec, vocab: Vocabulary, label: ClassLabel) -> TokenSequence:
    if not label.labels:
        raise CodecError("empty label set")
    unknown = label.labels - set(spec.label_alphabet)
    if unknown:
        raise CodecError(f"unknown label(s) {sorted(unknown)} for task {spec.name!r}")
    if spec.category == "classification" and len(label.labels) != 1:
        raise CodecError("multi-class label must have exactly one string")
    return _frame(vocab, sorted(label.labels))


def format_regression_body(value: float, regression_range: tuple[float, float] | None) -> list[str]:
    """Character tokens for a real: optional minus, integer digits, '.', 4 fraction digits."""
    if not math.isfinite(value):
        raise CodecError(f"non-finite regression value {value!r}")
    if regression_range is not None:
        lo, hi = regression_range
        if hi <= lo:
            raise CodecError("degenerate regression_range")
        value = (value - lo) / (hi - lo)
    # round-half-away-from-zero on the magnitude
    q = Decimal(repr(abs(value))).quantize(Decimal(1).scaleb(-FRACTION_DIGITS), rounding=ROUND_HALF_UP)
    text = format(q, "f")
    int_part, frac_part = text.split(".")
    body: list[str] = []
    if value < 0 and q != 0:
        body.append("minus")
    body.extend(int_part)
    body.append(".")
    body.extend(frac_part)
    return body


def encode_regression(spec: TaskSpec, vocab: Vocabulary, value: float) -> TokenSequence:
    return _frame(vocab, format_regression_body(value, spec.regression_range))


def encode_hierarchical(spec: TaskSpec, vocab: Vocabulary, label: HierLabel) -> TokenSequence:
    body: list[str] = []
    for entry in label.entries:
        if len(entry) != 4:
            raise CodecError(f"hierarchical entry {entry!r} must have 4 components")
        if spec.flat:
            body.append("ec_" + ".".join(str(c) for c in entry))
        else:
            body.append(f"ec_{entry[0]}")
            body.extend(str(c) for c in entry[1:])
    for s in body:
        if s not in vocab:
            raise CodecError(f"token {s!r} not in alphabet for task {spec.name!r}")
    return _frame(vocab, body)


def encode_seq2seq(spec: TaskSpec, vocab: Vocabulary, label: Seq2SeqLabel) -> TokenSequence:
    if not label.symbols:
        raise CodecError("empty seq2seq label")
    bad = [s for s in label.symbols if s not in spec.label_alphabet]
    if bad:
        raise CodecError(f"symbols {sorted(set(bad))} not in alphabet for task {spec.name!r}")
    return _frame(vocab, list(label.symbols))


def encode_binding_sites(spec: TaskSpec, vocab: Vocabulary, label: SiteLabel, l_max: int | None = None) -> TokenSequence:
    for idx in label.indices:
        if l_max is not None and idx > l_max:
            raise CodecError(f"site index {idx} exceeds maximum length {l_max}")
        if str(idx) not in vocab:
            raise CodecError(f"site index {idx} has no index token")
    return _frame(vocab, [str(i) for i in label.indices])


def encode_ptm(spec: TaskSpec, vocab: Vocabulary, label: PtmLabel) -> TokenSequence:
    for seq, kind in ((label.candidates, "candidates"), (label.positives, "positives")):
        if any(b <= a for a, b in zip(seq, seq[1:])):
            raise CodecError(f"ptm {kind} must be sorted strictly ascending")
    body = [str(i) for i in label.candidates] + [SEP] + [str(i) for i in label.positives]
    return _frame(vocab, body)


def encode_composite(spec: TaskSpec, vocab: Vocabulary, label: CompositeLabel) -> TokenSequence:
    if label.cls not in spec.label_alphabet:
        raise CodecError(f"unknown class {label.cls!r} for task {spec.name!r}")
    body = [label.cls]
    if label.site is not None:
        if label.site < 1:
            raise CodecError("composite site index is 1-based")
        if str(label.site) not in vocab:
            raise CodecError(f"site index {label.site} has no index token")
        body.append(str(label.site))
    return _frame(vocab, body)


_ENCODERS = {
    "classification": encode_classification,
    "multilabel": encode_classification,
    "hierarchical": encode_hierarchical,
    "seq2seq": encode_seq2seq,
    "ptm": encode_ptm,
    "composite": encode_composite,
}


def encode_label(spec: TaskSpec, vocab: Vocabulary, label: Label) -> TokenSequence:
    """Dispatch on the task category."""
    if spec.category == "regression":
        if not isinstance(label, RegLabel):
            raise CodecError(f"expected RegLabel for {spec.name!r}")
        return encode_regression(spec, vocab, label.value)
    if spec.category == "binding_site":
        if not isinstance(label, SiteLabel):
            raise CodecError(f"expected SiteLabel for {spec.name!r}")
        return encode_binding_sites(spec, vocab, label)
    return _ENCODERS[spec.category](spec, vocab, label)


def encode_for_training(spec: TaskSpec, vocab: Vocabulary, label: Label) -> TokenSequence:
    """Task-prompted form: <BOS>, task token, body, <EOS>."""
    ts = encode_label(spec, vocab, label)
    if spec.task_token is None:
        raise CodecError(f"task {spec.name!r} has no task token assigned")
    return TokenSequence((BOS_ID, spec.task_token) + ts.tokens[1:])


# ---------------------------------------------------------------------------
# decoding

def _check_frame(ts: TokenSequence) -> None:
    if len(ts.tokens) < 2 or ts.tokens[0] != BOS_ID:
        raise DecodeError("sequence must start with <BOS>", 0)
    if ts.tokens[-1] != EOS_ID:
        raise DecodeError("sequence must end with <EOS>", len(ts.tokens) - 1)


def strip_prompt(spec: TaskSpec, ts: TokenSequence) -> TokenSequence:
    """Remove the task token from a prompted sequence."""
    toks = ts.tokens
    if len(toks) >= 2 and toks[1] == spec.task_token:
        return TokenSequence((toks[0],) + toks[2:])
    return ts


def _parse_index(s: str, pos: int, diags: list[Diagnostic] | None) -> int | None:
    if not s.isdigit() or (len(s) > 1 and s[0] == "0") or s == "0":
        msg = f"expected positive index token, got {s!r}"
        if diags is None:
            raise DecodeError(msg, pos)
        diags.append(Diagnostic(pos, msg))
        return None
    return int(s)


def _decode_sites(strings: list[str], strict: bool, diags: list[Diagnostic]) -> SiteLabel:
    out: list[int] = []
    for pos, s in enumerate(strings, start=1):
        idx = _parse_index(s, pos, None if strict else diags)
        if idx is None:
            break
        if out and idx <= out[-1]:
            msg = f"non-ascending index at position {pos}"
            if strict:
                raise DecodeError(msg, pos)
            diags.append(Diagnostic(pos, msg))
            break
        out.append(idx)
    return SiteLabel(tuple(out))


def _decode_regression(spec: TaskSpec, strings: list[str], strict: bool, diags: list[Diagnostic]) -> RegLabel:
    def fail(msg: str, pos: int):
        raise DecodeError(msg, pos)

    def note(msg: str, pos: int) -> bool:
        if strict:
            fail(msg, pos)
        diags.append(Diagnostic(pos, msg))
        return False

    neg = False
    i = 0
    if i < len(strings) and strings[i] == "minus":
        neg = True
        i = 1
    int_digits: list[str] = []
    while i < len(strings) and strings[i].isdigit() and len(strings[i]) == 1:
        int_digits.append(strings[i])
        i += 1
    if not int_digits:
        note("missing integer digits", i + 1)
        return RegLabel(float("nan"))
    if len(int_digits) > 1 and int_digits[0] == "0":
        note("leading zero in integer part", 1)
    if i >= len(strings) or strings[i] != ".":
        if i < len(strings) and strings[i] == "minus":
            note("minus not first", i + 1)
        else:
            note("missing decimal point", i + 1)
        frac_digits: list[str] = []
    else:
        i += 1
        frac_digits = []
        while i < len(strings) and strings[i].isdigit() and len(strings[i]) == 1:
            frac_digits.append(strings[i])
            i += 1
        if i < len(strings):
            note(f"trailing token {strings[i]!r} after number", i + 1)
    value = float(("-" if neg else "") + "".join(int_digits) + "." + ("".join(frac_digits) or "0"))
    if spec.regression_range is not None:
        lo, hi = spec.regression_range
        value = lo + value * (hi - lo)
    return RegLabel(value)


def decode_regression(spec: TaskSpec, vocab: Vocabulary, ts: TokenSequence) -> float:
    _check_frame(ts)
    label = _decode_regression(spec, vocab.strings(ts.body()), strict=True, diags=[])
    return label.value


def decode_label(spec: TaskSpec, vocab: Vocabulary, ts: TokenSequence, strict: bool = True) -> DecodeResult:
    """Inverse of encode_label; tolerant mode salvages a prefix parse."""
    _check_frame(ts)
    strings = vocab.strings(strip_prompt(spec, ts).body())
    diags: list[Diagnostic] = []

    if spec.category in ("classification", "multilabel"):
        labels: list[str] = []
        alphabet = set(spec.label_alphabet)
        for pos, s in enumerate(strings, start=1):
            if s not in alphabet:
                if strict:
                    raise DecodeError(f"token {s!r} not a label of task {spec.name!r}", pos)
                diags.append(Diagnostic(pos, f"token {s!r} not a label"))
                break
            if labels and s < labels[-1]:
                if strict:
                    raise DecodeError(f"labels not alphabetical at position {pos}", pos)
                diags.append(Diagnostic(pos, "labels not alphabetical"))
            labels.append(s)
        if not labels:
            if strict:
                raise DecodeError("empty label body", 1)
            diags.append(Diagnostic(1, "empty label body"))
        if spec.category == "classification" and len(labels) > 1:
            if strict:
                raise DecodeError("multi-class output has more than one label", 2)
            diags.append(Diagnostic(2, "extra class tokens dropped"))
            labels = labels[:1]
        return DecodeResult(ClassLabel(frozenset(labels)), diags)

    if spec.category == "hierarchical":
        entries: list[tuple[int, int, int, int]] = []
        if spec.flat:
            for pos, s in enumerate(strings, start=1):
                if not s.startswith("ec_"):
                    if strict:
                        raise DecodeError(f"expected flat code token, got {s!r}", pos)
                    diags.append(Diagnostic(pos, f"unexpected token {s!r}"))
                    break
                parts = s[3:].split(".")
                if len(parts) != 4 or not all(p.isdigit() for p in parts):
                    if strict:
                        raise DecodeError(f"malformed flat code {s!r}", pos)
                    diags.append(Diagnostic(pos, f"malformed flat code {s!r}"))
                    break
                entries.append(tuple(int(p) for p in parts))
        else:
            i = 0
            while i < len(strings):
                s = strings[i]
                if not (s.startswith("ec_") and s[3:].isdigit()):
                    if strict:
                        raise DecodeError(f"expected prefix token, got {s!r}", i + 1)
                    diags.append(Diagnostic(i + 1, f"unexpected token {s!r}"))
                    break
                rest = strings[i + 1 : i + 4]
                if len(rest) < 3 or not all(r.isdigit() for r in rest):
                    if strict:
                        raise DecodeError("truncated hierarchical entry", i + 1)
                    diags.append(Diagnostic(i + 1, "truncated hierarchical entry dropped"))
                    break
                entries.append((int(s[3:]),) + tuple(int(r) for r in rest))
                i += 4
        return DecodeResult(HierLabel(tuple(entries)), diags)

    if spec.category == "regression":
        label = _decode_regression(spec, strings, strict, diags)
        return DecodeResult(label, diags)

    if spec.category == "seq2seq":
        symbols: list[str] = []
        alphabet = set(spec.label_alphabet)
        for pos, s in enumerate(strings, start=1):
            if s not in alphabet:
                if strict:
                    raise DecodeError(f"token {s!r} not in seq2seq alphabet", pos)
                diags.append(Diagnostic(pos, f"token {s!r} dropped"))
                break
            symbols.append(s)
        if not symbols and strict:
            raise DecodeError("empty seq2seq body", 1)
        return DecodeResult(Seq2SeqLabel(tuple(symbols)), diags)

    if spec.category == "binding_site":
        return DecodeResult(_decode_sites(strings, strict, diags), diags)

    if spec.category == "ptm":
        if SEP in [s for s in strings]:
            sep_at = strings.index(SEP)
            cand = _decode_sites(strings[:sep_at], strict, diags)
            rest = strings[sep_at + 1 :]
            if SEP in rest:
                if strict:
                    raise DecodeError("duplicate <sep>", sep_at + 2 + rest.index(SEP))
                diags.append(Diagnostic(sep_at + 2 + rest.index(SEP), "duplicate <sep>, tail dropped"))
                rest = rest[: rest.index(SEP)]
            pos_label = _decode_sites(rest, strict, diags)
            positives = tuple(i for i in pos_label.indices if i in set(cand.indices))
            if len(positives) != len(pos_label.indices):
                if strict:
                    raise DecodeError("positive index not among candidates", sep_at + 2)
                diags.append(Diagnostic(sep_at + 2, "positives outside candidates dropped"))
            return DecodeResult(PtmLabel(cand.indices, positives), diags)
        if strict:
            raise DecodeError("missing <sep> in ptm sequence", len(strings))
        diags.append(Diagnostic(len(strings), "missing <sep>; candidates-only parse"))
        cand = _decode_sites(strings, strict, diags)
        return DecodeResult(PtmLabel(cand.indices, ()), diags)

    if spec.category == "composite":
        if not strings:
            raise DecodeError("empty composite body", 1)
        cls = strings[0]
        if cls not in spec.label_alphabet:
            if strict:
                raise DecodeError(f"unknown class token {cls!r}", 1)
            diags.append(Diagnostic(1, f"unknown class token {cls!r}"))
            return DecodeResult(CompositeLabel(cls=spec.label_alphabet[0] if spec.label_alphabet else cls), diags)
        site = None
        if len(strings) > 1:
            site = _parse_index(strings[1], 2, None if strict else diags)
            if len(strings) > 2:
                if strict:
                    raise DecodeError("trailing tokens after composite site", 3)
                diags.append(Diagnostic(3, "trailing tokens dropped"))
        return DecodeResult(CompositeLabel(cls=cls, site=site), diags)

    raise DecodeError(f"cannot decode category {spec.category!r}")
