"""Command-line front end: corpus synthesis, training, evaluation, decoding,
embedding interpretation, and the codec conformance tool."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import __version__, interpret, model as m, report, synth, train
from .codec import decode_label, encode_label
from .infer import DecodeOptions, evaluate_task, greedy_decode
from .vocab import TaskRegistry, TaskSpec

VALID_AA = set(synth.ALPHABET)


class CliError(Exception):
    pass


@dataclass
class FastaRecord:
    header: str
    sequence: str


def parse_fasta(data: bytes):
    """Returns (records, replaced_char_count). Unknown residues become X."""
    text = data.decode("utf-8", errors="replace").replace("\r\n", "\n")
    records: list[FastaRecord] = []
    header = None
    chunks: list[str] = []
    warnings = 0

    def close():
        nonlocal warnings
        if header is None:
            return
        seq = "".join(chunks).upper()
        cleaned = []
        for c in seq:
            if c in VALID_AA:
                cleaned.append(c)
            else:
                cleaned.append("X")
                warnings += 1
        if not cleaned:
            raise CliError(f"FASTA record {header!r} has an empty sequence")
        records.append(FastaRecord(header=header, sequence="".join(cleaned)))

    for line in text.split("\n"):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            close()
            header = line[1:].strip()
            if not header:
                raise CliError("FASTA header is empty")
            chunks = []
        else:
            if header is None:
                raise CliError("sequence data before the first FASTA header")
            chunks.append(line)
    close()
    if not records:
        raise CliError("no FASTA records found")
    return records, warnings


def serialize_fasta(records) -> bytes:
    out = []
    for r in records:
        out.append(f">{r.header}")
        seq = r.sequence
        out.extend(seq[i : i + 60] for i in range(0, len(seq), 60))
    return ("\n".join(out) + "\n").encode()


def parse_samples_jsonl(data: bytes, registry: TaskRegistry, strict: bool = True):
    return synth.samples_from_jsonl(data.decode(), registry, strict=strict)


# ---------------------------------------------------------------------------
# artifact plumbing

def atomic_write(path: str, data):
    """Write-temp-rename so readers never see a partial file."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out_dir: str, command: str, config: dict, seed):
    config = {k: v for k, v in config.items() if k != "func"}
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "versions": {
            "p2t": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    }
    atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    return manifest


def _registry_for_kinds(kinds, l_max: int) -> TaskRegistry:
    registry = TaskRegistry(l_max=l_max)
    seen = set()
    for kind in kinds:
        for spec in (synth.toy_task_spec(kind) if kind in synth.TOY_KINDS else [_steer_spec(kind)]):
            if spec.name not in seen:
                registry.register_task(spec)
                seen.add(spec.name)
    return registry


def _steer_spec(kind: str) -> TaskSpec:
    if kind in ("steer_a", "steer_b"):
        return TaskSpec(name=kind, category="classification", label_alphabet=("hi", "lo"))
    raise CliError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    if args.kind not in synth.TOY_KINDS:
        raise CliError(f"unknown kind {args.kind!r}; choose from {', '.join(synth.TOY_KINDS)}")
    samples = synth.make_toy_corpus(args.kind, args.count, l_range=(args.min_len, args.max_len), seed=args.seed)
    atomic_write(args.out, synth.samples_to_jsonl(samples))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_manifest(out_dir, "synth", vars(args), args.seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    with open(args.config) as f:
        cfg = json.load(f)
    out_dir = cfg.get("out_dir", args.out_dir or "run")
    os.makedirs(out_dir, exist_ok=True)
    l_max = int(cfg.get("l_max", 64))
    kinds = [t["kind"] for t in cfg["tasks"]]
    registry = _registry_for_kinds(kinds, l_max)
    corpus = []
    for t in cfg["tasks"]:
        path = t["corpus"]
        if not os.path.exists(path):
            raise CliError(f"corpus path {path!r} does not exist")
        with open(path, "rb") as f:
            samples, errors = parse_samples_jsonl(f.read(), registry, strict=False)
        if errors:
            line_no, msg = errors[0]
            raise CliError(f"{path}:{line_no}: {msg} ({len(errors)} bad lines)")
        corpus.extend(samples)

    seed = int(cfg.get("seed", 0))
    config = m.ModelConfig.preset_config(cfg.get("preset", "toy-A"), l_max, len(registry.vocabulary))
    state = m.ModelState(config, seed=seed)
    plan = train.BatchPlan(token_budget=int(cfg.get("token_budget", 4096)), seed=seed)
    opt = train.OptimState(lr_peak=float(cfg.get("lr_peak", train.DEFAULTS["lr_peak"])),
                           warmup_steps=int(cfg.get("warmup_steps", train.DEFAULTS["warmup_steps"])))
    rep = train.fit(state, registry, corpus, plan, epochs=int(cfg.get("epochs", 5)),
                    freeze_encoder=cfg.get("freeze_encoder", False), opt=opt)

    ckpt = os.path.join(out_dir, "model.p2t")
    m.save_checkpoint(ckpt, state, registry, meta={"seed": seed, "epochs": len(rep.epoch_losses)})
    atomic_write(os.path.join(out_dir, "train_metrics.csv"), rep.metrics_csv())
    report.loss_curve(rep.epoch_losses, os.path.join(out_dir, "loss_curve.png"))
    write_manifest(out_dir, "train", cfg, seed)
    print(f"trained {len(rep.epoch_losses)} epochs; final loss {rep.epoch_losses[-1]:.4f}; checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    state, registry, _, _ = m.load_checkpoint(args.ckpt)
    with open(args.corpus, "rb") as f:
        samples, errors = parse_samples_jsonl(f.read(), registry, strict=False)
    samples = [s for s in samples if s.task == args.task]
    if not samples:
        raise CliError(f"no samples for task {args.task!r} in {args.corpus}")
    rep = evaluate_task(state, registry, samples, args.task, max_new_tokens=args.max_new_tokens)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "metric", "value"])
    for name in sorted(rep.metrics):
        w.writerow([args.task, name, f"{rep.metrics[name]:.10f}"])
    w.writerow([args.task, "unparseable", rep.unparseable])
    atomic_write(os.path.join(out_dir, "metrics.csv"), buf.getvalue())
    atomic_write(os.path.join(out_dir, "metrics.json"),
                 json.dumps({"task": args.task, "metrics": rep.metrics,
                             "counts": rep.counts, "unparseable": rep.unparseable}, indent=2) + "\n")
    finite = {k: v for k, v in rep.metrics.items() if np.isfinite(v) and 0 <= v <= 1}
    if finite:
        report.metric_bars(finite, os.path.join(out_dir, "metrics.png"))
    write_manifest(out_dir, "eval", vars(args), None)
    for name in sorted(rep.metrics):
        print(f"{args.task}\t{name}\t{rep.metrics[name]:.6f}")
    return 0


def cmd_decode(args) -> int:
    state, registry, _, _ = m.load_checkpoint(args.ckpt)
    spec = registry.task(args.task)
    seq = synth.validate_sequence(args.seq, l_max=registry.l_max)
    opts = DecodeOptions(
        max_new_tokens=args.max_new_tokens,
        eos_constraint="exact_input_length" if spec.category == "seq2seq" else "none",
        task=spec,
    )
    out = greedy_decode(state, seq, opts)
    result = decode_label(spec, registry.vocabulary, out.sequence, strict=False)
    print(json.dumps({"task": args.task, "sequence": seq,
                      "tokens": registry.vocabulary.strings(out.sequence.tokens),
                      "label": synth._label_to_json(result.label),
                      "diagnostics": [d.message for d in result.diagnostics]}))
    return 0


def _read_embeddings_csv(path: str) -> interpret.EmbeddingMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise CliError(f"{path}: empty embeddings CSV")
    start = 1 if rows and not _is_float(rows[0][1]) else 0
    names, data = [], []
    for r in rows[start:]:
        if not r:
            continue
        names.append(r[0])
        data.append([float(v) for v in r[1:]])
    return interpret.EmbeddingMatrix(tuple(names), np.array(data))


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_feature_csv(path: str) -> interpret.FeatureTable:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    items, data = [], []
    for r in rows[1:]:
        if not r:
            continue
        items.append(r[0])
        data.append([float(v) for v in r[1:]])
    return interpret.FeatureTable(tuple(items), tuple(header[1:]), np.array(data))


def ligand_feature_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "ligand_features.csv")


def cmd_interpret(args) -> int:
    emb = _read_embeddings_csv(args.embeddings)
    table = read_feature_csv(args.features or ligand_feature_path())
    if set(table.items) != set(emb.names):
        keep = [i for i, name in enumerate(table.items) if name in set(emb.names)]
        if len(keep) < 2:
            raise CliError("feature table and embeddings share fewer than 2 items")
        order = {n: i for i, n in enumerate(emb.names)}
        keep.sort(key=lambda i: order[table.items[i]])
        table = interpret.FeatureTable(tuple(table.items[i] for i in keep), table.features, table.values[keep])
        emb = interpret.EmbeddingMatrix(table.items, np.array([emb.rows[order[n]] for n in table.items]))
    elif table.items != emb.names:
        order = {n: i for i, n in enumerate(table.items)}
        emb = interpret.EmbeddingMatrix(table.items, np.array([emb.rows[i] for i in sorted(range(len(emb.names)), key=lambda i: order[emb.names[i]])]))

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    reduced, n_comp, _ = interpret.pca_reduce(emb, args.variance_target)
    ks = list(range(args.k_min, min(args.k_max, len(emb.names)) + 1))
    k = interpret.elbow_k(reduced, ks, seed=args.seed)
    inertias = [interpret.kmeans(reduced, kk, seed=args.seed).inertia for kk in ks]
    target = interpret.kmeans(reduced, k, seed=args.seed)
    search = interpret.feature_search(table, target, max_features=args.max_features, k=k,
                                     seed=args.seed, keep_log=args.top_n)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item", "cluster"])
    for name, c in zip(emb.names, target.assignments):
        w.writerow([name, int(c)])
    atomic_write(os.path.join(out_dir, "clusters.csv"), buf.getvalue())

    atomic_write(os.path.join(out_dir, "metrics.json"), json.dumps({
        "pca_components": n_comp, "k": k,
        "best_features": list(search.best_features),
        "ari": search.best_ari, "nmi": search.nmi, "pairwise_accuracy": search.pairwise,
        "combinations_scored": search.combinations_scored,
    }, indent=2) + "\n")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "ari", "features"])
    for rank, (names, a) in enumerate(search.log, 1):
        w.writerow([rank, f"{a:.10f}", ";".join(names)])
    atomic_write(os.path.join(out_dir, "top_combinations.csv"), buf.getvalue())

    report.elbow_curve(ks, inertias, k, os.path.join(out_dir, "elbow.png"))
    report.cluster_scatter(reduced, target.assignments, emb.names, os.path.join(out_dir, "clusters.png"))
    write_manifest(out_dir, "interpret", vars(args), args.seed)
    print(f"k={k} components={n_comp} best_ari={search.best_ari:.4f} features={','.join(search.best_features)}")
    return 0


def golden_corpus_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "golden_codec.jsonl")


def replay_golden(path: str):
    """Re-encode every golden line and compare token strings. Returns failures."""
    failures = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            registry = TaskRegistry(l_max=doc.get("l_max", 64))
            spec = registry.register_task(TaskSpec(
                name=doc["task"], category=doc["category"],
                label_alphabet=tuple(doc.get("alphabet") or ()),
                regression_range=tuple(doc["range"]) if doc.get("range") else None,
                flat=doc.get("flat", False)))
            label = synth.label_from_json(doc["category"], doc["label"])
            ts = encode_label(spec, registry.vocabulary, label)
            got = registry.vocabulary.strings(ts.tokens)
            if got != doc["tokens"]:
                failures.append((line_no, doc["tokens"], got))
                continue
            back = decode_label(spec, registry.vocabulary, ts).label
            if back != label:
                failures.append((line_no, doc["tokens"], f"round-trip mismatch: {back}"))
    return failures


def cmd_codec(args) -> int:
    path = args.golden or golden_corpus_path()
    failures = replay_golden(path)
    total = sum(1 for line in open(path) if line.strip())
    if failures:
        for line_no, want, got in failures:
            print(f"{path}:{line_no}: want {want} got {got}", file=sys.stderr)
        return 1
    print(f"{total} golden examples verified")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="p2t", description="sequence-to-label toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a toy corpus")
    s.add_argument("--kind", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-len", type=int, default=6)
    s.add_argument("--max-len", type=int, default=12)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a run-config JSON")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--max-new-tokens", type=int, default=64)
    s.add_argument("--out-dir", default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decode", help="decode one sequence to a label")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--max-new-tokens", type=int, default=64)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("interpret", help="cluster embeddings and search feature subsets")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--features", default=None, help="feature CSV; defaults to the shipped ligand table")
    s.add_argument("--variance-target", type=float, default=0.99)
    s.add_argument("--k-min", type=int, default=2)
    s.add_argument("--k-max", type=int, default=10)
    s.add_argument("--max-features", type=int, default=5)
    s.add_argument("--top-n", type=int, default=20)
    s.add_argument("--threads", type=int, default=0, help="numba thread count; 0 = library default")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="interpret")
    s.set_defaults(func=cmd_interpret)

    s = sub.add_parser("codec", help="replay the golden tokenization corpus")
    s.add_argument("--golden", default=None)
    s.set_defaults(func=cmd_codec)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "threads", 0):
        import numba

        numba.set_num_threads(args.threads)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
