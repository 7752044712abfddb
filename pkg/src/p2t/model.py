"""Toy bidirectional encoder, fusion block, and task-prompted causal decoder.

The encoder embeds residues plus positions and runs pre-layernorm
bidirectional attention blocks.  Fusion adds a learnable positional table to
the encoder output and linearly projects it into the decoder width.  The
decoder is a standard pre-layernorm causal transformer with cross-attention
over the fused context; the token-weighted NLL loss masks the task-token
target with weight zero.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import TaskRegistry, Vocabulary

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWYX"
AA_PAD = 0
AA_INDEX = {c: i + 1 for i, c in enumerate(AMINO_ACIDS)}

CHECKPOINT_MAGIC = b"P2T1"
NEG_MASK = -1e30

PRESETS = {
    "toy-A": dict(d_enc=64, d_dec=64, ff_dec=128, heads=4, enc_layers=2, dec_layers=2),
    "toy-B": dict(d_enc=64, d_dec=64, ff_dec=128, heads=8, enc_layers=2, dec_layers=4),
    "toy-C": dict(d_enc=64, d_dec=64, ff_dec=256, heads=8, enc_layers=3, dec_layers=4),
    "toy-D": dict(d_enc=128, d_dec=128, ff_dec=512, heads=8, enc_layers=4, dec_layers=4),
}


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int
    d_dec: int
    ff_dec: int
    heads: int
    enc_layers: int
    dec_layers: int
    l_max: int
    vocab_size: int
    preset: str = "custom"

    def __post_init__(self):
        if self.d_dec % self.heads:
            raise ValueError("d_dec must be divisible by heads")
        if min(self.d_enc, self.d_dec, self.ff_dec, self.heads, self.enc_layers, self.dec_layers, self.l_max, self.vocab_size) < 1:
            raise ValueError("all config sizes must be >= 1")

    @property
    def dec_pos_rows(self) -> int:
        return self.l_max + 8

    @classmethod
    def preset_config(cls, name: str, l_max: int, vocab_size: int) -> "ModelConfig":
        return cls(l_max=l_max, vocab_size=vocab_size, preset=name, **PRESETS[name])


def sequence_to_ids(seq: str) -> np.ndarray:
    try:
        return np.array([AA_INDEX[c] for c in seq], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"unknown residue {e.args[0]!r}") from None


class ModelState:
    """All parameters, keyed by name.  Encoder names are prefixed 'enc.'."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, Tensor] = {}
        ff_enc = 2 * c.d_enc

        p["enc.tok_emb"] = ad.param((len(AMINO_ACIDS) + 1, c.d_enc), rng)
        p["enc.pos_emb"] = ad.param((c.l_max, c.d_enc), rng)
        for i in range(c.enc_layers):
            pre = f"enc.block{i}."
            self._attn_params(p, pre, c.d_enc, rng)
            self._ff_params(p, pre, c.d_enc, ff_enc, rng)
        p["enc.ln_f.g"] = Tensor(np.ones(c.d_enc), requires_grad=True)
        p["enc.ln_f.b"] = ad.zeros(c.d_enc)

        p["fuse.g_pos"] = ad.param((c.l_max, c.d_enc), rng)
        p["fuse.w_proj"] = ad.param((c.d_enc, c.d_dec), rng)

        p["dec.tok_emb"] = ad.param((c.vocab_size, c.d_dec), rng)
        p["dec.pos_emb"] = ad.param((c.dec_pos_rows, c.d_dec), rng)
        for i in range(c.dec_layers):
            pre = f"dec.block{i}."
            self._attn_params(p, pre + "self.", c.d_dec, rng)
            self._attn_params(p, pre + "cross.", c.d_dec, rng)
            self._ff_params(p, pre, c.d_dec, c.ff_dec, rng)
        p["dec.ln_f.g"] = Tensor(np.ones(c.d_dec), requires_grad=True)
        p["dec.ln_f.b"] = ad.zeros(c.d_dec)
        p["dec.out_w"] = ad.param((c.d_dec, c.vocab_size), rng)
        p["dec.out_b"] = ad.zeros(c.vocab_size)

        self.params = p

    @staticmethod
    def _attn_params(p, pre, d, rng):
        p[pre + "ln.g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ln.b"] = ad.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = ad.param((d, d), rng)

    @staticmethod
    def _ff_params(p, pre, d, ff, rng):
        p[pre + "ffln.g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ffln.b"] = ad.zeros(d)
        p[pre + "ff1"] = ad.param((d, ff), rng)
        p[pre + "ff1b"] = ad.zeros(ff)
        p[pre + "ff2"] = ad.param((ff, d), rng)
        p[pre + "ff2b"] = ad.zeros(d)

    # -- freezing -----------------------------------------------------------
    def set_encoder_trainable(self, trainable: bool | int):
        """False freezes all encoder params; an int unfreezes the last N blocks."""
        for name, t in self.params.items():
            if not name.startswith("enc."):
                continue
            if trainable is True:
                t.requires_grad = True
            elif trainable is False:
                t.requires_grad = False
            else:
                keep = [f"enc.block{i}." for i in range(self.config.enc_layers - trainable, self.config.enc_layers)]
                t.requires_grad = any(name.startswith(k) for k in keep) or name.startswith("enc.ln_f")
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def _mha(p, pre, x: Tensor, context: Tensor, heads: int, mask: np.ndarray | None) -> Tensor:
    """Multi-head attention of x over context (self-attn when identical)."""
    B, T, d = x.shape
    S = context.shape[1]
    dh = d // heads

    def split(t: Tensor, L):
        return ad.transpose(ad.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(ad.matmul(x, p[pre + "wq"]), T)
    k = split(ad.matmul(context, p[pre + "wk"]), S)
    v = split(ad.matmul(context, p[pre + "wv"]), S)
    att = ad.attention(q, k, v, mask)  # (B, H, T, dh)
    merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, d))
    return ad.matmul(merged, p[pre + "wo"])


def _ff(p, pre, x: Tensor) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, p[pre + "ff1"]), p[pre + "ff1b"]))
    return ad.add(ad.matmul(h, p[pre + "ff2"]), p[pre + "ff2b"])


def _block(p, pre, x: Tensor, heads: int, mask, cross_ctx: Tensor | None = None, cross_mask=None) -> Tensor:
    h = ad.layer_norm(x, p[pre + ("self.ln.g" if cross_ctx is not None else "ln.g")],
                      p[pre + ("self.ln.b" if cross_ctx is not None else "ln.b")])
    sub = pre + ("self." if cross_ctx is not None else "")
    x = ad.add(x, _mha(p, sub, h, h, heads, mask))
    if cross_ctx is not None:
        h = ad.layer_norm(x, p[pre + "cross.ln.g"], p[pre + "cross.ln.b"])
        x = ad.add(x, _mha(p, pre + "cross.", h, cross_ctx, heads, cross_mask))
    h = ad.layer_norm(x, p[pre + "ffln.g"], p[pre + "ffln.b"])
    return ad.add(x, _ff(p, pre, h))


def encode_batch(state: ModelState, enc_ids: np.ndarray, enc_pad: np.ndarray) -> Tensor:
    """enc_ids, enc_pad: (B, L); pad True marks padding.  Returns (B, L, d_enc)."""
    c = state.config
    B, L = enc_ids.shape
    if L > c.l_max:
        raise ValueError(f"sequence length {L} exceeds l_max {c.l_max}")
    p = state.params
    x = ad.add(ad.embedding(p["enc.tok_emb"], enc_ids),
               ad.embedding(p["enc.pos_emb"], np.broadcast_to(np.arange(L), (B, L))))
    key_mask = np.where(enc_pad, NEG_MASK, 0.0)[:, None, None, :]  # (B,1,1,L)
    for i in range(c.enc_layers):
        x = _block(p, f"enc.block{i}.", x, c.heads, key_mask)
    return ad.layer_norm(x, p["enc.ln_f.g"], p["enc.ln_f.b"])


def encode_protein(state: ModelState, seq: str, embeddings: np.ndarray | None = None) -> Tensor:
    """Single-sequence encoder output (L, d_enc); `embeddings` bypasses the encoder."""
    if embeddings is not None:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != state.config.d_enc:
            raise ValueError(f"imported embeddings must be (L, {state.config.d_enc})")
        return Tensor(emb)
    ids = sequence_to_ids(seq)[None, :]
    pad = np.zeros_like(ids, dtype=bool)
    return ad.reshape(encode_batch(state, ids, pad), (ids.shape[1], state.config.d_enc))


def fuse_batch(state: ModelState, h_enc: Tensor) -> Tensor:
    """(B, L, d_enc) -> (B, L, d_dec): add g_pos rows then project."""
    L = h_enc.shape[-2]
    rows = ad.embedding(state.params["fuse.g_pos"], np.arange(L))
    return ad.matmul(ad.add(h_enc, rows), state.params["fuse.w_proj"])


def fuse(state: ModelState, h_enc: Tensor) -> Tensor:
    """(L, d_enc) -> (L, d_dec)."""
    return fuse_batch(state, h_enc)


def decode_batch(state: ModelState, h_proj: Tensor, dec_ids: np.ndarray,
                 dec_pad: np.ndarray, enc_pad: np.ndarray) -> Tensor:
    """Causal decoder logits (B, T, vocab) over fused context (B, L, d_dec)."""
    c = state.config
    p = state.params
    B, T = dec_ids.shape
    if T > c.dec_pos_rows:
        raise ValueError(f"decoder length {T} exceeds positional table")
    x = ad.add(ad.embedding(p["dec.tok_emb"], dec_ids),
               ad.embedding(p["dec.pos_emb"], np.broadcast_to(np.arange(T), (B, T))))
    causal = np.triu(np.full((T, T), NEG_MASK), k=1)[None, None, :, :]
    self_mask = causal + np.where(dec_pad, NEG_MASK, 0.0)[:, None, None, :]
    cross_mask = np.where(enc_pad, NEG_MASK, 0.0)[:, None, None, :]
    for i in range(c.dec_layers):
        x = _block(p, f"dec.block{i}.", x, c.heads, self_mask, cross_ctx=h_proj, cross_mask=cross_mask)
    x = ad.layer_norm(x, p["dec.ln_f.g"], p["dec.ln_f.b"])
    return ad.add(ad.matmul(x, p["dec.out_w"]), p["dec.out_b"])


def decode_forward(state: ModelState, h_proj: Tensor, input_tokens) -> Tensor:
    """Single-sample logits (T, vocab)."""
    ids = np.asarray(list(input_tokens), dtype=np.int64)
    if ids.size and ids.max() >= state.config.vocab_size:
        raise ValueError(f"token id {int(ids.max())} >= vocab size {state.config.vocab_size}")
    if h_proj.data.ndim == 2:
        h_proj = ad.reshape(h_proj, (1,) + h_proj.shape)
    B, L = 1, h_proj.shape[1]
    logits = decode_batch(state, h_proj, ids[None, :],
                          np.zeros((1, ids.size), dtype=bool),
                          np.zeros((1, L), dtype=bool))
    return ad.reshape(logits, (ids.size, state.config.vocab_size))


def weighted_nll(logits: Tensor, targets, weights) -> Tensor:
    """Token-weighted negative log-likelihood; see autodiff.cross_entropy_weighted."""
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    if targets.shape != weights.shape:
        raise ValueError("targets and weights must have the same shape")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    return ad.cross_entropy_weighted(logits, targets, weights)


def model_loss(state: ModelState, enc_ids, enc_pad, dec_ids, dec_pad, targets, weights) -> Tensor:
    """End-to-end batched training loss (sum over weighted target positions)."""
    h_enc = encode_batch(state, enc_ids, enc_pad)
    h_proj = fuse_batch(state, h_enc)
    logits = decode_batch(state, h_proj, dec_ids, dec_pad, enc_pad)
    return weighted_nll(logits, targets, weights)


def sequence_log_likelihood(state: ModelState, seq: str, tokens: tuple[int, ...]) -> float:
    """log p(tokens[1:] | tokens[:-1], seq), summed over all target positions."""
    h_proj = fuse(state, encode_protein(state, seq))
    logits = decode_forward(state, h_proj, tokens[:-1]).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(logp[np.arange(len(tokens) - 1), list(tokens[1:])].sum())


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, state: ModelState, registry: TaskRegistry,
                    optim: dict | None = None, meta: dict | None = None) -> None:
    names = sorted(state.params)
    tensors: list[tuple[str, np.ndarray]] = [(n, state.params[n].data) for n in names]
    if optim:
        for key in ("m", "v"):
            for n in sorted(optim[key]):
                tensors.append((f"optim.{key}.{n}", optim[key][n]))
    header = {
        "config": asdict(state.config),
        "vocab": registry.vocabulary.entries,
        "registry": json.loads(registry.to_json()),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "optim_scalars": {k: optim[k] for k in ("step",)} if optim else None,
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in tensors:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (state, registry, optim | None, meta)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        config = ModelConfig(**header["config"])
        state = ModelState(config, seed=0)
        registry = TaskRegistry.from_json(json.dumps(header["registry"]))
        if registry.vocabulary.entries != header["vocab"]:
            raise ValueError("checkpoint vocabulary does not match its registry")
        optim = {"m": {}, "v": {}, "step": (header["optim_scalars"] or {}).get("step", 0)} if header["optim_scalars"] else None
        for entry in header["tensors"]:
            n, shape = entry["name"], tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
            if n.startswith("optim."):
                _, kind, pname = n.split(".", 2)
                optim[kind][pname] = arr
            else:
                if state.params[n].data.shape != shape:
                    raise ValueError(f"shape mismatch for {n}")
                state.params[n].data = arr
    return state, registry, optim, header["meta"]
