"""Post-layer-norm encoder-decoder transformer over context+current sequences.

Besides logits, every forward pass exposes two taps:

* the residual-added output of the topmost feed-forward sublayer *before* its
  layer normalization (encoder and decoder), and
* the embedding outputs (token embedding plus sinusoidal position), the
  tensors whose gradients are read for gradient-norm importance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .document import BOS, EOS, PAD, pad_batch
from .tensor import Graph, Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 205
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 128
    max_len: int = 256
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 6:
            raise ValueError(f"vocab_size={self.vocab_size} leaves no content ids (need >= 6)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate={self.dropout_rate} outside [0, 1)")
        for name in ("d_model", "n_heads", "n_layers", "d_ffn", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class EncoderOutput:
    states: Tensor      # H_X after the top layer's final layer norm
    hidden: Tensor      # pre-layer-norm tap of the top feed-forward sublayer
    embed: Tensor       # embedding outputs
    pad: np.ndarray     # (B, Ls) bool


@dataclass
class ForwardTrace:
    enc_hidden: Tensor
    dec_hidden: Tensor
    logits: Tensor
    src_embed: Tensor
    tgt_embed: Tensor
    graph: Graph
    params: dict[str, Tensor]


@dataclass
class Translation:
    tokens: tuple[int, ...]
    truncated: bool


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.d_ffn
    params: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        params[f"{name}.w"] = rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), (n_in, n_out))
        params[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        params[f"{name}.g"] = np.ones(d)
        params[f"{name}.b"] = np.zeros(d)

    params["embed"] = rng.normal(0.0, d ** -0.5, (cfg.vocab_size, d))
    for l in range(cfg.n_layers):
        p = f"enc.{l}"
        dense(f"{p}.self.qkv", d, 3 * d)
        dense(f"{p}.self.out", d, d)
        norm(f"{p}.ln1")
        dense(f"{p}.ffn.1", d, f)
        dense(f"{p}.ffn.2", f, d)
        norm(f"{p}.ln2")
    for l in range(cfg.n_layers):
        p = f"dec.{l}"
        dense(f"{p}.self.qkv", d, 3 * d)
        dense(f"{p}.self.out", d, d)
        norm(f"{p}.ln1")
        dense(f"{p}.cross.q", d, d)
        dense(f"{p}.cross.kv", d, 2 * d)
        dense(f"{p}.cross.out", d, d)
        norm(f"{p}.ln2")
        dense(f"{p}.ffn.1", d, f)
        dense(f"{p}.ffn.2", f, d)
        norm(f"{p}.ln3")
    dense("proj", d, cfg.vocab_size)
    return params


def as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"token batch must be 1-D or 2-D, got shape {arr.shape}")
    return arr


class Doc2DocTransformer:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        self._pe = sinusoid_table(cfg.max_len, cfg.d_model)

    # -- plumbing ---------------------------------------------------------

    def bind(self, graph: Graph) -> dict[str, Tensor]:
        return {k: graph.leaf(v, k) for k, v in self.params.items()}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def _check(self, tokens: np.ndarray, what: str):
        if tokens.shape[1] > self.cfg.max_len:
            raise ValueError(f"{what} length {tokens.shape[1]} exceeds max_len {self.cfg.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ValueError(f"{what} ids must lie in [0, {self.cfg.vocab_size})")

    def _embed(self, P, tokens: np.ndarray) -> Tensor:
        e = T.scale(T.embedding(P["embed"], tokens), math.sqrt(self.cfg.d_model))
        return T.add(e, self._pe[: tokens.shape[1]])

    def _dense(self, P, name, x):
        return T.add(T.matmul(x, P[f"{name}.w"]), P[f"{name}.b"])

    def _norm(self, P, name, x):
        return T.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])

    def _heads(self, x: Tensor, n: int) -> Tensor:
        # (B, L, n*d) -> (n, B, h, L, dk)
        B, L, _ = x.shape
        h = self.cfg.n_heads
        dk = self.cfg.d_model // h
        return T.transpose(T.reshape(x, (B, L, n, h, dk)), (2, 0, 3, 1, 4))

    def _attend(self, q, k, v, mask, rng):
        # q: (B,h,Lq,dk), k/v: (B,h,Lk,dk), mask: additive (B,1,Lq,Lk)
        dk = q.shape[-1]
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        att = T.dropout(T.softmax(T.add(scores, mask), axis=-1), self.cfg.dropout_rate, rng)
        ctx = T.matmul(att, v)
        B, h, Lq, _ = ctx.shape
        return T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Lq, h * dk))

    def _split(self, x: Tensor, n: int, i: int) -> Tensor:
        part = T.slice_rows(x, i, i + 1)
        return T.reshape(part, part.shape[1:])

    def _self_attention(self, P, name, x, mask, rng):
        qkv = self._heads(self._dense(P, f"{name}.qkv", x), 3)
        q, k, v = (self._split(qkv, 3, i) for i in range(3))
        return self._dense(P, f"{name}.out", self._attend(q, k, v, mask, rng))

    def _cross_attention(self, P, name, x, mem, mask, rng):
        q = self._split(self._heads(self._dense(P, f"{name}.q", x), 1), 1, 0)
        kv = self._heads(self._dense(P, f"{name}.kv", mem), 2)
        k, v = self._split(kv, 2, 0), self._split(kv, 2, 1)
        return self._dense(P, f"{name}.out", self._attend(q, k, v, mask, rng))

    def _ffn(self, P, name, x, rng):
        hidden = T.dropout(T.relu(self._dense(P, f"{name}.1", x)), self.cfg.dropout_rate, rng)
        return self._dense(P, f"{name}.2", hidden)

    # -- passes -----------------------------------------------------------

    def encode(self, src, graph: Graph | None = None, P=None, rng=None) -> EncoderOutput:
        """Encode ``src``; returns the top states, the pre-norm tap and the embeddings."""
        src = as_batch(src)
        self._check(src, "source")
        graph = graph if graph is not None else Graph()
        P = P if P is not None else self.bind(graph)
        pad = src == PAD
        mask = np.where(pad[:, None, None, :], NEG_INF, 0.0)
        embed = self._embed(P, src)
        x = T.dropout(embed, self.cfg.dropout_rate, rng)
        hidden = x
        for l in range(self.cfg.n_layers):
            p = f"enc.{l}"
            a = T.dropout(self._self_attention(P, f"{p}.self", x, mask, rng), self.cfg.dropout_rate, rng)
            x = self._norm(P, f"{p}.ln1", T.add(x, a))
            f = T.dropout(self._ffn(P, f"{p}.ffn", x, rng), self.cfg.dropout_rate, rng)
            hidden = T.add(x, f)
            x = self._norm(P, f"{p}.ln2", hidden)
        return EncoderOutput(x, hidden, embed, pad)

    def decode(self, tgt, enc: EncoderOutput, graph: Graph | None = None, P=None, rng=None):
        """Causal decoder pass; returns ``(pre-norm tap, logits, embeddings)``."""
        tgt = as_batch(tgt)
        self._check(tgt, "target")
        graph = graph if graph is not None else enc.states.graph
        P = P if P is not None else self.bind(graph)
        Lt = tgt.shape[1]
        causal = np.triu(np.ones((Lt, Lt), dtype=bool), k=1)
        self_mask = np.where(causal[None, None] | (tgt == PAD)[:, None, None, :], NEG_INF, 0.0)
        cross_mask = np.where(enc.pad[:, None, None, :], NEG_INF, 0.0)
        embed = self._embed(P, tgt)
        x = T.dropout(embed, self.cfg.dropout_rate, rng)
        hidden = x
        for l in range(self.cfg.n_layers):
            p = f"dec.{l}"
            a = T.dropout(self._self_attention(P, f"{p}.self", x, self_mask, rng), self.cfg.dropout_rate, rng)
            x = self._norm(P, f"{p}.ln1", T.add(x, a))
            c = T.dropout(self._cross_attention(P, f"{p}.cross", x, enc.states, cross_mask, rng),
                          self.cfg.dropout_rate, rng)
            x = self._norm(P, f"{p}.ln2", T.add(x, c))
            f = T.dropout(self._ffn(P, f"{p}.ffn", x, rng), self.cfg.dropout_rate, rng)
            hidden = T.add(x, f)
            x = self._norm(P, f"{p}.ln3", hidden)
        logits = self._dense(P, "proj", x)
        return hidden, logits, embed

    def forward(self, src, tgt_in, graph: Graph | None = None, rng=None, P=None) -> ForwardTrace:
        """Full teacher-forced pass recorded on one graph.

        Pass ``P`` (from :meth:`bind`) to share parameter leaves between passes
        on the same graph, so their gradients accumulate on one node each.
        """
        graph = graph if graph is not None else Graph()
        P = P if P is not None else self.bind(graph)
        enc = self.encode(src, graph, P, rng)
        dec_hidden, logits, tgt_embed = self.decode(tgt_in, enc, graph, P, rng)
        return ForwardTrace(enc.hidden, dec_hidden, logits, enc.embed, tgt_embed, graph, P)

    # -- inference --------------------------------------------------------

    def greedy_translate(self, src_tokens, tgt_context_prefix, max_len: int | None = None) -> Translation:
        return self.greedy_translate_batch([src_tokens], [tgt_context_prefix], max_len)[0]

    def greedy_translate_batch(self, srcs, prefixes, max_len: int | None = None) -> list[Translation]:
        """Extend each target prefix greedily until EOS; return only the new tokens.

        A prefix without BOS gets one prepended.  Generation stops at EOS or
        when the target reaches ``max_len`` positions (flagged as truncated).
        """
        limit = min(max_len or self.cfg.max_len, self.cfg.max_len)
        src = pad_batch(srcs)
        enc = self.encode(src)
        seqs = [list(p) if len(p) and p[0] == BOS else [BOS, *p] for p in prefixes]
        starts = [len(s) for s in seqs]
        done = [False] * len(seqs)
        truncated = [False] * len(seqs)
        while True:
            for i, s in enumerate(seqs):
                if not done[i] and len(s) >= limit:
                    done[i] = truncated[i] = True
            active = [i for i, d in enumerate(done) if not d]
            if not active:
                break
            # right padding is invisible to earlier positions under the causal mask
            graph = Graph()
            P = self.bind(graph)
            mem = EncoderOutput(graph.leaf(enc.states.data[active]), enc.hidden, enc.embed, enc.pad[active])
            _, logits, _ = self.decode(pad_batch([seqs[i] for i in active]), mem, graph, P)
            last = np.array([len(seqs[i]) - 1 for i in active])
            nxt = logits.data[np.arange(len(active)), last].argmax(axis=-1)
            for i, tok in zip(active, nxt):
                seqs[i].append(int(tok))
                if tok == EOS:
                    done[i] = True
        out = []
        for s, start, trunc in zip(seqs, starts, truncated):
            gen = s[start:]
            if gen and gen[-1] == EOS:
                gen = gen[:-1]
            out.append(Translation(tuple(gen), trunc))
        return out

