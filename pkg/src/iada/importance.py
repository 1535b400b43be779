"""Token importance: raw scores, per-document normalization, replacement probabilities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from . import tensor as T
from .document import DocumentPair, is_special
from .model import Doc2DocTransformer, ForwardTrace

MEASURES = ("tnorm", "gnorm", "random")

# sign applied to psi in the context / current segment
DIRECTIONS = {
    "ctx-down-cur-up": (-1.0, 1.0),
    "ctx-up-cur-down": (1.0, -1.0),
    "both-down": (-1.0, -1.0),
    "both-up": (1.0, 1.0),
}


@dataclass
class ImportanceTrace:
    side: str
    raw: np.ndarray
    normalized: np.ndarray
    probs: np.ndarray
    measure: str
    alpha: float
    p_ctx: float
    p_cur: float


def tnorm(trace: ForwardTrace, side: str) -> np.ndarray:
    """L2 norm of the pre-layer-norm top feed-forward tap, one score per position.

    Returns a ``(batch, positions)`` array over the encoder (``source``) or
    decoder-input (``target``) positions of ``trace``.
    """
    if side == "source":
        h = trace.enc_hidden.data
    elif side == "target":
        h = trace.dec_hidden.data
    else:
        raise ValueError(f"unknown side {side!r}")
    return np.sqrt((h * h).sum(axis=-1))


def gnorm_from_graph(trace: ForwardTrace, root: T.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Gradient norms at the embedding outputs for a loss already on ``trace.graph``.

    Only embedding gradients are computed; no parameter gradient is produced.
    """
    g = trace.graph
    g.backward(root, wrt=[trace.src_embed, trace.tgt_embed])
    gs, gt = g.grad(trace.src_embed), g.grad(trace.tgt_embed)
    return np.sqrt((gs * gs).sum(axis=-1)), np.sqrt((gt * gt).sum(axis=-1))


def gnorm(model: Doc2DocTransformer, pairs, reduction: str = "mean") -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-token gradient-norm scores for each pair (source, target).

    The root is the original-view NLL over current-sentence target tokens.
    Target scores are read at decoder-input positions; the final token, which
    is never fed to the decoder, scores 0.
    """
    from .objective import nll_tensor, teacher_forcing

    if isinstance(pairs, DocumentPair):
        pairs = [pairs]
    src, tgt_in, labels, cur = teacher_forcing(pairs)
    trace = model.forward(src, tgt_in)
    root = nll_tensor(trace.logits, labels, cur, reduction)
    phi_src, phi_tgt = gnorm_from_graph(trace, root)
    return split_scores(pairs, phi_src, phi_tgt)


def split_scores(pairs, phi_src: np.ndarray, phi_tgt: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut batched scores back to per-pair vectors aligned with the token sequences."""
    out = []
    for i, p in enumerate(pairs):
        ls, lt = len(p.src_tokens), len(p.tgt_tokens)
        t = np.zeros(lt)
        t[: lt - 1] = phi_tgt[i, : lt - 1]
        out.append((phi_src[i, :ls].copy(), t))
    return out


def normalize(raw, alpha: float) -> np.ndarray:
    """``alpha * (raw - mean) / std`` with the population std; zeros when std is 0.

    The z-score is evaluated in exact rational arithmetic and only the final
    square root is rounded, so shifting or positively scaling ``raw`` leaves
    the result bit-identical whenever the transformed input is exact.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("normalize needs at least one score")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("normalize needs finite scores")
    n = raw.size
    # exact integers on a common power-of-two denominator
    ratios = [x.as_integer_ratio() for x in raw.tolist()]
    den = max(d for _, d in ratios)
    ints = [num * (den // d) for num, d in ratios]
    total = sum(ints)
    # n * (x - mean) stays integral
    dev = [n * x - total for x in ints]
    sq = sum(d * d for d in dev)
    if sq == 0:
        return np.zeros(n)
    # z^2 = (x - mean)^2 / var = n * dev^2 / sum(dev^2)
    z = np.array([(1.0 if d > 0 else -1.0) * _sqrt_ratio(n * d * d, sq) if d else 0.0 for d in dev])
    return alpha * z


def _sqrt_ratio(p: int, q: int) -> float:
    """Square root of ``p / q`` rounded once to float; depends only on the reduced ratio."""
    g = math.gcd(p, q)
    p, q = p // g, q // g
    k = max(0, 64 - (p.bit_length() - q.bit_length()) // 2)
    return math.isqrt((p << (2 * k)) // q) / (1 << k)


def replacement_probs(psi, cur_start: int, p_ctx: float, p_cur: float,
                      tokens=None, direction: str = "ctx-down-cur-up") -> np.ndarray:
    """Shift the base probabilities in logit space by the signed importance.

    Positions ``< cur_start`` are context, the rest the current sentence.  When
    ``tokens`` is given, PAD/BOS/EOS/SEP positions are forced to 0.
    """
    for name, p in (("p_ctx", p_ctx), ("p_cur", p_cur)):
        if not 0.0 < p < 1.0:
            raise ValueError(f"{name}={p} must lie strictly in (0, 1)")
    try:
        s_ctx, s_cur = DIRECTIONS[direction]
    except KeyError:
        raise ValueError(f"unknown direction {direction!r}; choose from {sorted(DIRECTIONS)}") from None
    psi = np.asarray(psi, dtype=np.float64)
    ctx = np.arange(psi.size) < cur_start
    shifted = np.where(ctx, logit(p_ctx) + s_ctx * psi, logit(p_cur) + s_cur * psi)
    # expit(logit(p)) can be an ulp off p; psi == 0 returns the base probability itself
    probs = np.where(psi == 0.0, np.where(ctx, p_ctx, p_cur), expit(shifted))
    if tokens is not None:
        probs = np.where(is_special(tokens), 0.0, probs)
    return probs


def random_scores(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return rng.normal(0.0, alpha, size=n)


def side_trace(side: str, tokens, cur_start: int, raw, measure: str, alpha: float,
               p_ctx: float, p_cur: float, direction: str = "ctx-down-cur-up",
               normalized: bool = True) -> ImportanceTrace:
    """Normalize ``raw`` over the perturbable tokens of one side and map to probabilities.

    Reserved tokens are left out of the mean/std pool and get psi = 0, p = 0.
    With ``normalized=False`` the raw scores enter the logit shift directly.
    """
    tokens = np.asarray(tokens)
    raw = np.asarray(raw, dtype=np.float64)
    words = ~is_special(tokens)
    psi = np.zeros_like(raw)
    if words.any():
        if measure == "random":
            psi[words] = raw[words]
        elif normalized:
            psi[words] = normalize(raw[words], alpha)
        else:
            psi[words] = raw[words]
    probs = replacement_probs(psi, cur_start, p_ctx, p_cur, tokens, direction)
    return ImportanceTrace(side, raw, psi, probs, measure, alpha, p_ctx, p_cur)


def score_pairs(model: Doc2DocTransformer, pairs, measure: str,
                rng: np.random.Generator | None = None, alpha: float = 0.1):
    """Raw per-token scores ``(phi_src, phi_tgt)`` for each pair under ``measure``."""
    if measure == "gnorm":
        return gnorm(model, pairs)
    if measure == "tnorm":
        from .objective import teacher_forcing

        src, tgt_in, _, _ = teacher_forcing(pairs)
        trace = model.forward(src, tgt_in)
        return split_scores(pairs, tnorm(trace, "source"), tnorm(trace, "target"))
    if measure == "random":
        if rng is None:
            raise ValueError("random measure needs an rng")
        return [(random_scores(len(p.src_tokens), alpha, rng), random_scores(len(p.tgt_tokens), alpha, rng))
                for p in pairs]
    raise ValueError(f"unknown measure {measure!r}; choose from {MEASURES}")


def format_dump(pair: DocumentPair, traces: tuple[ImportanceTrace, ImportanceTrace]) -> list[str]:
    """One ``doc_id side position token phi psi p`` line per token (tab separated)."""
    lines = []
    for tr, toks in zip(traces, (pair.src_tokens, pair.tgt_tokens)):
        for t, tok in enumerate(toks):
            lines.append(
                f"{pair.doc_id}\t{tr.side}\t{t}\t{tok}\t{tr.raw[t]:.6g}\t{tr.normalized[t]:.6g}\t{tr.probs[t]:.6g}"
            )
    return lines


__all__ = [
    "DIRECTIONS",
    "ImportanceTrace",
    "MEASURES",
    "format_dump",
    "gnorm",
    "gnorm_from_graph",
    "normalize",
    "random_scores",
    "replacement_probs",
    "score_pairs",
    "side_trace",
    "split_scores",
    "tnorm",
]
