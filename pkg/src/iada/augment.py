"""Bernoulli perturbation of document pairs: masks, replacement strategies, pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .document import FIRST_CONTENT_ID, MASK, DocumentPair, is_special
from .importance import DIRECTIONS, ImportanceTrace, score_pairs, side_trace

STRATEGIES = ("drop", "replace")
AUG_MEASURES = ("tnorm", "gnorm", "random", "uniform")


@dataclass(frozen=True)
class AugmentConfig:
    measure: str = "gnorm"
    strategy: str = "replace"
    direction: str = "ctx-down-cur-up"
    p_ctx: float = 0.1
    p_cur: float = 0.1
    alpha: float = 0.1
    normalize: bool = True
    # replacement probability of the uniform baselines
    p: float = 0.1

    def __post_init__(self):
        if self.measure not in AUG_MEASURES:
            raise ValueError(f"measure must be one of {AUG_MEASURES}, got {self.measure!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}, got {self.direction!r}")
        if self.measure == "uniform":
            if not 0.0 <= self.p < 1.0:
                raise ValueError(f"p={self.p} must lie in [0, 1)")
        else:
            for name in ("p_ctx", "p_cur"):
                v = getattr(self, name)
                if not 0.0 < v < 1.0:
                    raise ValueError(f"{name}={v} must lie strictly in (0, 1)")
            if self.alpha <= 0:
                raise ValueError(f"alpha={self.alpha} must be positive")


@dataclass
class PerturbedView:
    pair: DocumentPair
    mask_src: np.ndarray
    mask_tgt: np.ndarray
    strategy: str
    seed_state: dict = field(default_factory=dict)
    traces: tuple[ImportanceTrace, ImportanceTrace] | None = None


def pair_rng(seed: int, epoch: int, pair: DocumentPair) -> np.random.Generator:
    """Independent stream per (seed, epoch, document, sentence)."""
    return np.random.default_rng([seed, epoch, pair.doc_id, pair.sent_id])


def sample_mask(probs, rng: np.random.Generator) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size and (probs.min() < 0.0 or probs.max() >= 1.0):
        raise ValueError("mask probabilities must lie in [0, 1)")
    return (rng.random(probs.shape) < probs).astype(np.int8)


def apply_strategy(tokens, mask, strategy: str, rng: np.random.Generator, vocab_size: int) -> np.ndarray:
    """Replace masked positions: MASK for ``drop``, a different content id for ``replace``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != tokens.shape:
        raise ValueError(f"mask shape {mask.shape} does not match tokens {tokens.shape}")
    out = tokens.copy()
    if not mask.any():
        return out
    if strategy == "drop":
        out[mask] = MASK
        return out
    if strategy != "replace":
        raise ValueError(f"unknown strategy {strategy!r}")
    if vocab_size - FIRST_CONTENT_ID < 2:
        raise ValueError("replace needs at least two content ids")
    idx = np.flatnonzero(mask)
    draws = rng.integers(FIRST_CONTENT_ID, vocab_size, size=idx.size)
    clash = draws == tokens[idx]
    while clash.any():
        draws[clash] = rng.integers(FIRST_CONTENT_ID, vocab_size, size=int(clash.sum()))
        clash = draws == tokens[idx]
    out[idx] = draws
    return out


def uniform_probs(tokens, p: float) -> np.ndarray:
    """Fixed probability ``p`` on every perturbable token (WordDrop/WordRepl)."""
    return np.where(is_special(tokens), 0.0, p)


def importance_traces(pair: DocumentPair, scores, cfg: AugmentConfig) -> tuple[ImportanceTrace, ImportanceTrace]:
    phi_src, phi_tgt = scores
    return tuple(
        side_trace(side, toks, start, phi, cfg.measure, cfg.alpha, cfg.p_ctx, cfg.p_cur,
                   cfg.direction, cfg.normalize)
        for side, toks, start, phi in (
            ("source", pair.src_tokens, pair.src_cur_start, phi_src),
            ("target", pair.tgt_tokens, pair.tgt_cur_start, phi_tgt),
        )
    )


def perturb_with_scores(pair: DocumentPair, scores, cfg: AugmentConfig,
                        rng: np.random.Generator, vocab_size: int) -> PerturbedView:
    """Normalize -> probabilities -> masks -> strategy, on both sides at once."""
    if cfg.measure == "uniform":
        traces = None
        p_src, p_tgt = uniform_probs(pair.src_tokens, cfg.p), uniform_probs(pair.tgt_tokens, cfg.p)
    else:
        traces = importance_traces(pair, scores, cfg)
        p_src, p_tgt = traces[0].probs, traces[1].probs
    m_src = sample_mask(p_src, rng)
    m_tgt = sample_mask(p_tgt, rng)
    src = apply_strategy(pair.src_tokens, m_src, cfg.strategy, rng, vocab_size)
    tgt = apply_strategy(pair.tgt_tokens, m_tgt, cfg.strategy, rng, vocab_size)
    return PerturbedView(pair.with_tokens(src, tgt), m_src, m_tgt, cfg.strategy,
                         {"doc_id": pair.doc_id, "sent_id": pair.sent_id}, traces)


def perturb_batch(model, pairs, cfg: AugmentConfig, rngs, scores=None) -> list[PerturbedView]:
    """Score (unless ``scores`` is given) and perturb every pair with its own rng."""
    if cfg.measure == "uniform":
        scores = [None] * len(pairs)
    elif scores is None:
        if cfg.measure == "random":
            scores = [score_pairs(model, [p], "random", r, cfg.alpha)[0] for p, r in zip(pairs, rngs)]
        else:
            scores = score_pairs(model, pairs, cfg.measure)
    return [perturb_with_scores(p, s, cfg, r, model.cfg.vocab_size) for p, s, r in zip(pairs, scores, rngs)]


def perturb_document(model, pair: DocumentPair, cfg: AugmentConfig, rng: np.random.Generator) -> PerturbedView:
    return perturb_batch(model, [pair], cfg, [rng])[0]
