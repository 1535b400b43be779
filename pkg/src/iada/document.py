"""Token layout shared by every module: reserved ids and document pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PAD, BOS, EOS, SEP, MASK = 0, 1, 2, 3, 4
FIRST_CONTENT_ID = 5
RESERVED_IDS = (PAD, BOS, EOS, SEP, MASK)


def is_content(tokens) -> np.ndarray:
    return np.asarray(tokens) >= FIRST_CONTENT_ID


def is_special(tokens) -> np.ndarray:
    """PAD/BOS/EOS/SEP positions; these are never perturbed."""
    t = np.asarray(tokens)
    return (t == PAD) | (t == BOS) | (t == EOS) | (t == SEP)


@dataclass(frozen=True)
class DocumentPair:
    """A source/target document pair split into context and current sentence.

    ``tokens[:cur_start]`` is the context (BOS, context sentences and their
    separators), ``tokens[cur_start:]`` is the current sentence followed by EOS.
    """

    src_tokens: tuple[int, ...]
    src_cur_start: int
    tgt_tokens: tuple[int, ...]
    tgt_cur_start: int
    doc_id: int = 0
    sent_id: int = 0

    def __post_init__(self):
        for side, toks, start in (("src", self.src_tokens, self.src_cur_start),
                                  ("tgt", self.tgt_tokens, self.tgt_cur_start)):
            if not 0 <= start <= len(toks):
                raise ValueError(f"{side}_cur_start={start} outside [0, {len(toks)}]")

    @property
    def src(self) -> np.ndarray:
        return np.asarray(self.src_tokens, dtype=np.int64)

    @property
    def tgt(self) -> np.ndarray:
        return np.asarray(self.tgt_tokens, dtype=np.int64)

    def side(self, name: str) -> tuple[np.ndarray, int]:
        if name == "source":
            return self.src, self.src_cur_start
        if name == "target":
            return self.tgt, self.tgt_cur_start
        raise ValueError(f"unknown side {name!r}")

    def with_tokens(self, src=None, tgt=None) -> "DocumentPair":
        return DocumentPair(
            tuple(int(t) for t in (self.src_tokens if src is None else src)),
            self.src_cur_start,
            tuple(int(t) for t in (self.tgt_tokens if tgt is None else tgt)),
            self.tgt_cur_start,
            self.doc_id,
            self.sent_id,
        )

    def target_prefix(self) -> tuple[int, ...]:
        """Decoder prefix up to (excluding) the first current-sentence token."""
        return self.tgt_tokens[: self.tgt_cur_start]

    def current_source(self) -> tuple[int, ...]:
        return self.src_tokens[self.src_cur_start:-1]

    def current_target(self) -> tuple[int, ...]:
        return self.tgt_tokens[self.tgt_cur_start:-1]


def layout(context: Sequence[Sequence[int]], current: Sequence[int]) -> tuple[tuple[int, ...], int]:
    """``[BOS, c1, SEP, c2, SEP, ..., SEP, current, EOS]`` and the current start."""
    seq = [BOS]
    for sent in context:
        seq.extend(int(t) for t in sent)
        seq.append(SEP)
    start = len(seq)
    seq.extend(int(t) for t in current)
    seq.append(EOS)
    return tuple(seq), start


def make_pair(src_context, src_current, tgt_context, tgt_current, doc_id=0, sent_id=0) -> DocumentPair:
    src, s0 = layout(src_context, src_current)
    tgt, t0 = layout(tgt_context, tgt_current)
    return DocumentPair(src, s0, tgt, t0, doc_id, sent_id)


def split_context(tokens: Sequence[int], cur_start: int) -> list[list[int]]:
    """Recover the context sentences from ``tokens[:cur_start]``."""
    body = list(tokens[1:cur_start])
    sents, cur = [], []
    for t in body:
        if t == SEP:
            sents.append(cur)
            cur = []
        else:
            cur.append(int(t))
    if cur:
        sents.append(cur)
    return sents


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
