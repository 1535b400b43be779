"""Synthetic document-translation corpus: random-number mappings with planted context.

Every document opens with ``ctx_window`` lead-in sentence pairs followed by
``sents_per_doc`` record sentences.  A record's context is the previous
``ctx_window`` sentences of its document.  One context source sentence holds
a ``corr_len`` sub-sequence at a random offset; the current target begins
with that sub-sequence mapped through ``corr_rule``, and the current source
begins with the sub-sequence itself.  Every other token is i.i.d. uniform
over the content ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .document import FIRST_CONTENT_ID, SEP, DocumentPair, make_pair

HEADER = "iada-corpus v1"
FIELDS = ("doc_id", "sent_id", "src_ctx", "src_cur", "tgt_ctx", "tgt_cur", "corr_positions")
AFFINE_A, AFFINE_B = 7, 13


class CorpusFormatError(ValueError):
    def __init__(self, path, line: int, field_name: str, detail: str):
        super().__init__(f"{path}:{line}: field {field_name!r}: {detail}")
        self.line = line
        self.field_name = field_name


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_content: int = 200
    n_docs: int = 50
    sents_per_doc: int = 5
    cur_len: int = 8
    ctx_sent_len: int = 8
    ctx_window: int = 3
    corr_len: int = 4
    seed: int = 0
    corr_rule: str = "copy"
    n_valid_docs: int = 5
    n_test_docs: int = 5

    def __post_init__(self):
        if self.corr_rule not in ("copy", "affine"):
            raise ValueError(f"corr_rule must be 'copy' or 'affine', got {self.corr_rule!r}")
        if not 1 <= self.corr_len <= self.ctx_sent_len:
            raise ValueError(f"corr_len={self.corr_len} must lie in [1, ctx_sent_len={self.ctx_sent_len}]")
        if self.corr_len > self.cur_len:
            raise ValueError(f"corr_len={self.corr_len} exceeds cur_len={self.cur_len}")
        if self.ctx_window < 1:
            raise ValueError(f"ctx_window={self.ctx_window} must be >= 1")
        if self.vocab_content < 10 * self.cur_len:
            raise ValueError(f"vocab_content={self.vocab_content} below 10*cur_len={10 * self.cur_len}")
        if self.sents_per_doc > 1 and self.cur_len != self.ctx_sent_len:
            raise ValueError("cur_len must equal ctx_sent_len when records serve as later context")
        for name in ("n_docs", "sents_per_doc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.corr_rule == "affine" and math.gcd(AFFINE_A, self.vocab_content) != 1:
            raise ValueError(f"affine map needs vocab_content coprime to {AFFINE_A}")

    @property
    def vocab_size(self) -> int:
        return self.vocab_content + FIRST_CONTENT_ID


@dataclass(frozen=True)
class CorpusRecord:
    doc_id: int
    sent_id: int
    src_ctx: tuple[int, ...]
    src_cur: tuple[int, ...]
    tgt_ctx: tuple[int, ...]
    tgt_cur: tuple[int, ...]
    corr_positions: tuple[int, ...] = ()

    @property
    def pair(self) -> DocumentPair:
        return make_pair(_sentences(self.src_ctx), self.src_cur, _sentences(self.tgt_ctx), self.tgt_cur,
                         self.doc_id, self.sent_id)

    def context_sentences(self, side: str) -> list[list[int]]:
        return _sentences(self.src_ctx if side == "source" else self.tgt_ctx)


@dataclass
class Corpus:
    records: list[CorpusRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def pairs(self) -> list[DocumentPair]:
        return [r.pair for r in self.records]


def record_from_pair(pair: DocumentPair, corr_positions=()) -> CorpusRecord:
    """Inverse of :attr:`CorpusRecord.pair` (context flattened with SEP separators)."""
    def ctx(tokens, start):
        return tuple(tokens[1:start - 1]) if start > 1 else ()

    return CorpusRecord(pair.doc_id, pair.sent_id, ctx(pair.src_tokens, pair.src_cur_start), pair.current_source(),
                        ctx(pair.tgt_tokens, pair.tgt_cur_start), pair.current_target(), tuple(corr_positions))


def _sentences(flat) -> list[list[int]]:
    if not flat:
        return []
    out, cur = [], []
    for t in flat:
        if t == SEP:
            out.append(cur)
            cur = []
        else:
            cur.append(int(t))
    out.append(cur)
    return out


def _join(sents) -> tuple[int, ...]:
    flat: list[int] = []
    for i, s in enumerate(sents):
        if i:
            flat.append(SEP)
        flat.extend(int(t) for t in s)
    return tuple(flat)


def apply_rule(tokens, rule: str, vocab_content: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if rule == "copy":
        return tokens.copy()
    if rule == "affine":
        return (AFFINE_A * tokens + AFFINE_B) % vocab_content + FIRST_CONTENT_ID
    raise ValueError(f"unknown corr_rule {rule!r}")


def _document(cfg: GeneratorConfig, doc_id: int, rng: np.random.Generator) -> list[CorpusRecord]:
    def rand(n):
        return rng.integers(FIRST_CONTENT_ID, cfg.vocab_size, size=n)

    src_sents = [rand(cfg.ctx_sent_len) for _ in range(cfg.ctx_window)]
    tgt_sents = [rand(cfg.ctx_sent_len) for _ in range(cfg.ctx_window)]
    records = []
    k = cfg.corr_len
    for sent_id in range(cfg.sents_per_doc):
        ctx_src = src_sents[-cfg.ctx_window:]
        ctx_tgt = tgt_sents[-cfg.ctx_window:]
        j = int(rng.integers(cfg.ctx_window))
        off = int(rng.integers(cfg.ctx_sent_len - k + 1))
        planted = ctx_src[j][off:off + k]
        x, y = rand(cfg.cur_len), rand(cfg.cur_len)
        x[:k] = planted
        y[:k] = apply_rule(planted, cfg.corr_rule, cfg.vocab_content)
        base = j * (cfg.ctx_sent_len + 1) + off
        records.append(CorpusRecord(
            doc_id, sent_id, _join(ctx_src), tuple(int(t) for t in x), _join(ctx_tgt),
            tuple(int(t) for t in y), tuple(range(base, base + k)),
        ))
        src_sents.append(x)
        tgt_sents.append(y)
    return records


def generate(cfg: GeneratorConfig) -> dict[str, Corpus]:
    """Deterministic ``train``/``valid``/``test`` splits; documents never straddle splits."""
    splits = {}
    start = 0
    for offset, (name, n) in enumerate((("train", cfg.n_docs), ("valid", cfg.n_valid_docs),
                                        ("test", cfg.n_test_docs))):
        rng = np.random.default_rng([cfg.seed, offset])
        recs = []
        for d in range(n):
            recs.extend(_document(cfg, start + d, rng))
        splits[name] = Corpus(recs)
        start += n
    return splits


def planted_oracle(record: CorpusRecord, rule: str = "copy", vocab_content: int = 200) -> tuple[int, ...]:
    """The current-target prefix implied by the planted context positions."""
    sub = [record.src_ctx[c] for c in record.corr_positions]
    return tuple(int(t) for t in apply_rule(sub, rule, vocab_content))


# -- file format --------------------------------------------------------------

def _ids(seq) -> str:
    return " ".join(str(int(t)) for t in seq)


def format_record(r: CorpusRecord) -> str:
    return "\t".join((str(r.doc_id), str(r.sent_id), _ids(r.src_ctx), _ids(r.src_cur), _ids(r.tgt_ctx),
                      _ids(r.tgt_cur), ",".join(str(c) for c in r.corr_positions)))


def write(corpus: Corpus, path) -> None:
    lines = [HEADER] + [format_record(r) for r in corpus.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_ids(path, lineno, name, text, sep=" ") -> tuple[int, ...]:
    if text == "":
        return ()
    try:
        vals = tuple(int(t) for t in text.split(sep))
    except ValueError:
        raise CorpusFormatError(path, lineno, name, f"not a {sep!r}-separated integer list: {text!r}") from None
    if any(v < 0 for v in vals):
        raise CorpusFormatError(path, lineno, name, "negative id")
    return vals


def read(path) -> Corpus:
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        raise CorpusFormatError(path, 1, "header", "empty file")
    lines = text.split("\n")
    if lines[0] != HEADER:
        raise CorpusFormatError(path, 1, "header", f"expected {HEADER!r}, got {lines[0]!r}")
    if not text.endswith("\n"):
        raise CorpusFormatError(path, len(lines), FIELDS[0], "truncated final line (no newline)")
    records = []
    for lineno, line in enumerate(lines[1:-1], start=2):
        parts = line.split("\t")
        if len(parts) != len(FIELDS):
            missing = FIELDS[len(parts)] if len(parts) < len(FIELDS) else "extra"
            raise CorpusFormatError(path, lineno, missing, f"expected {len(FIELDS)} fields, got {len(parts)}")
        try:
            doc_id, sent_id = int(parts[0]), None
        except ValueError:
            raise CorpusFormatError(path, lineno, "doc_id", f"not an integer: {parts[0]!r}") from None
        try:
            sent_id = int(parts[1])
        except ValueError:
            raise CorpusFormatError(path, lineno, "sent_id", f"not an integer: {parts[1]!r}") from None
        vals = [_parse_ids(path, lineno, FIELDS[i], parts[i]) for i in range(2, 6)]
        corr = _parse_ids(path, lineno, "corr_positions", parts[6], sep=",")
        if any(c >= len(vals[0]) for c in corr):
            raise CorpusFormatError(path, lineno, "corr_positions", "index beyond src_ctx")
        records.append(CorpusRecord(doc_id, sent_id, *vals, corr))
    return Corpus(records)


def checksum(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
