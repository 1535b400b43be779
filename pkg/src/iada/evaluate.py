"""BLEU on integer tokens, memorization accuracy, planted recovery, noisy-context protocol."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Corpus, CorpusRecord, _join
from .document import MASK, is_special


@dataclass
class EvalReport:
    s_bleu: float
    d_bleu: float
    mem_acc: float
    planted_recovery: float
    noisy_delta: dict[str, float] = field(default_factory=dict)
    truncated: int = 0

    def lines(self) -> list[str]:
        out = [f"{k}\t{getattr(self, k):.6g}" for k in ("s_bleu", "d_bleu", "mem_acc", "planted_recovery")]
        out.append(f"truncated\t{self.truncated}")
        out += [f"noisy_delta.{k}\t{v:.6g}" for k, v in self.noisy_delta.items()]
        return out

    def json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- BLEU ---------------------------------------------------------------------

def _ngram_counts(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hyps, refs, max_n: int = 4):
    """Clipped matches and totals per order, plus hypothesis/reference lengths."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    correct = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        if len(r) == 0:
            raise ValueError("empty reference")
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngram_counts(h, n), _ngram_counts(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    return correct, total, hyp_len, ref_len


def bleu(hyps, refs, max_n: int = 4, smoothing: str = "exp") -> float:
    """Corpus BLEU in [0, 100] over token-id sequences.

    ``exp`` smoothing replaces the i-th zero-match order's precision with
    ``1 / (2**i * total)``.  An order with no hypothesis n-grams at all makes
    the score 0, as does an empty hypothesis side.
    """
    correct, total, hyp_len, ref_len = bleu_stats(hyps, refs, max_n)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    mant = 1.0
    for c, t in zip(correct, total):
        if t == 0:
            return 0.0
        if c == 0:
            if smoothing != "exp":
                return 0.0
            mant *= 2.0
            log_p += math.log(1.0 / (mant * t))
        else:
            log_p += math.log(c / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def document_bleu(hyps, refs, doc_ids, max_n: int = 4) -> float:
    """BLEU over per-document concatenations (sentences in the given order)."""
    docs_h: dict[int, list[int]] = {}
    docs_r: dict[int, list[int]] = {}
    for h, r, d in zip(hyps, refs, doc_ids):
        docs_h.setdefault(d, []).extend(h)
        docs_r.setdefault(d, []).extend(r)
    keys = list(docs_h)
    return bleu([docs_h[k] for k in keys], [docs_r[k] for k in keys], max_n)


# -- translation-based metrics ------------------------------------------------

def mask_current_source(record: CorpusRecord, n: int) -> CorpusRecord:
    """Replace the first ``n`` current-source tokens by MASK."""
    if n <= 0:
        return record
    cur = tuple(MASK if i < n else t for i, t in enumerate(record.src_cur))
    return CorpusRecord(record.doc_id, record.sent_id, record.src_ctx, cur, record.tgt_ctx, record.tgt_cur,
                        record.corr_positions)


CONTEXTS = ("gold", "previous")


def translate_records(model, records, batch_size: int = 256, slack: int = 4, context: str = "gold"):
    """Greedy current-sentence translations.

    ``gold`` conditions on the reference target context.  ``previous`` walks
    each document in sentence order and swaps the most recent target context
    sentences for the model's own earlier outputs (reserved ids stripped);
    context sentences older than the first translated record stay as given.
    """
    if context == "previous":
        return _translate_with_previous(model, records, batch_size, slack)
    if context != "gold":
        raise ValueError(f"unknown context mode {context!r}; choose from {CONTEXTS}")
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        pairs = [r.pair for r in chunk]
        limit = max(p.tgt_cur_start + 2 * len(r.tgt_cur) + slack for p, r in zip(pairs, chunk))
        out.extend(model.greedy_translate_batch([p.src_tokens for p in pairs],
                                                [p.target_prefix() for p in pairs], limit))
    return out


def _translate_with_previous(model, records, batch_size: int, slack: int):
    order: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        order.setdefault(r.doc_id, []).append(i)
    for idx in order.values():
        idx.sort(key=lambda i: records[i].sent_id)
        sents = [records[i].sent_id for i in idx]
        if len(set(sents)) != len(sents):
            raise ValueError(f"document {records[idx[0]].doc_id} repeats a sentence id")
    out: list = [None] * len(records)
    history: dict[int, list[tuple[int, tuple[int, ...]]]] = {d: [] for d in order}
    for wave in range(max((len(v) for v in order.values()), default=0)):
        batch, rewritten = [], []
        for d, idx in order.items():
            if wave >= len(idx):
                continue
            r = records[idx[wave]]
            ctx = r.context_sentences("target")
            # only outputs of immediately preceding sentences stand in for context
            for sid, hyp in history[d]:
                if r.sent_id - sid <= len(ctx):
                    ctx[len(ctx) - (r.sent_id - sid)] = list(hyp)
            batch.append(idx[wave])
            rewritten.append(CorpusRecord(r.doc_id, r.sent_id, r.src_ctx, r.src_cur, _join(ctx), r.tgt_cur,
                                          r.corr_positions))
        for i, t in zip(batch, translate_records(model, rewritten, batch_size, slack)):
            out[i] = t
            r = records[i]
            history[r.doc_id].append((r.sent_id, tuple(x for x in t.tokens if not is_special(x))))
    return out


def score_translations(records, translations) -> EvalReport:
    hyps = [t.tokens for t in translations]
    refs = [r.tgt_cur for r in records]
    exact = [h == tuple(r) for h, r in zip(hyps, refs)]
    planted_hit = planted_total = 0
    for h, r in zip(hyps, records):
        k = len(r.corr_positions)
        planted_total += k
        planted_hit += sum(1 for i in range(k) if i < len(h) and h[i] == r.tgt_cur[i])
    return EvalReport(
        s_bleu=bleu(hyps, refs),
        d_bleu=document_bleu(hyps, refs, [r.doc_id for r in records]),
        mem_acc=float(np.mean(exact)) if exact else 0.0,
        planted_recovery=planted_hit / planted_total if planted_total else 0.0,
        truncated=sum(t.truncated for t in translations),
    )


def evaluate(model, corpus: Corpus, mask_source: int = 0, context: str = "gold") -> EvalReport:
    records = [mask_current_source(r, mask_source) for r in corpus.records]
    return score_translations(records, translate_records(model, records, context=context))


def memorization_eval(model, train_corpus: Corpus, mask_source: int = 0) -> tuple[float, float]:
    """``(mem_acc, planted_recovery)`` on training records fed back with gold context."""
    rep = evaluate(model, train_corpus, mask_source)
    return rep.mem_acc, rep.planted_recovery


# -- noisy context ------------------------------------------------------------

def noisy_corpus(corpus: Corpus, rng: np.random.Generator, n_replace: int = 2) -> Corpus:
    """Swap ``n_replace`` context sentences of each record (both sides) for sentences of other documents.

    Donor sentence pairs are drawn uniformly from the context windows of
    records in other documents and must have matching lengths.
    """
    docs = {r.doc_id for r in corpus.records}
    if len(docs) < 2:
        raise ValueError("noisy-context evaluation needs at least two documents")
    pool: dict[tuple[int, int], list[tuple[int, tuple, tuple]]] = {}
    for r in corpus.records:
        for s, t in zip(r.context_sentences("source"), r.context_sentences("target")):
            pool.setdefault((len(s), len(t)), []).append((r.doc_id, tuple(s), tuple(t)))
    out = []
    for r in corpus.records:
        src_s, tgt_s = r.context_sentences("source"), r.context_sentences("target")
        if len(src_s) < n_replace:
            raise ValueError(f"record {r.doc_id}/{r.sent_id} has only {len(src_s)} context sentences")
        picks = sorted(rng.choice(len(src_s), size=n_replace, replace=False).tolist())
        for j in picks:
            cands = [c for c in pool.get((len(src_s[j]), len(tgt_s[j])), []) if c[0] != r.doc_id]
            if not cands:
                raise ValueError(f"no same-length donor sentence for record {r.doc_id}/{r.sent_id}")
            _, s, t = cands[int(rng.integers(len(cands)))]
            src_s[j], tgt_s[j] = list(s), list(t)
        out.append(CorpusRecord(r.doc_id, r.sent_id, _join(src_s), r.src_cur, _join(tgt_s), r.tgt_cur,
                                r.corr_positions))
    return Corpus(out)


def noisy_context_eval(model, corpus: Corpus, rng: np.random.Generator, mask_source: int = 0,
                       context: str = "gold") -> EvalReport:
    """Gold-context report with ``noisy_delta`` = gold minus noisy for every metric."""
    gold = evaluate(model, corpus, mask_source, context)
    noisy = evaluate(model, noisy_corpus(corpus, rng), mask_source, context)
    gold.noisy_delta = {k: getattr(gold, k) - getattr(noisy, k)
                        for k in ("s_bleu", "d_bleu", "mem_acc", "planted_recovery")}
    return gold
