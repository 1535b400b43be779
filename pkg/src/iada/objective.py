"""Three-term training objective: original NLL, perturbed NLL, agreement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .document import DocumentPair, pad_batch
from .model import Doc2DocTransformer, ForwardTrace
from .tensor import Graph, Tensor


@dataclass(frozen=True)
class LossConfig:
    original: bool = True
    perturb: bool = True
    agreement: bool = True
    perturb_targets: str = "original"
    reduction: str = "mean"

    def __post_init__(self):
        if self.perturb_targets not in ("original", "perturbed"):
            raise ValueError(f"perturb_targets must be 'original' or 'perturbed', got {self.perturb_targets!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if not (self.original or self.perturb or self.agreement):
            raise ValueError("at least one loss term must stay enabled")


@dataclass
class LossBreakdown:
    nll_original: float
    nll_perturbed: float
    agreement: float
    total: float
    token_count: int

    @property
    def empty(self) -> bool:
        return self.token_count == 0

    def log_line(self, step: int) -> str:
        return (f"{step}\t{self.nll_original:.6g}\t{self.nll_perturbed:.6g}"
                f"\t{self.agreement:.6g}\t{self.total:.6g}")


def teacher_forcing(pairs):
    """Batch arrays ``(src, decoder input, labels, current-label mask)``.

    Label ``j`` is ``tgt[j + 1]``; it belongs to the loss when that token lies
    in the current sentence (its EOS included).
    """
    if isinstance(pairs, DocumentPair):
        pairs = [pairs]
    src = pad_batch([p.src_tokens for p in pairs])
    tgt = pad_batch([p.tgt_tokens for p in pairs])
    tgt_in, labels = tgt[:, :-1], tgt[:, 1:]
    pos = np.arange(labels.shape[1])[None, :] + 1
    starts = np.array([p.tgt_cur_start for p in pairs])[:, None]
    ends = np.array([len(p.tgt_tokens) for p in pairs])[:, None]
    cur = (pos >= starts) & (pos < ends)
    return src, tgt_in, labels, cur


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Graph().leaf(x)


def nll_tensor(logits, labels, cur_mask, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood over the masked positions (mean or sum)."""
    logits = _as_tensor(logits)
    cur_mask = np.asarray(cur_mask, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1] or cur_mask.shape != labels.shape:
        raise T.ShapeError(f"nll: logits {logits.shape}, labels {labels.shape}, mask {cur_mask.shape}")
    count = int(cur_mask.sum())
    weights = -cur_mask.astype(np.float64)
    if reduction == "mean" and count:
        weights /= count
    picked = T.pick(T.log_softmax(logits, axis=-1), np.where(cur_mask, labels, 0))
    return T.sum_all(picked, weights)


def nll(logits, targets, cur_mask, reduction: str = "mean") -> float:
    return float(nll_tensor(logits, targets, cur_mask, reduction).data)


def agreement_tensor(logits_a, logits_b, cur_mask, reduction: str = "mean") -> Tensor:
    """Symmetrized KL ``(KL(P||Q) + KL(Q||P)) / 2`` per masked position.

    Written as ``0.5 * sum((P - Q) * (log P - log Q))`` with ``P = exp(log P)``
    so each summand is a product of two same-signed factors.
    """
    if isinstance(logits_a, Tensor) and isinstance(logits_b, Tensor):
        a, b = logits_a, logits_b
    elif not isinstance(logits_a, Tensor) and not isinstance(logits_b, Tensor):
        g = Graph()
        a, b = g.leaf(logits_a), g.leaf(logits_b)
    else:
        raise ValueError("agreement: pass both logits as Tensors or both as arrays")
    if a.shape != b.shape:
        raise T.ShapeError(f"agreement: logits shapes {a.shape} and {b.shape} differ")
    cur_mask = np.asarray(cur_mask, dtype=bool)
    if cur_mask.shape != a.shape[:-1]:
        raise T.ShapeError(f"agreement: mask {cur_mask.shape} vs logits {a.shape}")
    la, lb = T.log_softmax(a, axis=-1), T.log_softmax(b, axis=-1)
    diff = T.mul(T.sub(T.exp(la), T.exp(lb)), T.sub(la, lb))
    count = int(cur_mask.sum())
    w = 0.5 * cur_mask.astype(np.float64)
    if reduction == "mean" and count:
        w /= count
    return T.sum_all(diff, np.broadcast_to(w[..., None], a.shape))


def agreement(logits_a, logits_b, cur_mask, reduction: str = "mean") -> float:
    return float(agreement_tensor(logits_a, logits_b, cur_mask, reduction).data)


def total_loss(model: Doc2DocTransformer, pairs, views, cfg: LossConfig = LossConfig(),
               graph: Graph | None = None, rng=None, original: ForwardTrace | None = None, P=None):
    """Compose the enabled loss terms on one graph.

    Returns ``(LossBreakdown, root, bound parameters)``.  ``original`` lets a caller reuse a
    forward pass of the unperturbed batch that already lives on ``graph``.
    """
    if isinstance(pairs, DocumentPair):
        pairs = [pairs]
    if not isinstance(views, (list, tuple)):
        views = [views]
    vpairs = [v.pair if hasattr(v, "pair") else v for v in views]
    for p, v in zip(pairs, vpairs):
        if (p.src_cur_start, p.tgt_cur_start, len(p.src_tokens), len(p.tgt_tokens)) != \
           (v.src_cur_start, v.tgt_cur_start, len(v.src_tokens), len(v.tgt_tokens)):
            raise ValueError(f"view of doc {p.doc_id} sent {p.sent_id} changes the segmentation")
    src, tgt_in, labels, cur = teacher_forcing(pairs)
    if original is not None:
        graph, P = original.graph, original.params
    else:
        graph = graph if graph is not None else Graph()
        P = P if P is not None else model.bind(graph)
    need_orig = cfg.original or cfg.agreement
    need_pert = cfg.perturb or cfg.agreement
    orig = original
    if need_orig and orig is None:
        orig = model.forward(src, tgt_in, graph, rng, P)
    pert = None
    if need_pert:
        psrc, ptgt_in, plabels, _ = teacher_forcing(vpairs)
        pert = model.forward(psrc, ptgt_in, graph, rng, P)
        if cfg.perturb_targets == "original":
            plabels = labels

    terms: list[Tensor] = []
    values = {"nll_original": 0.0, "nll_perturbed": 0.0, "agreement": 0.0}
    if cfg.original:
        t = nll_tensor(orig.logits, labels, cur, cfg.reduction)
        terms.append(t)
        values["nll_original"] = float(t.data)
    if cfg.perturb:
        t = nll_tensor(pert.logits, plabels, cur, cfg.reduction)
        terms.append(t)
        values["nll_perturbed"] = float(t.data)
    if cfg.agreement:
        t = agreement_tensor(orig.logits, pert.logits, cur, cfg.reduction)
        terms.append(t)
        values["agreement"] = float(t.data)
    root = terms[0]
    for t in terms[1:]:
        root = T.add(root, t)
    breakdown = LossBreakdown(total=float(root.data), token_count=int(cur.sum()), **values)
    return breakdown, root, P
