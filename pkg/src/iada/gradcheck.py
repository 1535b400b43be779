"""Central finite-difference check of the autodiff gradients on a small model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, pair_rng, perturb_with_scores
from .document import make_pair
from .model import Doc2DocTransformer, ModelConfig
from .objective import LossConfig, total_loss
from .tensor import Graph


@dataclass
class Probe:
    where: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), REL_FLOOR)


# gradients below this magnitude are compared absolutely
REL_FLOOR = 1e-6


class _OffsetModel(Doc2DocTransformer):
    """Records embedding outputs in call order and can add a constant offset to one of them."""

    def reset(self, offsets=None):
        self.calls: list[T.Tensor] = []
        self.offsets: dict[int, np.ndarray] = offsets or {}

    def _embed(self, P, tokens):
        e = super()._embed(P, tokens)
        off = self.offsets.get(len(self.calls))
        if off is not None:
            e = T.add(e, off)
        self.calls.append(e)
        return e


def _toy_batch(rng: np.random.Generator, vocab: int, n: int = 2):
    pairs = []
    for i in range(n):
        ctx = [rng.integers(5, vocab, size=3).tolist() for _ in range(2)]
        tctx = [rng.integers(5, vocab, size=3).tolist() for _ in range(2)]
        pairs.append(make_pair(ctx, rng.integers(5, vocab, size=4).tolist(), tctx,
                               rng.integers(5, vocab, size=3 + i).tolist(), doc_id=i))
    return pairs


def run(seed: int = 0, probes: int = 100, step: float = 1e-5, d_model: int = 16, n_layers: int = 1,
        vocab: int = 23) -> list[Probe]:
    """Compare autodiff and ``(f(x+h) - f(x-h)) / 2h`` on random parameter and embedding-output entries.

    The loss is the full three-term objective on a fixed Replace view, so the
    check covers both forward passes and the agreement term.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=vocab, d_model=d_model, n_heads=2, n_layers=n_layers, d_ffn=2 * d_model,
                      max_len=32, seed=seed)
    model = _OffsetModel(cfg)
    pairs = _toy_batch(rng, vocab)
    aug = AugmentConfig(measure="uniform", strategy="replace", p=0.3)
    views = [perturb_with_scores(p, None, aug, pair_rng(seed, 0, p), vocab) for p in pairs]
    loss_cfg = LossConfig()

    def loss_value(offsets=None) -> float:
        model.reset(offsets)
        return total_loss(model, pairs, views, loss_cfg)[0].total

    graph = Graph()
    model.reset()
    _, root, P = total_loss(model, pairs, views, loss_cfg, graph)
    # original view: source then target embeddings come first
    embeds = model.calls[:2]
    graph.backward(root)
    grads = {k: graph.grad(t) for k, t in P.items()}
    embed_grads = [graph.grad(t) for t in embeds]

    names = sorted(grads)
    out = []
    for i in range(probes):
        if i % 4 == 3:
            side = int(rng.integers(2))
            g = embed_grads[side]
            idx = tuple(int(rng.integers(s)) for s in g.shape)
            off = np.zeros(g.shape)
            off[idx] = step
            up = loss_value({side: off})
            off[idx] = -step
            down = loss_value({side: off})
            out.append(Probe("embed." + ("source" if side == 0 else "target"), idx, float(g[idx]),
                             (up - down) / (2 * step)))
        else:
            name = names[int(rng.integers(len(names)))]
            idx = tuple(int(rng.integers(s)) for s in model.params[name].shape)
            arr = model.params[name]
            keep = arr[idx]
            arr[idx] = keep + step
            up = loss_value()
            arr[idx] = keep - step
            down = loss_value()
            arr[idx] = keep
            out.append(Probe(name, idx, float(grads[name][idx]), (up - down) / (2 * step)))
    return out


def passed(probes: list[Probe], tol: float = 1e-4) -> bool:
    return all(p.rel_error <= tol for p in probes)
