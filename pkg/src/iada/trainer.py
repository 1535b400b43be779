"""Training loop: Adam with inverse-sqrt warmup, online perturbation, early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, pair_rng, perturb_with_scores
from .document import DocumentPair
from .importance import gnorm_from_graph, score_pairs, split_scores, tnorm
from .model import Doc2DocTransformer, ModelConfig
from .objective import LossBreakdown, LossConfig, nll_tensor, teacher_forcing, total_loss
from .tensor import Graph

log = logging.getLogger(__name__)

CKPT_HEADER = "iada-ckpt v1"


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    beta1: float = 0.9
    beta2: float = 0.98
    lr: float = 3e-3
    warmup: int = 200
    adam_eps: float = 1e-9
    batch_tokens: int = 2048
    max_epochs: int = 100
    max_steps: int = 0
    patience: int = 10
    # "none" trains plain Doc2Doc on the original loss only
    measure: str = "none"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    score_refresh: str = "step"
    seed: int = 0

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} must lie in (0, 1)")
        if self.warmup < 1:
            raise ValueError(f"warmup={self.warmup} must be >= 1")
        if self.patience < 1:
            raise ValueError(f"patience={self.patience} must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr={self.lr} must be positive")
        if self.batch_tokens < 1:
            raise ValueError(f"batch_tokens={self.batch_tokens} must be positive")
        if self.score_refresh not in ("step", "epoch"):
            raise ValueError(f"score_refresh must be 'step' or 'epoch', got {self.score_refresh!r}")
        if self.measure not in ("none", "tnorm", "gnorm", "random", "uniform"):
            raise ValueError(f"unknown measure {self.measure!r}")
        if self.measure != "none" and self.augment.measure != self.measure:
            raise ValueError(f"measure={self.measure!r} disagrees with augment.measure={self.augment.measure!r}")

    @property
    def augmenting(self) -> bool:
        return self.measure != "none"


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``step == warmup``, then ``peak * sqrt(warmup / step)``."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> bool:
    """Bias-corrected Adam update in place; returns False (and changes nothing) on a non-finite gradient."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise T.ShapeError(f"adam: grad {k} has shape {g.shape}, param {params[k].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; step %d rejected", k, state.t + 1)
            return False
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# -- batching -----------------------------------------------------------------

def make_batches(pairs: list[DocumentPair], batch_tokens: int, seed: int, epoch: int) -> list[list[int]]:
    """Shard a (seed, epoch)-shuffled order of the sorted pairs into token-budget batches.

    A batch costs ``rows * longest sequence``; a single over-budget pair still
    forms its own batch.
    """
    order = sorted(range(len(pairs)), key=lambda i: (pairs[i].doc_id, pairs[i].sent_id))
    perm = np.random.default_rng([seed, epoch, 7]).permutation(len(order))
    order = [order[i] for i in perm]
    batches, cur, longest = [], [], 0
    for i in order:
        n = max(len(pairs[i].src_tokens), len(pairs[i].tgt_tokens))
        if cur and (len(cur) + 1) * max(longest, n) > batch_tokens:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    return batches


# -- checkpoints --------------------------------------------------------------

def _fmt(arr: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(arr, dtype=np.float64).ravel().tolist())


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    lines = [CKPT_HEADER]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"{name}\t{','.join(str(d) for d in arr.shape)}\t{_fmt(arr)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines[0] != CKPT_HEADER:
        raise CheckpointError(f"{path}:1: expected header {CKPT_HEADER!r}, got {lines[0]!r}")
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        name, shape_s, vals = parts
        try:
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            data = np.array([float(v) for v in vals.split()] if vals else [], dtype=np.float64)
        except ValueError:
            raise CheckpointError(f"{path}:{lineno}: malformed shape or values for {name}") from None
        if data.size != math.prod(shape):
            raise CheckpointError(f"{path}:{lineno}: {name} has {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out


_META = ("vocab_size", "d_model", "n_heads", "n_layers", "d_ffn", "max_len", "dropout_rate", "seed")


def model_tensors(model: Doc2DocTransformer) -> dict[str, np.ndarray]:
    out = {f"meta.{k}": np.array([float(getattr(model.cfg, k))]) for k in _META}
    out.update(model.params)
    return out


def load_model(path) -> Doc2DocTransformer:
    tensors = load_checkpoint(path)
    kw = {}
    for k in _META:
        if f"meta.{k}" not in tensors:
            raise CheckpointError(f"{path}: missing model field meta.{k}")
        v = float(tensors[f"meta.{k}"][0])
        kw[k] = v if k == "dropout_rate" else int(v)
    params = {k: v for k, v in tensors.items() if not k.startswith(("meta.", "adam.", "train."))}
    return Doc2DocTransformer(ModelConfig(**kw), params)


def save_model(path, model: Doc2DocTransformer) -> None:
    save_checkpoint(path, model_tensors(model))


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: Doc2DocTransformer
    log_lines: list[str]
    best_val: float
    steps: int
    epochs: int
    val_history: list[float]
    stopped: str


class Trainer:
    """Owns the model, optimizer state and loop position; one optimizer step per batch."""

    def __init__(self, cfg: TrainConfig, train_pairs: list[DocumentPair], valid_pairs: list[DocumentPair] | None = None,
                 model: Doc2DocTransformer | None = None):
        if not train_pairs:
            raise ValueError("training corpus is empty")
        self.cfg = cfg
        self.train_pairs = list(train_pairs)
        self.valid_pairs = list(valid_pairs) if valid_pairs else []
        self.model = model if model is not None else Doc2DocTransformer(cfg.model)
        self.adam = AdamState()
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self.best_val = math.inf
        self.bad_epochs = 0
        self.best_params: dict[str, np.ndarray] | None = None
        self.val_history: list[float] = []
        self.log_lines: list[str] = []
        self._epoch_scores: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._loss_cfg = cfg.loss if cfg.augmenting else LossConfig(True, False, False, reduction=cfg.loss.reduction)

    # one step ----------------------------------------------------------------

    def _scores(self, pairs, orig, labels, cur):
        """Raw importance for the batch; ``orig`` is a dropout-free original-view pass to reuse."""
        cfg = self.cfg
        if cfg.measure == "random":
            return [score_pairs(self.model, [p], "random", self._rng(p, 11), cfg.augment.alpha)[0] for p in pairs]
        if cfg.score_refresh == "epoch":
            return [self._epoch_scores[(p.doc_id, p.sent_id)] for p in pairs]
        if orig is None:
            return score_pairs(self.model, pairs, cfg.measure)
        if cfg.measure == "tnorm":
            return split_scores(pairs, tnorm(orig, "source"), tnorm(orig, "target"))
        root = nll_tensor(orig.logits, labels, cur, cfg.loss.reduction)
        return split_scores(pairs, *gnorm_from_graph(orig, root))

    def _rng(self, pair: DocumentPair, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, self.epoch, pair.doc_id, pair.sent_id, stream])

    def train_step(self, pairs: list[DocumentPair]) -> LossBreakdown:
        cfg = self.cfg
        graph = Graph()
        P = self.model.bind(graph)
        dropout = cfg.model.dropout_rate > 0
        drop_rng = np.random.default_rng([cfg.seed, self.step, 3]) if dropout else None
        src, tgt_in, labels, cur = teacher_forcing(pairs)
        share = cfg.measure in ("tnorm", "gnorm") and not dropout and cfg.score_refresh == "step"
        orig = None
        if self._loss_cfg.original or self._loss_cfg.agreement or share:
            orig = self.model.forward(src, tgt_in, graph, drop_rng, P)
        if cfg.augmenting:
            if cfg.measure == "uniform":
                scores = [None] * len(pairs)
            else:
                scores = self._scores(pairs, orig if share else None, labels, cur)
            views = [perturb_with_scores(p, s, cfg.augment, pair_rng(cfg.seed, self.epoch, p),
                                         cfg.model.vocab_size) for p, s in zip(pairs, scores)]
        else:
            views = list(pairs)
        breakdown, root, P = total_loss(self.model, pairs, views, self._loss_cfg, graph, drop_rng, orig, P)
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(self.step + 1, getattr(self, "last_checkpoint", None))
        graph.backward(root)
        grads = {k: graph.grad(t) for k, t in P.items()}
        lr = learning_rate(self.adam.t + 1, cfg.lr, cfg.warmup)
        if adam_step(self.model.params, grads, self.adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps):
            self.step += 1
        self.log_lines.append(breakdown.log_line(self.step))
        return breakdown

    # loop ----------------------------------------------------------------------

    def validation_loss(self, pairs=None, batch_tokens: int | None = None) -> float:
        pairs = self.valid_pairs if pairs is None else pairs
        return corpus_nll(self.model, pairs, batch_tokens or self.cfg.batch_tokens)

    def _refresh_epoch_scores(self):
        if not (self.cfg.augmenting and self.cfg.score_refresh == "epoch"
                and self.cfg.measure in ("tnorm", "gnorm")):
            return
        self._epoch_scores = {}
        for idx in make_batches(self.train_pairs, self.cfg.batch_tokens, self.cfg.seed, self.epoch):
            batch = [self.train_pairs[i] for i in idx]
            for p, s in zip(batch, score_pairs(self.model, batch, self.cfg.measure)):
                self._epoch_scores[(p.doc_id, p.sent_id)] = s

    def run(self, checkpoint: str | None = None) -> TrainResult:
        cfg = self.cfg
        stopped = "max_epochs"
        while self.epoch < cfg.max_epochs:
            batches = make_batches(self.train_pairs, cfg.batch_tokens, cfg.seed, self.epoch)
            if self.batch_index == 0:
                self._refresh_epoch_scores()
            while self.batch_index < len(batches):
                if cfg.max_steps and self.step >= cfg.max_steps:
                    break
                self.train_step([self.train_pairs[i] for i in batches[self.batch_index]])
                self.batch_index += 1
            if self.batch_index < len(batches):
                stopped = "max_steps"
                break
            self.epoch += 1
            self.batch_index = 0
            stop = self._end_epoch(checkpoint)
            self._save_state(checkpoint)
            if stop:
                stopped = "early_stopping"
                break
        else:
            stopped = "max_epochs"
        if stopped == "max_steps":
            # the partial epoch's weights compete for "best" too
            if self.valid_pairs and (self.batch_index > 0 or self.best_params is None):
                self._end_epoch(checkpoint)
            self._save_state(checkpoint)
        if self.best_params is not None:
            self.model.params = {k: v.copy() for k, v in self.best_params.items()}
        return TrainResult(self.model, self.log_lines, self.best_val, self.step, self.epoch,
                           self.val_history, stopped)

    def _save_state(self, checkpoint):
        # resumable state next to the best-model checkpoint
        if checkpoint:
            self.save(checkpoint + ".last")
            self.last_checkpoint = checkpoint + ".last"

    def _end_epoch(self, checkpoint) -> bool:
        if not self.valid_pairs:
            return False
        val = self.validation_loss()
        self.val_history.append(val)
        if val < self.best_val:
            self.best_val = val
            self.bad_epochs = 0
            self.best_params = {k: v.copy() for k, v in self.model.params.items()}
            if checkpoint:
                save_model(checkpoint, self.model)
        else:
            self.bad_epochs += 1
        log.info("epoch %d step %d valid %.6g (best %.6g)", self.epoch, self.step, val, self.best_val)
        return self.bad_epochs >= self.cfg.patience

    # resume --------------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = model_tensors(self.model)
        for k in self.model.params:
            if k in self.adam.m:
                out[f"adam.m.{k}"] = self.adam.m[k]
                out[f"adam.v.{k}"] = self.adam.v[k]
        out["adam.t"] = np.array([float(self.adam.t)])
        out["train.position"] = np.array([float(self.step), float(self.epoch), float(self.batch_index),
                                          float(self.bad_epochs)])
        out["train.best_val"] = np.array([self.best_val if math.isfinite(self.best_val) else -1.0])
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.state_tensors())

    @classmethod
    def resume(cls, path, cfg: TrainConfig, train_pairs, valid_pairs=None) -> "Trainer":
        tensors = load_checkpoint(path)
        model = load_model(path)
        tr = cls(cfg, train_pairs, valid_pairs, model)
        tr.adam.t = int(tensors["adam.t"][0])
        for k in model.params:
            if f"adam.m.{k}" in tensors:
                tr.adam.m[k] = tensors[f"adam.m.{k}"]
                tr.adam.v[k] = tensors[f"adam.v.{k}"]
        step, epoch, batch_index, bad = (int(x) for x in tensors["train.position"])
        tr.step, tr.epoch, tr.batch_index, tr.bad_epochs = step, epoch, batch_index, bad
        best = float(tensors["train.best_val"][0])
        tr.best_val = best if best >= 0 else math.inf
        return tr


def corpus_nll(model: Doc2DocTransformer, pairs, batch_tokens: int = 4096) -> float:
    """Token-averaged NLL over current-sentence targets; no parameter is touched."""
    if not pairs:
        return math.nan
    total, count = 0.0, 0
    for idx in make_batches(list(pairs), batch_tokens, 0, 0):
        batch = [pairs[i] for i in idx]
        src, tgt_in, labels, cur = teacher_forcing(batch)
        trace = model.forward(src, tgt_in)
        total += float(nll_tensor(trace.logits, labels, cur, "sum").data)
        count += int(cur.sum())
    return total / max(count, 1)


def train(cfg: TrainConfig, train_pairs, valid_pairs=None, checkpoint: str | None = None) -> TrainResult:
    return Trainer(cfg, train_pairs, valid_pairs).run(checkpoint)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


__all__ = [
    "AdamState",
    "CheckpointError",
    "TrainConfig",
    "Trainer",
    "TrainResult",
    "TrainingDiverged",
    "adam_step",
    "config_dict",
    "corpus_nll",
    "learning_rate",
    "load_checkpoint",
    "load_model",
    "make_batches",
    "save_checkpoint",
    "save_model",
    "train",
]
