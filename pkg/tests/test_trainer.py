import math

import numpy as np
import pytest

from iada import tensor as T
from iada.augment import AugmentConfig
from iada.corpus import GeneratorConfig, generate
from iada.model import Doc2DocTransformer, ModelConfig
from iada.objective import nll_tensor, teacher_forcing
from iada.tensor import Graph
from iada.trainer import (
    AdamState,
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    adam_step,
    corpus_nll,
    learning_rate,
    load_checkpoint,
    load_model,
    make_batches,
    save_checkpoint,
    save_model,
)

TINY = ModelConfig(vocab_size=205, d_model=16, n_heads=2, n_layers=1, d_ffn=32)


@pytest.fixture(scope="module")
def pairs():
    return generate(GeneratorConfig(n_docs=4, sents_per_doc=3, seed=2))["train"].pairs


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(3):
        adam_step(params, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    np.testing.assert_array_equal(state.m["w"], 0.0)


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([0.5])}
    adam_step(params, {"w": np.array([1.0])}, AdamState(), 1e-3, eps=1e-9)
    # bias-corrected moments are exactly g and g^2 after one step
    assert params["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-9), rel=1e-15)


def test_adam_rejects_non_finite():
    params = {"w": np.array([0.5])}
    state = AdamState()
    assert not adam_step(params, {"w": np.array([np.nan])}, state, 1e-3)
    assert state.t == 0 and params["w"][0] == 0.5


def test_schedule_shape():
    lrs = [learning_rate(t, 3e-3, 200) for t in range(1, 2001)]
    assert int(np.argmax(lrs)) + 1 == 200
    assert lrs[199] == pytest.approx(3e-3)
    assert lrs[99] == pytest.approx(1.5e-3)
    assert learning_rate(800, 3e-3, 200) == pytest.approx(3e-3 * 0.5)


def test_batches_deterministic_and_complete(pairs):
    a = make_batches(pairs, 200, 0, 0)
    assert a == make_batches(pairs, 200, 0, 0)
    assert a != make_batches(pairs, 200, 0, 1)
    assert sorted(i for b in a for i in b) == list(range(len(pairs)))
    assert all(len(b) * 37 <= 200 for b in a)


def test_checkpoint_round_trip(tmp_path):
    model = Doc2DocTransformer(TINY)
    save_model(tmp_path / "m.ckpt", model)
    back = load_model(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg
    assert back.checksum() == model.checksum()


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_text("nope\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "short", {"x": np.ones(3)})
    text = (tmp_path / "short").read_text().replace("3\t", "4\t")
    (tmp_path / "short").write_text(text)
    with pytest.raises(CheckpointError, match="values"):
        load_checkpoint(tmp_path / "short")
    with pytest.raises(CheckpointError, match="meta"):
        save_checkpoint(tmp_path / "nometa", {"x": np.ones(1)})
        load_model(tmp_path / "nometa")


def test_plain_doc2doc_uses_original_loss_only(pairs):
    tr = Trainer(TrainConfig(model=TINY, max_steps=2), pairs)
    br = tr.train_step(pairs[:4])
    assert br.nll_perturbed == 0.0 and br.agreement == 0.0 and br.total == br.nll_original


def test_uniform_p0_equals_doubled_doc2doc(pairs):
    aug = AugmentConfig(measure="uniform", p=0.0)
    cfg = TrainConfig(model=TINY, measure="uniform", augment=aug, batch_tokens=300)
    tr = Trainer(cfg, pairs)
    ref = Doc2DocTransformer(TINY)
    state = AdamState()
    for step, idx in enumerate(make_batches(pairs, 300, 0, 0)[:4], start=1):
        batch = [pairs[i] for i in idx]
        br = tr.train_step(batch)
        g = Graph()
        P = ref.bind(g)
        src, tgt_in, labels, cur = teacher_forcing(batch)
        root = T.scale(nll_tensor(ref.forward(src, tgt_in, g, None, P).logits, labels, cur), 2.0)
        g.backward(root)
        adam_step(ref.params, {k: g.grad(t) for k, t in P.items()}, state, learning_rate(step, cfg.lr, cfg.warmup),
                  cfg.beta1, cfg.beta2, cfg.adam_eps)
        assert br.agreement == 0.0
        assert br.total == pytest.approx(float(root.data), rel=1e-12)
    for k in ref.params:
        np.testing.assert_allclose(tr.model.params[k], ref.params[k], rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("measure", ["gnorm", "random"])
def test_resume_is_bit_exact(tmp_path, pairs, measure):
    base = TrainConfig(model=TINY, measure=measure, augment=AugmentConfig(measure=measure), batch_tokens=200,
                       max_epochs=5)
    full = Trainer(TrainConfig(**{**base.__dict__, "max_steps": 5}), pairs)
    full.run()
    part = Trainer(TrainConfig(**{**base.__dict__, "max_steps": 3}), pairs)
    part.run(str(tmp_path / "m.ckpt"))
    resumed = Trainer.resume(tmp_path / "m.ckpt.last", TrainConfig(**{**base.__dict__, "max_steps": 5}), pairs)
    resumed.run()
    assert resumed.step == full.step == 5
    assert resumed.log_lines == full.log_lines[3:]
    for k in full.model.params:
        np.testing.assert_array_equal(resumed.model.params[k], full.model.params[k])


def test_gnorm_scoring_does_not_update(pairs):
    tr = Trainer(TrainConfig(model=TINY, measure="gnorm", augment=AugmentConfig(measure="gnorm")), pairs)
    before = tr.model.checksum()
    tr._scores(pairs[:3], None, None, None)
    assert tr.model.checksum() == before


def test_epoch_score_refresh(pairs):
    cfg = TrainConfig(model=TINY, measure="tnorm", augment=AugmentConfig(measure="tnorm"), score_refresh="epoch",
                      max_steps=2, batch_tokens=200)
    tr = Trainer(cfg, pairs)
    tr.run()
    assert len(tr._epoch_scores) == len(pairs)


def test_early_stopping_keeps_best(pairs):
    cfg = TrainConfig(model=TINY, lr=5e-2, warmup=2, batch_tokens=400, max_epochs=12, patience=2)
    res = Trainer(cfg, pairs, pairs).run()
    assert res.best_val == min(res.val_history)
    assert corpus_nll(res.model, pairs, 400) == pytest.approx(res.best_val, rel=1e-12)
    if res.stopped == "early_stopping":
        assert all(v >= res.best_val for v in res.val_history[res.val_history.index(res.best_val):])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(pairs, monkeypatch):
    tr = Trainer(TrainConfig(model=TINY), pairs)
    tr.model.params["proj.b"] = tr.model.params["proj.b"] + np.inf
    with pytest.raises(TrainingDiverged):
        tr.train_step(pairs[:2])


def test_config_validation():
    with pytest.raises(ValueError, match="disagrees"):
        TrainConfig(measure="tnorm")
    with pytest.raises(ValueError, match="score_refresh"):
        TrainConfig(score_refresh="never")
    with pytest.raises(ValueError):
        Trainer(TrainConfig(), [])


@pytest.mark.slow
def test_memorizes_200_record_copy_corpus():
    train = generate(GeneratorConfig(n_docs=40))["train"].pairs
    assert len(train) == 200
    tr = Trainer(TrainConfig(), train)
    nll = math.inf
    epoch = 0
    while tr.step < 2000 and nll >= 0.2:
        tr.epoch = epoch
        for idx in make_batches(train, tr.cfg.batch_tokens, tr.cfg.seed, epoch):
            tr.train_step([train[i] for i in idx])
        epoch += 1
        if epoch % 10 == 0:
            nll = corpus_nll(tr.model, train)
    assert nll < 0.2, (tr.step, nll)
