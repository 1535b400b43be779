"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its measurement."""

import itertools
import json
import math
import time

import numpy as np
import pytest

from iada import gradcheck
from iada.augment import apply_strategy, sample_mask, uniform_probs
from iada.cli import main
from iada.corpus import GeneratorConfig, generate
from iada.evaluate import bleu
from iada.importance import DIRECTIONS, normalize, replacement_probs, score_pairs
from iada.model import Doc2DocTransformer, ModelConfig
from iada.objective import agreement

from bleu_oracle import brute_bleu
from conftest import record_criterion
from desk_run import ARMS, BATCH_TOKENS, STEPS, run_seed

SEEDS = (0, 1, 2, 3, 4)


def test_c01_normalization_law():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_mean = worst_std = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        phi = rng.gamma(2.0, 1.0, size=n) * rng.uniform(0.01, 100.0)
        alpha = float(rng.uniform(0.01, 1.0))
        psi = normalize(phi, alpha)
        worst_mean = max(worst_mean, abs(psi.mean()))
        worst_std = max(worst_std, abs(psi.std() - alpha))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-9 and worst_std <= 1e-9 and elapsed < 1.0
    record_criterion(1, ok, f"max|mean|={worst_mean:.2e} max|std-alpha|={worst_std:.2e} in {elapsed:.2f}s")
    assert ok


def test_c02_logit_schedule_identities():
    t0 = time.perf_counter()
    grid = np.round(np.arange(-500, 501) * 0.01, 10)
    ok = True
    for p_ctx, p_cur in ((0.1, 0.1), (0.05, 0.3), (0.5, 0.01)):
        for direction, (s_ctx, s_cur) in DIRECTIONS.items():
            z = replacement_probs(np.zeros(2), 1, p_ctx, p_cur, direction=direction)
            ok &= z[0] == p_ctx and z[1] == p_cur
            ctx = replacement_probs(grid, grid.size, p_ctx, p_cur, direction=direction)
            cur = replacement_probs(grid, 0, p_ctx, p_cur, direction=direction)
            for probs, sign in ((ctx, s_ctx), (cur, s_cur)):
                steps = np.diff(probs) * sign
                ok &= bool(np.all(steps > 0))
                ok &= bool(np.all((probs > 0) & (probs < 1)))
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    record_criterion(2, ok, f"psi=0 exact, strict monotone on 1001-point grid, 4 directions x 3 bases, {elapsed:.2f}s")
    assert ok


def test_c03_affine_invariance():
    # shifts and scales are chosen so the transformed scores are exactly representable
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(300):
        n = int(rng.integers(2, 120))
        phi = rng.integers(0, 2**20, size=n) / 2.0**10
        base = normalize(phi, 0.1)
        shift = float(rng.integers(-2**20, 2**20)) / 2.0**10
        scale = float(rng.integers(1, 2**12) * 2)
        scale *= 2.0 ** int(rng.integers(-30, 30))
        for variant in (phi + shift, phi * scale, (phi + shift) * scale):
            psi = normalize(variant, 0.1)
            mismatches += int(not np.array_equal(psi, base))
            probs_a = replacement_probs(psi, n // 2, 0.1, 0.1)
            probs_b = replacement_probs(base, n // 2, 0.1, 0.1)
            mismatches += int(not np.array_equal(probs_a, probs_b))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 1.0
    record_criterion(3, ok, f"{mismatches} non-identical psi/p over 300 vectors x 3 transforms, {elapsed:.2f}s")
    assert ok


def test_c04_gradient_fidelity():
    t0 = time.perf_counter()
    probes = gradcheck.run(seed=104, probes=100, step=1e-5, d_model=16, n_layers=1)
    elapsed = time.perf_counter() - t0
    worst = max(probes, key=lambda p: p.rel_error)
    n_embed = sum(p.where.startswith("embed") for p in probes)
    ok = len(probes) == 100 and worst.rel_error <= 1e-4 and elapsed < 30
    record_criterion(4, ok, f"max rel err {worst.rel_error:.2e} ({worst.where}) over 100 probes "
                            f"({n_embed} embedding outputs), {elapsed:.1f}s")
    assert ok


def test_c05_gnorm_no_update():
    model = Doc2DocTransformer(ModelConfig())
    pairs = generate(GeneratorConfig(n_docs=12))["train"].pairs[:4]
    before = model.checksum()
    t0 = time.perf_counter()
    for _ in range(100):
        score_pairs(model, pairs, "gnorm")
    elapsed = time.perf_counter() - t0
    ok = model.checksum() == before and elapsed < 30
    record_criterion(5, ok, f"checksum unchanged after 100 GNorm passes, {elapsed:.1f}s")
    assert ok


def test_c06_agreement_laws():
    rng = np.random.default_rng(106)
    t0 = time.perf_counter()
    mask = np.ones((1, 1), bool)
    self_zero = asym = negative = 0
    for _ in range(10_000):
        v = int(rng.integers(2, 12))
        a = rng.normal(0, 3, size=(1, 1, v))
        b = rng.normal(0, 3, size=(1, 1, v))
        ab, ba = agreement(a, b, mask), agreement(b, a, mask)
        self_zero += int(agreement(a, a.copy(), mask) != 0.0)
        asym += int(abs(ab - ba) > 1e-12 * max(1.0, ab))
        negative += int(ab < 0.0)
    hand = agreement(np.log([[[0.75, 0.25]]]), np.log([[[0.25, 0.75]]]), mask)
    elapsed = time.perf_counter() - t0
    ok = self_zero == asym == negative == 0 and abs(hand - 0.54931) <= 1e-5 and elapsed < 5
    record_criterion(6, ok, f"self!=0:{self_zero} asym:{asym} neg:{negative} on 1e4 pairs, hand={hand:.6f}, "
                            f"{elapsed:.2f}s")
    assert ok


def test_c07_bernoulli_calibration():
    rng = np.random.default_rng(107)
    t0 = time.perf_counter()
    tokens = rng.integers(5, 205, size=100_000)
    mask = sample_mask(uniform_probs(tokens, 0.1), rng)
    out = apply_strategy(tokens, mask, "replace", rng, 205)
    rate = float(np.mean(out != tokens))
    elapsed = time.perf_counter() - t0
    ok = 0.0962 <= rate <= 0.1038 and elapsed < 5
    record_criterion(7, ok, f"replacement rate {rate:.4f} (band [0.0962, 0.1038]), {elapsed:.2f}s")
    assert ok


def test_c08_bleu_oracle_equivalence():
    t0 = time.perf_counter()
    checked = bad = 0

    def compare(h, r):
        nonlocal checked, bad
        checked += 1
        a, b = bleu([h], [r]), brute_bleu([h], [r])
        bad += int(abs(a - b) > 1e-9 * max(1.0, b))

    # every pair up to length 4 over five symbols
    short = [s for n in range(1, 5) for s in itertools.product(range(5), repeat=n)]
    for h in short:
        for r in short:
            compare(h, r)
    # sampled pairs up to length 12 over two symbols
    rng = np.random.default_rng(108)
    binary = [s for n in range(1, 13) for s in itertools.product(range(2), repeat=n)]
    for i in rng.choice(len(binary), size=3000, replace=False):
        for j in rng.choice(len(binary), size=5, replace=False):
            compare(binary[i], binary[j])
    # random long pairs over five symbols, lengths 0-12 for hypotheses and 1-12 for references
    for _ in range(10_000):
        h = tuple(rng.integers(0, 5, size=int(rng.integers(0, 13))))
        r = tuple(rng.integers(0, 5, size=int(rng.integers(1, 13))))
        compare(h, r)
    # multi-sentence corpora
    corp_bad = 0
    for _ in range(500):
        k = int(rng.integers(1, 5))
        hs = [tuple(rng.integers(0, 5, size=int(rng.integers(0, 13)))) for _ in range(k)]
        rs = [tuple(rng.integers(0, 5, size=int(rng.integers(1, 13)))) for _ in range(k)]
        a, b = bleu(hs, rs), brute_bleu(hs, rs)
        corp_bad += int(abs(a - b) > 1e-9 * max(1.0, b))
    ident = all(abs(bleu([s], [s]) - 100.0) < 1e-9 for s in short if len(s) >= 4)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and corp_bad == 0 and ident and elapsed < 60
    record_criterion(8, ok, f"{checked} pairs + 500 corpora, {bad + corp_bad} mismatches, identity=100: {ident}, "
                            f"{elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def desk_results():
    t0 = time.perf_counter()
    rows = {s: run_seed(s) for s in SEEDS}
    return rows, time.perf_counter() - t0


def _mean(rows, arm, field):
    return float(np.mean([getattr(rows[s][arm], field) for s in rows]))


@pytest.mark.slow
def test_c09_preliminary_reproduction(desk_results):
    rows, elapsed = desk_results
    for s in SEEDS:
        print("  seed", s, {a: round(rows[s][a].planted_masked, 3) for a in ARMS})
    none, uni, iada = (_mean(rows, a, "planted_masked") for a in ("doc2doc", "uniform", "iada"))
    order = iada > uni > none
    margin = iada - uni
    fast = elapsed < 30 * 60
    ok = order and margin >= 0.05 and fast
    record_criterion(9, ok, f"masked planted recovery over seeds 0-4: doc2doc={none:.3f} uniform={uni:.3f} "
                            f"iada={iada:.3f}; order {'holds' if order else 'broken'}, iada-uniform={margin:+.3f} "
                            f"(need >= +0.05); {STEPS} steps x {BATCH_TOKENS} tokens, {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_c10_noisy_context_robustness(desk_results):
    rows, _ = desk_results
    d_iada = _mean(rows, "iada", "noisy_delta_masked")
    d_none = _mean(rows, "doc2doc", "noisy_delta_masked")
    ok = d_iada <= d_none
    record_criterion(10, ok, f"planted-recovery drop gold-noisy (masked source): iada={d_iada:.3f} "
                             f"doc2doc={d_none:.3f}")
    assert ok


ABLATIONS = {
    "ctx-down-cur-up": ["--measure", "gnorm", "--direction", "ctx-down-cur-up"],
    "ctx-up-cur-down": ["--measure", "gnorm", "--direction", "ctx-up-cur-down"],
    "both-down": ["--measure", "gnorm", "--direction", "both-down"],
    "both-up": ["--measure", "gnorm", "--direction", "both-up"],
    "tnorm": ["--measure", "tnorm"],
    "random": ["--measure", "random"],
    "not-normalized": ["--measure", "gnorm", "--no-normalize"],
    "minus-perturb-loss": ["--measure", "gnorm", "--no-perturb-loss"],
    "minus-agreement-loss": ["--measure", "gnorm", "--no-agreement-loss"],
    "minus-original-loss": ["--measure", "gnorm", "--no-original-loss"],
    "wordrepl": ["--measure", "uniform", "--strategy", "replace"],
    "worddrop": ["--measure", "uniform", "--strategy", "drop"],
    "iada-drop": ["--measure", "gnorm", "--strategy", "drop"],
}


@pytest.mark.slow
def test_c11_ablation_switch_coverage(tmp_path):
    t0 = time.perf_counter()
    assert main(["gen-corpus", "--out", str(tmp_path / "corpus")]) == 0
    train = str(tmp_path / "corpus" / "train.txt")
    configs, bad = [], []
    for name, flags in ABLATIONS.items():
        out = tmp_path / f"{name}.ckpt"
        rc = main(["train", "--corpus", train, "--out", str(out), "--max-steps", "200", "--max-epochs", "1000", "--batch-tokens", "256",
                   *flags])
        rows = (tmp_path / f"{name}.ckpt.log").read_text().splitlines()[1:] if rc == 0 else []
        values = [float(v) for row in rows for v in row.split("\t")[1:]]
        if rc != 0 or len(rows) != 200 or not all(math.isfinite(v) for v in values):
            bad.append(name)
        m = json.loads((tmp_path / f"{name}.ckpt.manifest.json").read_text())
        configs.append(json.dumps(m["config"], sort_keys=True))
    distinct = len(set(configs)) == len(configs)
    elapsed = time.perf_counter() - t0
    ok = not bad and distinct and elapsed < 15 * 60
    record_criterion(11, ok, f"{len(ABLATIONS)} arms x 200 steps, non-finite/failed: {bad or 'none'}, "
                             f"distinct manifests: {distinct}, {elapsed / 60:.1f} min")
    assert ok
