import numpy as np
import pytest
from scipy.stats import chisquare

from iada import corpus as C
from iada.corpus import Corpus, CorpusFormatError, CorpusRecord, GeneratorConfig, generate
from iada.document import FIRST_CONTENT_ID, SEP


def test_default_layout():
    splits = generate(GeneratorConfig())
    assert [len(splits[k]) for k in ("train", "valid", "test")] == [250, 25, 25]
    pair = splits["train"].records[0].pair
    assert len(pair.src_tokens) == 37 and pair.src_cur_start == 28
    docs = [{r.doc_id for r in splits[k]} for k in ("train", "valid", "test")]
    assert not (docs[0] & docs[1]) and not (docs[1] & docs[2])


def test_copy_rule_planted_equality():
    for r in generate(GeneratorConfig(n_docs=10))["train"]:
        planted = [r.src_ctx[c] for c in r.corr_positions]
        assert list(r.tgt_cur[:4]) == planted
        assert list(r.src_cur[:4]) == planted
        assert C.planted_oracle(r) == tuple(planted)
        assert SEP not in planted
        # the planted span sits inside one context sentence
        assert r.corr_positions == tuple(range(r.corr_positions[0], r.corr_positions[0] + 4))


def test_affine_rule():
    cfg = GeneratorConfig(n_docs=5, corr_rule="affine", vocab_content=200)
    for r in generate(cfg)["train"]:
        planted = [r.src_ctx[c] for c in r.corr_positions]
        assert list(r.tgt_cur[:4]) == [(7 * t + 13) % 200 + FIRST_CONTENT_ID for t in planted]
        assert C.planted_oracle(r, "affine", 200) == tuple(r.tgt_cur[:4])


def test_context_is_sliding_window():
    recs = generate(GeneratorConfig(n_docs=1))["train"].records
    for prev, nxt in zip(recs, recs[1:]):
        assert nxt.context_sentences("source")[-1] == list(prev.src_cur)
        assert nxt.context_sentences("target")[-1] == list(prev.tgt_cur)
        assert nxt.context_sentences("source")[:2] == prev.context_sentences("source")[1:]


def test_config_validation():
    with pytest.raises(ValueError, match="corr_rule"):
        GeneratorConfig(corr_rule="reverse")
    with pytest.raises(ValueError, match="vocab_content"):
        GeneratorConfig(vocab_content=20)
    with pytest.raises(ValueError, match="corr_len"):
        GeneratorConfig(corr_len=9)
    with pytest.raises(ValueError, match="coprime"):
        GeneratorConfig(vocab_content=210, corr_rule="affine")


def test_seeded_files_identical(tmp_path):
    for name in ("a", "b"):
        C.write(generate(GeneratorConfig(seed=7, n_docs=4))["train"], tmp_path / f"{name}.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    C.write(generate(GeneratorConfig(seed=8, n_docs=4))["train"], tmp_path / "c.txt")
    assert (tmp_path / "a.txt").read_bytes() != (tmp_path / "c.txt").read_bytes()


def test_context_token_uniformity():
    cfg = GeneratorConfig(n_docs=2400, sents_per_doc=1, n_valid_docs=0, n_test_docs=0, seed=11)
    toks = []
    for r in generate(cfg)["train"]:
        planted = set(r.corr_positions)
        toks += [t for i, t in enumerate(r.src_ctx) if t != SEP and i not in planted]
        toks += [t for t in r.tgt_ctx if t != SEP]
    toks = np.array(toks)
    assert toks.size >= 10**5
    counts = np.bincount(toks - FIRST_CONTENT_ID, minlength=cfg.vocab_content)
    assert chisquare(counts).pvalue > 0.01


def test_empty_corpus_round_trip(tmp_path):
    path = tmp_path / "empty.txt"
    C.write(Corpus([]), path)
    assert path.read_text() == C.HEADER + "\n"
    assert len(C.read(path)) == 0


def test_round_trip_1000_records(tmp_path):
    recs = generate(GeneratorConfig(n_docs=200, seed=5))["train"].records
    assert len(recs) == 1000
    path = tmp_path / "c.txt"
    C.write(Corpus(recs), path)
    back = C.read(path)
    assert back.records == recs
    C.write(back, tmp_path / "d.txt")
    assert path.read_bytes() == (tmp_path / "d.txt").read_bytes()


def test_record_from_pair_inverts_pair():
    for r in generate(GeneratorConfig(n_docs=3))["train"]:
        assert C.record_from_pair(r.pair, r.corr_positions) == r
    empty_ctx = CorpusRecord(0, 0, (), (7, 8), (), (9,))
    assert C.record_from_pair(empty_ctx.pair) == empty_ctx


def _write(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    return path


def test_truncated_final_line(tmp_path):
    good = C.format_record(generate(GeneratorConfig(n_docs=1))["train"].records[0])
    path = _write(tmp_path, f"{C.HEADER}\n{good}\n{good[:20]}")
    with pytest.raises(CorpusFormatError) as err:
        C.read(path)
    assert err.value.line == 3
    assert ":3:" in str(err.value)


@pytest.mark.parametrize("line,field", [
    ("x\t0\t7\t8\t9\t10\t", "doc_id"),
    ("0\ty\t7\t8\t9\t10\t", "sent_id"),
    ("0\t0\t7 q\t8\t9\t10\t", "src_ctx"),
    ("0\t0\t7\t8\t9\t10\t5", "corr_positions"),
    ("0\t0\t7\t8\t9", "tgt_cur"),
])
def test_field_errors_are_named(tmp_path, line, field):
    with pytest.raises(CorpusFormatError) as err:
        C.read(_write(tmp_path, f"{C.HEADER}\n{line}\n"))
    assert err.value.field_name == field and err.value.line == 2


def test_bad_header(tmp_path):
    with pytest.raises(CorpusFormatError, match="header"):
        C.read(_write(tmp_path, "corpus v0\n"))
