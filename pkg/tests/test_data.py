import json

import numpy as np
import pytest

from cmi_tune.data import (SYNTH_KINDS, RULES, DataError, SchemaError, TaskConfigError, accuracy,
                           all_metrics, collate, compute_metric, f1_binary, iter_batches,
                           load_jsonl, majority_label, matthews_corr, pattern_label, synth_task,
                           synth_vocab, tsv_to_jsonl)
from cmi_tune.tokenizer import CLS, PAD, START, train_bpe


def _write(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def text_vocab():
    return train_bpe(b"abcdefghijklmnopqrstuvwxyz ", target_size=4 + 27)


def test_empty_file_is_schema_error(tmp_path, text_vocab):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(SchemaError):
        load_jsonl(path, text_vocab, 16)


def test_two_line_file(tmp_path, text_vocab):
    path = _write(tmp_path / "two.jsonl", [{"text": "hi", "label": 0}, {"text": "yo", "label": 1}])
    ds = load_jsonl(path, text_vocab, 16)
    assert ds.num_classes == 2 and list(ds.counts) == [1, 1]
    assert list(ds.sequences[0]) == [START, text_vocab.id_of(b"h"), text_vocab.id_of(b"i"), CLS]


def test_truncation_keeps_trailing_cls(tmp_path, text_vocab):
    k = 8
    # k - 2 + 5 characters plus the two specials encode to k + 5 ids.
    path = _write(tmp_path / "long.jsonl", [{"text": "a" * (k + 3), "label": 0},
                                            {"text": "b", "label": 1}])
    seq = load_jsonl(path, text_vocab, k).sequences[0]
    assert len(seq) == k and seq[-1] == CLS


def test_schema_and_parse_errors(tmp_path, text_vocab):
    sparse = _write(tmp_path / "s.jsonl", [{"text": "a", "label": 0}, {"text": "b", "label": 2}])
    with pytest.raises(SchemaError):
        load_jsonl(sparse, text_vocab, 8)
    # Dev splits may miss classes when the count is given.
    assert load_jsonl(sparse, text_vocab, 8, num_classes=3).num_classes == 3
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"text": "a", "label": 0}\n{"text": "b"\n')
    with pytest.raises(DataError, match=":2:"):
        load_jsonl(bad, text_vocab, 8)
    typed = _write(tmp_path / "t.jsonl", [{"text": "a", "label": True}])
    with pytest.raises(DataError):
        load_jsonl(typed, text_vocab, 8)


def test_load_is_idempotent(tmp_path, text_vocab):
    rows = [{"text": f"row {c}", "label": i % 2} for i, c in enumerate("abcdef")]
    path = _write(tmp_path / "d.jsonl", rows)
    a, b = load_jsonl(path, text_vocab, 12), load_jsonl(path, text_vocab, 12)
    assert a.fingerprint() == b.fingerprint()
    assert all(np.array_equal(x, y) for x, y in zip(a.sequences, b.sequences))


def test_tsv_conversion(tmp_path, text_vocab):
    tsv = tmp_path / "pairs.tsv"
    tsv.write_text("s1\ts2\tlabel\nab\tcd\tyes\nef\tgh\tno\n")
    out = tmp_path / "pairs.jsonl"
    assert tsv_to_jsonl(tsv, out, ["s1", "s2"], "label", label_map={"no": 0, "yes": 1}) == 2
    first = json.loads(out.read_text().splitlines()[0])
    assert first == {"text": "ab | cd", "label": 1}
    assert load_jsonl(out, text_vocab, 16).num_classes == 2


def test_rule_examples():
    assert majority_label(b"a" * 7 + b"b" * 3) == 0
    assert majority_label(b"ab" + b"b" * 4) == 1
    assert pattern_label(b"aabbccdd") == 0
    assert pattern_label(b"xxabcxx") == 1
    assert majority_label(b"aabbbcccc", 3) == 2


@pytest.mark.parametrize("kind", SYNTH_KINDS)
def test_synthetic_tasks_separable_and_balanced(kind):
    ds = synth_task(kind, 200, seed=3)
    rule = RULES[kind]
    assert accuracy([rule(t) for t in ds.texts], ds.labels) == 1.0
    assert abs(int(ds.counts[0]) - int(ds.counts[1])) <= 1
    again = synth_task(kind, 200, seed=3)
    assert again.fingerprint() == ds.fingerprint()
    assert synth_task(kind, 200, seed=4).fingerprint() != ds.fingerprint()


def test_three_class_majority():
    ds = synth_task("majority_token", 90, seed=0, num_classes=3)
    assert list(ds.counts) == [30, 30, 30]
    assert all(majority_label(t, 3) == y for t, y in zip(ds.texts, ds.labels))


def test_synth_config_errors():
    with pytest.raises(TaskConfigError):
        synth_task("majority_token", 10, seed=0)
    with pytest.raises(TaskConfigError):
        synth_task("parity_of_token", 100, seed=0, num_classes=3)
    with pytest.raises(TaskConfigError):
        synth_task("majority_token", 100, seed=0, vocab=train_bpe(b"ab", target_size=6))
    with pytest.raises(TaskConfigError):
        synth_task("nonsense", 100, seed=0)


def test_batching_pads_and_is_seeded():
    ds = synth_task("majority_token", 40, seed=0, length=6).subset(range(5))
    ds.sequences[1] = ds.sequences[1][:4]
    b = collate(ds, [0, 1])
    assert b.ids.shape == (2, 8) and list(b.lengths) == [8, 4]
    assert (b.ids[1, 4:] == PAD).all()
    first = [x.sample_ids.tolist() for x in iter_batches(ds, 2, seed=1, epoch=0)]
    assert first == [x.sample_ids.tolist() for x in iter_batches(ds, 2, seed=1, epoch=0)]
    assert sorted(sum(first, [])) == list(range(5))
    assert [x.sample_ids.tolist() for x in iter_batches(ds, 5)] == [list(range(5))]


def test_vocab_is_character_level():
    v = synth_vocab()
    assert len(v) == 12 and v.merges == ()


# -- metrics -------------------------------------------------------------------

def test_metric_examples():
    y = [0, 1, 1, 0, 1]
    assert (accuracy(y, y), f1_binary(y, y), matthews_corr(y, y)) == (1.0, 1.0, 1.0)
    assert matthews_corr([1, 1, 1, 1], [0, 1, 0, 1]) == 0.0
    p, t = [1, 1, 0, 0], [1, 0, 1, 0]
    assert (accuracy(p, t), matthews_corr(p, t), f1_binary(p, t)) == (0.5, 0.0, 0.5)
    with pytest.raises(DataError):
        accuracy([0, 1], [0])
    with pytest.raises(DataError):
        f1_binary([0, 2], [0, 1])
    with pytest.raises(DataError):
        compute_metric("auc", [0], [0])
    assert set(all_metrics([0, 1, 2], [0, 1, 1], 3)) == {"accuracy"}


def _brute(preds, labels):
    table = np.zeros((2, 2), dtype=np.int64)
    for p, t in zip(preds, labels):
        table[t, p] += 1
    (tn, fp), (fn, tp) = table
    acc = (tp + tn) / len(preds)
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    rows, cols = table.sum(1), table.sum(0)
    denom = np.sqrt(float(rows[0] * rows[1] * cols[0] * cols[1]))
    mcc = (tp * tn - fp * fn) / denom if denom else 0.0
    return acc, f1, mcc


def test_metrics_match_contingency_table():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        preds, labels = rng.integers(0, 2, n), rng.integers(0, 2, n)
        acc, f1, mcc = _brute(preds, labels)
        assert accuracy(preds, labels) == acc
        assert f1_binary(preds, labels) == f1
        assert matthews_corr(preds, labels) == pytest.approx(mcc, abs=1e-15)
        assert -1.0 <= matthews_corr(preds, labels) <= 1.0


def test_metric_invariances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        preds, labels = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
        perm = rng.permutation(3)
        assert accuracy(perm[preds], perm[labels]) == accuracy(preds, labels)
        bp, bl = preds % 2, labels % 2
        assert matthews_corr(1 - bp, 1 - bl) == pytest.approx(matthews_corr(bp, bl), abs=1e-15)
