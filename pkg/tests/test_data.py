import json

import pytest
from hypothesis import given, strategies as st

from promptcl.data import (TaskSpec, TaskSequence, export_jsonl, frequency_oracle, gen_synthetic_suite,
                           load_jsonl_task, load_manifest, make_suite, read_task_jsonl, split_validation,
                           tokenize_hash, write_manifest, write_task_jsonl)

V = 4096


def test_tokenize_examples():
    assert tokenize_hash("", V) == []
    assert tokenize_hash("some text", V) == tokenize_hash("some text", V)
    a, b = tokenize_hash("Hello, hello", V)
    assert a == b
    assert tokenize_hash("a b c d", V, max_text_len=2) == tokenize_hash("a b", V)
    with pytest.raises(ValueError):
        tokenize_hash("x", 1)


@given(st.text(max_size=60), st.integers(2, 10_000))
def test_tokenize_range_and_stability(text, vocab):
    ids = tokenize_hash(text, vocab)
    assert all(1 <= i < vocab for i in ids)
    tokenize_hash("unrelated words first", vocab)
    assert tokenize_hash(text, vocab) == ids


def dump(seq):
    return json.dumps([[t.task_id, t.labels, t.train, t.val, t.test] for t in seq.tasks])


@pytest.mark.parametrize("name", ["conflict5", "disjoint5", "transfer5"])
def test_suite_deterministic(name):
    assert dump(make_suite(name, seed=3)[0]) == dump(make_suite(name, seed=3)[0])
    assert dump(make_suite(name, seed=3)[0]) != dump(make_suite(name, seed=4)[0])


def _signal_ids(layout, k):
    return {tokenize_hash(w, V)[0] for ws in layout.signals[k] for w in ws}


def test_disjoint_signal_vocabularies():
    _, layout = gen_synthetic_suite(n_tasks=5, seed=0, conflict=False)
    for i in range(5):
        for j in range(i + 1, 5):
            assert not _signal_ids(layout, i) & _signal_ids(layout, j)


def test_transfer_suite_reuses_patterns():
    _, layout = make_suite("transfer5", seed=0)
    patterns = [tuple(ws) for task in layout.signals for ws in task]
    assert len(set(patterns)) < len(patterns)


def test_conflict_carries_earlier_patterns():
    seq, layout = make_suite("conflict5", seed=0)
    earlier = _signal_ids(layout, 0)
    later = seq.tasks[3]
    assert all(set(ids) & earlier for ids, _ in later.train[:20])


@pytest.mark.parametrize("name", ["conflict5", "disjoint5", "transfer5"])
def test_frequency_oracle_learnable(name):
    seq, layout = make_suite(name, seed=1)
    for k, task in enumerate(seq.tasks):
        assert frequency_oracle(task, layout.signals[k], V) >= 0.95


def test_suite_sizes_and_min_tasks():
    seq, _ = make_suite("conflict5", seed=0)
    t = seq.tasks[0]
    assert len(t.train) + len(t.val) == 2 * 210 and len(t.val) == 20 and len(t.test) == 100
    with pytest.raises(ValueError):
        gen_synthetic_suite(n_tasks=1)


def test_splits_disjoint():
    seq, _ = make_suite("conflict5", seed=0)
    for t in seq.tasks:
        s = {k: set(v) for k, v in t.texts.items()}
        assert not (s["train"] & s["val"]) and not (s["train"] & s["test"]) and not (s["val"] & s["test"])


def test_load_jsonl_small(tmp_path):
    p = tmp_path / "t.jsonl"
    rows = [{"text": "good film", "label": "pos"}, {"text": "bad film", "label": "neg"},
            {"text": "good film", "label": "pos"}]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    spec = load_jsonl_task(p, "t1", "label", "text")
    assert spec.labels == ["pos", "neg"] and len(spec.train) == 3
    assert spec.train[0] == spec.train[2]


def test_load_jsonl_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"text": "a", "label": "x"}\nnot json\n')
    with pytest.raises(ValueError, match=":2:"):
        load_jsonl_task(p, "t")
    p.write_text('{"text": "a", "label": "x"}\n{"text": "b", "label": "y", "split": "test"}\n')
    with pytest.raises(ValueError, match="never seen"):
        load_jsonl_task(p, "t")


def test_export_reload_roundtrip(tmp_path):
    seq, _ = make_suite("conflict5", seed=2)
    t = seq.tasks[2]
    export_jsonl(t, tmp_path / "t.jsonl")
    back = load_jsonl_task(tmp_path / "t.jsonl", t.task_id, labels=t.labels)
    assert (back.labels, back.train, back.val, back.test) == (t.labels, t.train, t.val, t.test)


def test_lossless_token_file_roundtrip(tmp_path):
    seq, _ = make_suite("toy2", seed=0)
    t = seq.tasks[1]
    write_task_jsonl(t, tmp_path / "t.jsonl")
    back = read_task_jsonl(tmp_path / "t.jsonl", t.task_id, labels=t.labels)
    assert (back.train, back.val, back.test) == (t.train, t.val, t.test)


def test_manifest_roundtrip(tmp_path):
    seq, _ = make_suite("conflict5", seed=0)
    names = []
    for t in seq.tasks:
        export_jsonl(t, tmp_path / f"{t.task_id}.jsonl")
        names.append(f"{t.task_id}.jsonl")
    write_manifest(seq, names, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json")
    assert back.order_id == "conflict5"
    assert dump(back) == dump(seq)


def _spec(n_per_class=100):
    train = [([i + 1], c) for c in range(2) for i in range(n_per_class)]
    return TaskSpec("t", "t", ["a", "b"], train)


def test_split_validation_examples():
    spec = _spec()
    same = split_validation(spec, 0)
    assert same.val == [] and same.train == spec.train
    out = split_validation(spec, 10, seed=5)
    assert len(out.val) == 20 and len(out.train) == 180
    assert sorted(y for _, y in out.val) == [0] * 10 + [1] * 10
    assert split_validation(spec, 10, seed=5).val == out.val


def test_split_validation_caps_at_ten_percent():
    out = split_validation(_spec(30), 10, seed=0)
    assert len(out.val) == 6


def test_split_validation_too_small():
    with pytest.raises(ValueError, match="'a'"):
        split_validation(TaskSpec("t", "t", ["a", "b"], [([1], 0), ([2], 1), ([3], 1)]), 1)


def test_sequence_rejects_duplicates():
    with pytest.raises(ValueError):
        TaskSequence("x", [_spec(), _spec()])
