import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deem.robustvqa import (
    UNKNOWN,
    BenchmarkItem,
    LabeledImage,
    MissingAnswersError,
    build_benchmark,
    build_pair,
    evaluate,
    mine_hard_negative,
    parse_answer,
    read_answers,
    read_benchmark,
    render_multichoice,
    render_yesno,
    write_benchmark,
)


def unit_with_cos(base, c, rng):
    """A vector with cosine ``c`` to unit vector ``base``."""
    v = rng.normal(size=base.shape)
    v -= (v @ base) * base
    v /= np.linalg.norm(v)
    return c * base + np.sqrt(1 - c * c) * v


def test_mining_argmax_excluding_gt(rng):
    e = np.eye(8)[0]
    labels = {"gt": unit_with_cos(e, 0.9, rng), "a": unit_with_cos(e, 0.7, rng), "b": unit_with_cos(e, 0.4, rng)}
    assert mine_hard_negative(LabeledImage("i", "gt", e), labels) == "a"


def test_mining_ignores_gt_rank(rng):
    e = np.eye(8)[0]
    labels = {"gt": unit_with_cos(e, 0.3, rng), "a": unit_with_cos(e, 0.8, rng)}
    assert mine_hard_negative(LabeledImage("i", "gt", e), labels) == "a"


def test_mining_errors():
    with pytest.raises(ValueError):
        mine_hard_negative(LabeledImage("i", "x", np.ones(2)), {"x": np.ones(2)})
    with pytest.raises(KeyError):
        mine_hard_negative(LabeledImage("i", "z", np.ones(2)), {"x": np.ones(2), "y": np.ones(2)})


def exhaustive_oracle(emb, gt, labels):
    best, best_sim = None, -np.inf
    for name, vec in labels.items():
        if name == gt:
            continue
        sim = sum(a * b for a, b in zip(emb, vec)) / (
            np.sqrt(sum(a * a for a in emb)) * np.sqrt(sum(b * b for b in vec))
        )
        if sim > best_sim:
            best, best_sim = name, sim
    return best


def test_mining_matches_exhaustive_oracle_on_100_label_sets():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        n = int(rng.integers(2, 100))
        labels = {f"l{k}": rng.normal(size=16) for k in range(n)}
        gt = f"l{int(rng.integers(n))}"
        emb = rng.normal(size=16)
        assert mine_hard_negative(LabeledImage("i", gt, emb), labels) == exhaustive_oracle(emb, gt, labels)


def test_yesno_template_bytes():
    item = render_yesno("img1", "banana", "yes")
    assert item.question == "Is banana the main object in this image? Please answer yes or no."
    assert item.question.encode() == b"Is banana the main object in this image? Please answer yes or no."


def test_pair_builder():
    pos, neg = build_pair("img", "cat", "lynx")
    assert (pos.gold, neg.gold) == ("yes", "no")
    assert "cat" in pos.question and "lynx" in neg.question


def test_multichoice_lists():
    gt = render_multichoice("i", "cat", "lynx", "gt_first")
    ng = render_multichoice("i", "cat", "lynx", "neg_first")
    assert gt.question == "What is the main object in this image? Chose from the list: [cat,lynx]."
    assert ng.question == "What is the main object in this image? Chose from the list: [lynx,cat]."
    with pytest.raises(ValueError):
        render_multichoice("i", "cat", "cat")


def test_parse_answer():
    assert parse_answer("Yes, it is.") == "yes"
    assert parse_answer("no") == "no"
    assert parse_answer("maybe") == UNKNOWN
    assert parse_answer("It is a cat", "multichoice", ["cat", "lynx"]) == 0
    assert parse_answer("lynx, not a cat", "multichoice", ["cat", "lynx"]) == 1
    assert parse_answer("a dog", "multichoice", ["cat", "lynx"]) == UNKNOWN


def _bench(n=10, fmt="yesno"):
    rng = np.random.default_rng(0)
    labels = {k: rng.normal(size=4) for k in ("cat", "lynx", "dog")}
    items = [LabeledImage(f"im{i}", ["cat", "dog"][i % 2], rng.normal(size=4)) for i in range(n)]
    return build_benchmark(items, labels, fmt)


def test_evaluate_extremes():
    items = _bench()
    assert evaluate(items, {it.item_id: it.gold for it in items})["accuracy"] == 1.0
    assert evaluate(items, {it.item_id: UNKNOWN for it in items})["accuracy"] == 0.0
    with pytest.raises(ValueError):
        evaluate([], {})
    with pytest.raises(MissingAnswersError):
        evaluate(items, {})


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(["yes", "no"]), st.integers(1, 30))
def test_constant_responder_scores_half(answer, n):
    items = _bench(n)
    rep = evaluate(items, {it.item_id: answer for it in items})
    assert rep["accuracy"] == 0.5
    assert {rep["positive"]["accuracy"], rep["negative"]["accuracy"]} == {0.0, 1.0}


def test_per_order_reporting():
    items = _bench(6, "multichoice-gt-first") + _bench(6, "multichoice-neg-first")
    answers = {it.item_id: 0 for it in items}  # always pick the first listed choice
    rep = evaluate(items, answers)
    assert rep["order:gt_first"]["accuracy"] == 1.0
    assert rep["order:neg_first"]["accuracy"] == 0.0
    assert rep["accuracy"] == 0.5


def test_files_round_trip(tmp_path):
    items = _bench(4) + _bench(2, "multichoice-neg-first")
    write_benchmark(items, tmp_path / "b.jsonl")
    back = read_benchmark(tmp_path / "b.jsonl")
    assert back == items
    with open(tmp_path / "a.jsonl", "w") as fh:
        for it in back:
            raw = "Yes." if it.format == "yesno" else f"the answer is {it.gt_label}"
            fh.write(f'{{"item_id": "{it.item_id}", "raw_output": "{raw}"}}\n')
    ans = read_answers(tmp_path / "a.jsonl", back)
    rep = evaluate(back, ans)
    assert rep["format:multichoice"]["accuracy"] == 1.0
    assert rep["format:yesno"]["accuracy"] == 0.5
