import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from taxoguide.evaluation import (
    InstanceMismatch,
    JudgeVerdict,
    MethodRun,
    MissingVerdict,
    aggregate,
    format_table,
    judge_select,
    load_ground_truth,
    load_verdicts,
    precision_at_k,
    rp_at_k,
    score_against_judge,
    write_verdicts,
)
from taxoguide.llm import LLMClient, ScriptedProvider
from taxoguide.taxonomy import NONE_LABEL

from conftest import TEST_DATA

# Macro averages over tests/data/metrics_fixture.json, computed once with exact
# fractions by a standalone counter and frozen here.
ORACLE = {
    "P@1": Fraction(3, 20),
    "RP@1/predicted": Fraction(3, 20),
    "RP@1/k": Fraction(3, 20),
    "P@3": Fraction(2, 15),
    "RP@3/predicted": Fraction(19, 60),
    "RP@3/k": Fraction(37, 120),
    "P@5": Fraction(3, 25),
    "RP@5/predicted": Fraction(19, 50),
    "RP@5/k": Fraction(223, 600),
    "P@10": Fraction(7, 100),
    "RP@10/predicted": Fraction(91, 200),
    "RP@10/k": Fraction(67, 150),
}


def fixture_rows():
    return json.loads((TEST_DATA / "metrics_fixture.json").read_text())


def test_metric_fixture_matches_oracle():
    rows = fixture_rows()
    assert len(rows) == 20
    for k in (1, 3, 5, 10):
        p = sum(precision_at_k(r["predicted"], r["truth"], k) for r in rows) / 20
        assert p == pytest.approx(float(ORACLE[f"P@{k}"]), abs=1e-12)
        for denom in ("predicted", "k"):
            rp = sum(rp_at_k(r["predicted"], r["truth"], k, denom) for r in rows) / 20
            assert rp == pytest.approx(float(ORACLE[f"RP@{k}/{denom}"]), abs=1e-12)


def test_aggregate_uses_same_definitions():
    rows = fixture_rows()
    run = MethodRun("m", "x", {r["instance_id"]: r["predicted"] for r in rows})
    truth = {r["instance_id"]: r["truth"] for r in rows}
    (row,) = aggregate([run], truth, ks=(3, 5, 10))
    assert row["RP@10"] == pytest.approx(float(ORACLE["RP@10/predicted"]))
    (row,) = aggregate([run], truth, ks=(5,), metric="precision")
    assert row["P@5"] == pytest.approx(float(ORACLE["P@5"]))


def test_worked_values():
    assert precision_at_k(["a", "b", "c"], {"a", "c"}, 3) == pytest.approx(2 / 3)
    assert precision_at_k(["a"], {"a"}, 5) == pytest.approx(0.2)
    assert rp_at_k(["a"], {"a", "b", "c"}, 5) == 1.0
    assert rp_at_k(["a"], {"a", "b", "c"}, 5, denominator="k") == pytest.approx(1 / 3)
    assert rp_at_k(["x", "a", "b"], {"a", "b"}, 10) == 1.0
    assert rp_at_k([], {"a"}, 3) == 0.0


def test_rp_is_not_monotone_below_truth_size():
    """A short prefix can score higher than a longer one."""
    assert rp_at_k(["A", "C", "B"], {"A", "B"}, 1) == 1.0
    assert rp_at_k(["A", "C", "B"], {"A", "B"}, 2) == 0.5


def test_metric_arguments():
    with pytest.raises(ValueError):
        precision_at_k(["a"], {"a"}, 0)
    with pytest.raises(ValueError):
        rp_at_k(["a"], set(), 1)
    with pytest.raises(ValueError):
        rp_at_k(["a"], {"a"}, 1, denominator="truth")


labels = st.sampled_from([f"L{i}" for i in range(8)])
ranked = st.lists(labels, unique=True, max_size=8)
truths = st.sets(labels, min_size=1, max_size=4)


@given(ranked, truths, st.integers(1, 10), st.data())
def test_precision_ignores_order_inside_top_k(pred, truth, k, data):
    top = data.draw(st.permutations(pred[:k]))
    assert precision_at_k(list(top) + pred[k:], truth, k) == precision_at_k(pred, truth, k)


@given(ranked, truths, st.integers(1, 9))
def test_rp_monotone_once_k_covers_truth(pred, truth, k):
    if k < len(truth):
        k = len(truth)
    assert rp_at_k(pred, truth, k + 1) >= rp_at_k(pred, truth, k)


@given(ranked, truths, st.integers(1, 10))
def test_rp_bounds(pred, truth, k):
    v = rp_at_k(pred, truth, k)
    assert 0.0 <= v <= 1.0
    assert v >= precision_at_k(pred, truth, k)


def test_aggregate_instance_mismatch():
    with pytest.raises(InstanceMismatch):
        aggregate([MethodRun("m", "x", {"a": ["1"]})], {"a": ["1"], "b": ["2"]})


# -- judge -------------------------------------------------------------------------


def scripted_judge(answers):
    """Replies with the next answer per call."""
    it = iter(answers)
    return LLMClient(ScriptedProvider(lambda req: f"Answer: {next(it)}"))


def test_majority_vote():
    client = scripted_judge(["Actuaries (15-2011.00)", "Actuaries (15-2011.00); Data Scientists (15-2051.00)", "Data Scientists (15-2051.00)"])
    pool = {"Actuaries (15-2011.00)", "Data Scientists (15-2051.00)"}
    v = judge_select(client, "actuary, acme", pool, random.Random(0), "judge-model", instance_id="1")
    assert v.final == frozenset(pool)
    assert not v.tie_broken_randomly
    assert v.pool == tuple(sorted(pool | {NONE_LABEL}))


def first_listed(req):
    """Picks the first real option as shuffled into the prompt."""
    options = req.prompt.splitlines()[-1].split("; ")
    return "Answer: " + next(o for o in options if o != NONE_LABEL)


def test_tie_broken_randomly():
    pool = {"A (11-1011.00)", "B (11-1021.00)", "C (11-2011.00)", "D (11-2021.00)"}
    ties = 0
    for seed in range(30):
        v = judge_select(LLMClient(ScriptedProvider(first_listed)), "x", pool, random.Random(seed), "j")
        picks = [s[0] for s in v.per_run_selections]
        if len(set(picks)) == 3:
            ties += 1
            assert v.tie_broken_randomly and len(v.final) == 1 and v.final <= set(picks)
        else:
            assert not v.tie_broken_randomly
            assert v.final == {max(set(picks), key=picks.count)}
    assert ties > 0


def test_judge_ignores_labels_outside_pool():
    client = scripted_judge(["Astronauts (99-9999.99)"] * 3)
    v = judge_select(client, "x", {"A (11-1011.00)"}, random.Random(0), "j")
    assert v.per_run_selections == ((), (), ())
    assert v.tie_broken_randomly


def test_judge_none_verdict():
    client = scripted_judge(["None", NONE_LABEL, "A (11-1011.00)"])
    v = judge_select(client, "x", {"A (11-1011.00)"}, random.Random(0), "j")
    assert v.is_none


def test_judge_shuffles_per_run():
    prompts = []

    def record(req):
        prompts.append(req.prompt)
        return "Answer: None"

    pool = {f"T{i} (11-10{i:02d}.00)" for i in range(10)}
    judge_select(LLMClient(ScriptedProvider(record)), "x", pool, random.Random(1), "j")
    option_lines = {p.splitlines()[-1] for p in prompts}
    assert len(prompts) == 3 and len(option_lines) == 3


def test_judge_reproducible():
    def run():
        client = scripted_judge(["A (11-1011.00)", "B (11-1021.00)", "None"])
        return judge_select(client, "x", {"A (11-1011.00)", "B (11-1021.00)"}, random.Random(7), "j")

    assert run() == run()


def test_score_against_judge(tiny_onet, tmp_path):
    verdicts = {
        "1": JudgeVerdict("1", (), frozenset({"Actuaries (15-2011.00)"}), False),
        "2": JudgeVerdict("2", (), frozenset({NONE_LABEL}), False),
        "3": JudgeVerdict("3", (), frozenset({"Data Scientists (15-2051.00)"}), True),
    }
    finals = {"tgre": {"1": ["15-2011.00"], "2": ["15-2011.00"], "3": ["Data Scientists"]}}
    assert score_against_judge(finals, verdicts, tiny_onet) == {"tgre": pytest.approx(2 / 3)}
    with pytest.raises(MissingVerdict):
        score_against_judge({"m": {"9": ["x"]}}, verdicts)
    path = write_verdicts(verdicts.values(), tmp_path / "v.jsonl")
    assert load_verdicts(path) == verdicts


def test_ground_truth_loader(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"instance_id": 1, "labels": ["a"]}\n')
    assert load_ground_truth(p) == {"1": ["a"]}
    p.write_text('{"instance_id": 1, "labels": []}\n')
    with pytest.raises(ValueError):
        load_ground_truth(p)


def test_format_table():
    out = format_table([{"method": "tgre", "P@1": 0.5}, {"method": "cot", "P@1": 0.25}])
    assert out.splitlines() == ["method  P@1", "tgre    0.5000", "cot     0.2500"]
