import json
import logging
import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p4dkit.evalkit import (
    REL_THRESHOLDS,
    TABLE_COLUMNS,
    DatasetError,
    EvalDataset,
    EvalReport,
    emit_report,
    load_dataset,
    mcq_accuracy,
    random_baseline,
    relative_accuracy,
    render_report,
    save_dataset,
)
from p4dkit.evalkit import parse_footer
from p4dkit.scenegen.vqa import VQASample

DATA = Path(__file__).parent / "data"
SPLIT = {"VG": "static", "DM": "static", "SR": "static", "R": "dynamic", "C": "dynamic", "T": "dynamic",
         "FP": "dynamic", "SA": "dynamic", "DP": "dynamic"}


def sample(i, category, k, answer=0):
    return VQASample(video_id=f"v{i}", timestamps=[0.0, 0.5, 1.0], question=f"question {i}?",
                     options=[f"opt{j}" for j in range(k)], answer_index=answer, regions={},
                     category=category, split=SPLIT[category])


def six_fixture():
    """Three 5-option static and three 4-option dynamic questions."""
    samples = [sample(0, "VG", 5, 1), sample(1, "DM", 5, 2), sample(2, "SR", 5, 0),
               sample(3, "R", 4, 3), sample(4, "R", 4, 1), sample(5, "FP", 4, 2)]
    preds = [1, 0, 0, 3, 0, 2]
    return EvalDataset(samples), preds


def test_column_order():
    assert TABLE_COLUMNS == ("Avg", "Sta", "Dyn", "VG", "DM", "SR", "R", "C", "T", "FP", "SA", "DP")


def test_six_sample_hand_computed_aggregation():
    ds, preds = six_fixture()
    acc = mcq_accuracy(preds, ds)
    assert acc["categories"]["VG"] == (1.0, 1)
    assert acc["categories"]["DM"] == (0.0, 1)
    assert acc["categories"]["R"] == (0.5, 2)
    assert acc["splits"]["static"] == pytest.approx((2 / 3, 3))
    assert acc["splits"]["dynamic"] == pytest.approx((2 / 3, 3))
    assert acc["overall"] == pytest.approx(4 / 6)


def test_all_correct_is_one_everywhere():
    ds, _ = six_fixture()
    acc = mcq_accuracy([s.answer_index for s in ds], ds)
    assert acc["overall"] == 1.0
    assert all(v == 1.0 for v, _ in acc["categories"].values())
    assert all(v == 1.0 for v, _ in acc["splits"].values())


def test_option_zero_on_balanced_set():
    ds = EvalDataset([sample(i, "C", 4, i % 4) for i in range(400)])
    assert mcq_accuracy([0] * 400, ds)["overall"] == pytest.approx(0.25)


def test_missing_prediction_rejected():
    ds, preds = six_fixture()
    with pytest.raises(ValueError, match="5 predictions for 6"):
        mcq_accuracy(preds[:5], ds)
    keyed = {s.key: p for s, p in zip(ds, preds)}
    keyed.pop(ds.samples[2].key)
    with pytest.raises(ValueError, match="no prediction"):
        mcq_accuracy(keyed, ds)


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(6))))
def test_accuracy_permutation_invariant(order):
    ds, preds = six_fixture()
    shuffled = EvalDataset([ds.samples[i] for i in order])
    a = mcq_accuracy(preds, ds)
    b = mcq_accuracy([preds[i] for i in order], shuffled)
    assert a["overall"] == pytest.approx(b["overall"], abs=1e-12)
    for c in a["categories"]:
        assert a["categories"][c] == pytest.approx(b["categories"][c], abs=1e-12)


# -- relative accuracy -------------------------------------------------------------------

def test_relative_thresholds():
    assert REL_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


@pytest.mark.parametrize("factor, expected", [(1.0, 1.0), (2.0, 0.0), (1.3, 0.4)])
def test_relative_accuracy_examples(factor, expected):
    gt = [1.0, 2.5, 7.0]
    assert relative_accuracy([factor * g for g in gt], gt) == pytest.approx(expected, abs=1e-12)


def test_relative_accuracy_rejects_nonpositive_gt():
    with pytest.raises(ValueError, match="positive"):
        relative_accuracy([1.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError, match="same shape"):
        relative_accuracy([1.0], [1.0, 2.0])


finite = st.floats(min_value=0.01, max_value=100.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=12), st.sampled_from([0.5, 2.0, 4.0, 0.125]))
def test_relative_accuracy_scale_invariant(pairs, c):
    # powers of two keep the scaled ratios bit-exact
    pred, gt = zip(*pairs)
    assert relative_accuracy([c * p for p in pred], [c * g for g in gt]) == relative_accuracy(pred, gt)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=12), st.randoms())
def test_relative_accuracy_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = relative_accuracy(*zip(*pairs))
    b = relative_accuracy(*zip(*shuffled))
    assert a == pytest.approx(b, abs=1e-12)


# -- random baseline ---------------------------------------------------------------------

def test_random_baseline_five_and_four_options():
    five = EvalDataset([sample(i, c, 5) for i, c in enumerate(["VG", "DM", "SR"] * 4)])
    four = EvalDataset([sample(i, c, 4) for i, c in enumerate(["R", "C", "T", "FP"] * 3)])
    r5, r4 = random_baseline(five), random_baseline(four)
    assert r5["overall"] == 0.2 and all(v == 0.2 for v, _ in r5["categories"].values())
    assert r4["overall"] == 0.25 and all(v == 0.25 for v, _ in r4["categories"].values())


def test_random_baseline_mixed_half_and_half():
    ds = EvalDataset([sample(i, "R", 4) for i in range(10)] + [sample(10 + i, "VG", 5) for i in range(10)])
    assert random_baseline(ds)["overall"] == pytest.approx(0.225, abs=1e-15)


def test_monte_carlo_matches_analytic():
    ds, _ = six_fixture()
    ana = random_baseline(ds, "analytic")
    mc = random_baseline(ds, "monte-carlo", draws=10_000, seed=3)
    for c, (p, n) in ana["categories"].items():
        se = math.sqrt(p * (1 - p) / (10_000 * n))
        assert abs(mc["categories"][c][0] - p) < 3 * se
        assert abs(mc["categories"][c][0] - p) < 0.01


def test_random_baseline_errors():
    with pytest.raises(ValueError, match="unknown baseline mode"):
        random_baseline(six_fixture()[0], "uniform")


# -- dataset IO ------------------------------------------------------------------------

def test_roundtrip(tmp_path):
    ds, _ = six_fixture()
    path = save_dataset(ds, tmp_path / "q.jsonl")
    back = load_dataset(path)
    assert [s.to_record() for s in back] == [s.to_record() for s in ds]


def test_empty_file_warns(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(path)
    assert len(ds) == 0
    assert "empty" in caplog.text


def test_answer_index_bound_rejected_with_line(tmp_path):
    ds, _ = six_fixture()
    path = save_dataset(ds, tmp_path / "q.jsonl")
    lines = path.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["answer_index"] = 5
    lines[0] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"q\.jsonl:1: answer_index 5"):
        load_dataset(path)


def test_duplicate_key_rejected(tmp_path):
    ds, _ = six_fixture()
    path = save_dataset(EvalDataset(ds.samples + ds.samples[:1]), tmp_path / "q.jsonl")
    with pytest.raises(DatasetError, match="7: duplicate of line 1"):
        load_dataset(path)


def test_split_mismatch_rejected(tmp_path):
    bad = sample(0, "VG", 5)
    bad.split = "dynamic"
    path = save_dataset(EvalDataset([bad]), tmp_path / "q.jsonl")
    with pytest.raises(DatasetError, match="belongs to split static"):
        load_dataset(path)


def test_unknown_category_rejected(tmp_path):
    rec = sample(0, "VG", 5).to_record()
    rec["category"] = "XX"
    path = tmp_path / "q.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetError, match="unknown category"):
        load_dataset(path)


# -- reports ---------------------------------------------------------------------------

def fixture_report():
    ds, preds = six_fixture()
    return EvalReport.build(preds, ds, model_hash="fixture", seed=0)


@pytest.mark.parametrize("fmt, name", [("csv", "report_golden.csv"), ("text", "report_golden.txt")])
def test_golden_report(fmt, name):
    assert render_report(fixture_report(), fmt) == (DATA / name).read_text()


def test_report_json_structure():
    rec = json.loads(render_report(fixture_report(), "json"))
    assert rec["columns"] == list(TABLE_COLUMNS)
    assert rec["rows"]["Random"]["Sta"] == pytest.approx(0.2)
    assert rec["counts"] == {"DM": 1, "FP": 1, "R": 2, "SR": 1, "VG": 1}


@pytest.mark.parametrize("fmt", ["csv", "json", "text"])
def test_footer_matches_body(fmt):
    text = render_report(fixture_report(), fmt)
    recomputed, reported = parse_footer(text)
    assert recomputed == reported == "66.7"


@pytest.mark.parametrize("fmt", ["csv", "json", "text"])
def test_emit_byte_identical(tmp_path, fmt):
    a = emit_report(fixture_report(), fmt, tmp_path / f"a.{fmt}").read_bytes()
    b = emit_report(fixture_report(), fmt, tmp_path / f"b.{fmt}").read_bytes()
    assert a == b


def test_unknown_format_rejected():
    with pytest.raises(ValueError, match="unknown report format 'xlsx'"):
        render_report(fixture_report(), "xlsx")


def test_inconsistent_report_rejected():
    rep = fixture_report()
    rep.overall = 0.9
    with pytest.raises(AssertionError, match="count-weighted"):
        render_report(rep, "csv")


def test_dur_column_appended():
    ds = EvalDataset([VQASample("v0", [0.0, 1.0], "how long?", ["1", "2", "3", "4"], 0, {}, "DUR", "dynamic")])
    rep = EvalReport.build([0], ds)
    assert rep.columns()[-1] == "DUR"
    assert rep.row()["DUR"] == 1.0
