import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degradiff.errors import ConfigurationError, DegenerateInputError, LengthError
from degradiff.harness.corpus import speech_like
from degradiff.metrics import aggregate_report, estoi, paired_t_test, si_sdr
from degradiff.signal import Waveform

from oracles import estoi_loop, paired_t_by_hand, si_sdr_by_hand


def speech(seed=0, duration=1.0):
    return speech_like(duration, np.random.default_rng(seed)).samples


# -- SI-SDR -----------------------------------------------------------------


def test_si_sdr_sentinels(rng):
    x = rng.standard_normal(500)
    assert si_sdr(x, x) == math.inf
    assert si_sdr(x, 2 * x) == math.inf


def test_si_sdr_orthogonal_equal_energy_is_zero():
    ref = np.array([1.0, 0.0, 1.0, 0.0])
    est = ref + np.array([0.0, 1.0, 0.0, 1.0])
    assert si_sdr(ref, est) == 0.0


def test_si_sdr_matches_scalar_oracle(rng):
    ref, est = rng.standard_normal(300), rng.standard_normal(300)
    assert abs(si_sdr(ref, est) - si_sdr_by_hand(ref.tolist(), est.tolist())) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(1e-3, 1e3), sign=st.sampled_from([-1, 1]),
       b=st.floats(1e-3, 1e3))
def test_si_sdr_scale_invariance(seed, a, sign, b):
    r = np.random.default_rng(seed)
    ref = r.standard_normal(256)
    est = ref + 0.3 * r.standard_normal(256)
    base = si_sdr(ref, est)
    assert abs(si_sdr(ref, sign * a * est) - base) < 1e-9
    assert abs(si_sdr(b * ref, b * est) - base) < 1e-9


def test_si_sdr_errors(rng):
    with pytest.raises(DegenerateInputError):
        si_sdr(np.zeros(10), rng.standard_normal(10))
    with pytest.raises(LengthError):
        si_sdr(np.ones(10), np.ones(11))
    with pytest.raises(ConfigurationError):
        si_sdr(Waveform(np.ones(10), 16000), Waveform(np.ones(10), 8000))


# -- ESTOI ------------------------------------------------------------------


def test_estoi_self_and_sign_flip():
    x = speech()
    assert abs(estoi(x, x) - 1.0) < 1e-9
    assert abs(estoi(x, -x) - 1.0) < 1e-9
    y = x + 0.05 * np.random.default_rng(1).standard_normal(x.shape[0])
    assert abs(estoi(x, -y) - estoi(x, y)) < 1e-12
    assert abs(estoi(-x, y) - estoi(x, y)) < 1e-12


def test_estoi_matches_loop_oracle():
    x = speech(3)
    y = x + 0.1 * np.random.default_rng(4).standard_normal(x.shape[0])
    assert abs(estoi(x, y) - estoi_loop(x, y)) < 1e-9


def test_estoi_white_noise_is_unintelligible():
    for seed in range(20):
        x = speech(seed)
        noise = np.random.default_rng(1000 + seed).standard_normal(x.shape[0])
        score = estoi(x, noise)
        assert score < 0.2
        if seed < 3:
            assert abs(score - estoi_loop(x, noise)) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_estoi_monotone_in_noise(seed):
    x = speech(seed)
    noise = np.random.default_rng(50 + seed).standard_normal(x.shape[0])
    scores = [estoi(x, x + s * noise) for s in (0.0, 0.05, 0.1, 0.2, 0.5)]
    assert all(b <= a for a, b in zip(scores, scores[1:]))
    assert all(-1 <= s <= 1 for s in scores)


def test_estoi_errors():
    with pytest.raises(DegenerateInputError):
        estoi(np.zeros(16000), np.ones(16000))
    with pytest.raises(LengthError):
        x = speech(0, 0.25)
        estoi(x, x)
    with pytest.raises(LengthError):
        estoi(np.ones(16000), np.ones(15999))


# -- paired t-test ----------------------------------------------------------


def test_t_test_identical():
    assert paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)


def test_t_test_degenerate_sentinel():
    assert paired_t_test([1, 2, 3], [0, 1, 2]) == (math.inf, 0.0)
    assert paired_t_test([0, 1, 2], [1, 2, 3]) == (-math.inf, 0.0)


def test_t_test_hand_computation():
    a, b = [2.1, 1.9, 2.0, 2.2], [1.0, 1.1, 0.9, 1.0]
    t, p = paired_t_test(a, b)
    assert abs(t - paired_t_by_hand(a, b)) < 1e-9
    assert 0 < p < 0.01


def test_t_test_p_value_against_student_t():
    from scipy import stats

    r = np.random.default_rng(0)
    a, b = r.standard_normal(12), r.standard_normal(12)
    t, p = paired_t_test(a, b)
    ref = stats.ttest_rel(a, b)
    assert math.isclose(t, ref.statistic, rel_tol=1e-12)
    assert math.isclose(p, ref.pvalue, rel_tol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40))
def test_t_test_antisymmetric(seed, n):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(n), r.standard_normal(n)
    t1, p1 = paired_t_test(a, b)
    t2, p2 = paired_t_test(b, a)
    assert t1 == -t2 and p1 == p2


def test_t_test_needs_two_pairs():
    with pytest.raises(LengthError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(LengthError):
        paired_t_test([1.0, 2.0], [2.0])


# -- aggregation ------------------------------------------------------------


def rec(i, cat, sdr, e=0.5):
    return {"id": f"x{i}", "category": cat, "si_sdr_db": sdr, "estoi": e}


def test_single_record():
    agg = aggregate_report([rec(0, "NoiseOnly", 4.0, 0.7)]).aggregates
    assert agg["NoiseOnly"]["si_sdr_db"] == {"mean": 4.0, "std": 0.0, "count": 1}
    assert agg["overall"]["estoi"]["mean"] == 0.7


def test_two_categories_and_infinity():
    agg = aggregate_report([rec(0, "A", 1.0), rec(1, "B", 3.0), rec(2, "B", math.inf)]).aggregates
    assert set(agg) == {"A", "B", "overall"}
    assert agg["B"]["si_sdr_db"]["count"] == 1 and agg["B"]["si_sdr_inf"] == 1
    assert agg["overall"]["si_sdr_db"]["mean"] == 2.0
    assert agg["overall"]["count"] == 3


def test_hundred_records_against_plain_sums():
    r = np.random.default_rng(0)
    recs = [rec(i, "AB"[i % 2], float(r.normal(5, 3)), float(r.uniform(0, 1))) for i in range(100)]
    agg = aggregate_report(recs).aggregates
    for cat in ("A", "B"):
        vals = [x["si_sdr_db"] for x in recs if x["category"] == cat]
        mean = sum(vals) / len(vals)
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
        assert abs(agg[cat]["si_sdr_db"]["mean"] - mean) < 1e-12
        assert abs(agg[cat]["si_sdr_db"]["std"] - std) < 1e-12


def test_aggregate_order_independent():
    r = np.random.default_rng(1)
    recs = [rec(i, "AB"[i % 2], float(r.normal(0, 1e6))) for i in range(200)]
    a = aggregate_report(recs).aggregates
    b = aggregate_report(list(reversed(recs))).aggregates
    assert a["overall"]["si_sdr_db"]["mean"] == b["overall"]["si_sdr_db"]["mean"]


def test_aggregate_errors():
    with pytest.raises(ConfigurationError):
        aggregate_report([])
    with pytest.raises(ConfigurationError):
        aggregate_report([{"id": "x", "category": None, "si_sdr_db": 1.0, "estoi": 0.5}])
    with pytest.raises(ConfigurationError):
        aggregate_report([rec(0, "A", 1.0, 1.5)])


def test_report_files(tmp_path):
    report = aggregate_report([rec(0, "A", 1.0), rec(1, "B", 2.0)])
    report.write(tmp_path)
    with open(tmp_path / "per_item.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["id"] for r in rows] == ["x0", "x1"]
    assert set(rows[0]) == {"id", "category", "si_sdr_db", "estoi", "pesq", "utmos"}
    assert rows[0]["pesq"] == ""
    assert json.loads((tmp_path / "aggregates.json").read_text())["overall"]["count"] == 2
