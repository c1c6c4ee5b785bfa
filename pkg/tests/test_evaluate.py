import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from zsdfa import evaluate as E
from zsdfa.bench import DatasetSplit, build_protocol
from zsdfa.errors import ConfigError
from zsdfa.model import EncoderConfig, PVLM
from zsdfa.train import batch_from_samples

SEEN = ["a", "b", "c"]
UNSEEN = ["u1", "u2"]


def logits_for(p) -> np.ndarray:
    """Logits whose softmax is exactly ``p`` up to rounding."""
    return np.log(np.asarray(p, dtype=np.float64))


class TestDecision:
    def test_below_threshold(self):
        assert E.thresholded_attribution(logits_for([0.65, 0.35]), 0.7) == E.UNSEEN

    def test_above_threshold(self):
        assert E.thresholded_attribution(logits_for([0.95, 0.05]), 0.9) == 0

    def test_uniform_is_unseen(self):
        for theta in E.DEFAULT_THETAS:
            assert E.thresholded_attribution([0.0, 0.0], theta) == E.UNSEEN

    def test_ties_to_smallest_index(self):
        # p = (0.05, 0.475, 0.475) is below 0.7; with a low theta the tie resolves to index 1
        assert E.thresholded_attribution(logits_for([0.05, 0.475, 0.475]), 0.3) == 1

    def test_equal_to_theta_is_attributed(self):
        # the rule is strict: max(p) < theta flags UNSEEN
        theta = float(E.softmax(np.array([[2.0, 0.0]])).max())
        assert E.thresholded_attribution([2.0, 0.0], theta) == 0

    @pytest.mark.parametrize("theta", [0.0, 1.0, -0.2, 1.5])
    def test_theta_range(self, theta):
        with pytest.raises(ConfigError):
            E.decide(np.zeros((1, 2)), theta)

    def test_large_logits_stable(self):
        assert E.thresholded_attribution([1000.0, -1000.0, 0.0], 0.9) == 0


def test_threshold_monotonicity_sweep():
    rng = np.random.default_rng(0)
    grid = np.linspace(0.01, 0.99, 99)
    violations = 0
    for _ in range(1000):
        x = int(rng.integers(2, 9))
        logits = rng.normal(0, rng.uniform(0.1, 5), (int(rng.integers(1, 33)), x))
        counts = [np.sum(E.decide(logits, t) == E.UNSEEN) for t in grid]
        violations += int(np.sum(np.diff(counts) < 0))
    assert violations == 0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(2, 6)),
              elements=st.floats(-30, 30, allow_nan=False)),
       st.floats(0.01, 0.98), st.floats(0.001, 0.5))
def test_unseen_set_grows_with_theta(logits, lo, gap):
    hi = min(lo + gap, 0.99)
    flagged_lo = E.decide(logits, lo) == E.UNSEEN
    flagged_hi = E.decide(logits, hi) == E.UNSEEN
    assert np.all(flagged_hi >= flagged_lo)


def toy(rng, n_seen=4, n_unseen=3, sharp=True):
    fams, rows = [], []
    for i, f in enumerate(SEEN):
        for _ in range(n_seen):
            z = np.full(3, -20.0 if sharp else 0.0)
            z[i] = 20.0 if sharp else 1.0
            rows.append(z)
            fams.append(f)
    for f in UNSEEN:
        for _ in range(n_unseen):
            rows.append(rng.normal(0, 0.1, 3))
            fams.append(f)
    return np.array(rows), fams


class TestMetrics:
    def test_separable_toy(self):
        logits, fams = toy(np.random.default_rng(0))
        rep = E.metrics_from_logits(logits, fams, SEEN, UNSEEN)
        assert rep.seen_acc == 1.0
        for m in rep.thresholds:
            assert m.unseen_acc == 1.0 and m.seen_acc_thresholded == 1.0
        assert [m.theta for m in rep.thresholds] == [0.7, 0.9]

    def test_seen_acc_is_threshold_free(self):
        # soft but correct argmax: thresholding rejects everything, seen ACC stays 1
        logits, fams = toy(np.random.default_rng(1), sharp=False)
        rep = E.metrics_from_logits(logits, fams, SEEN, UNSEEN)
        assert rep.seen_acc == 1.0 and rep.at(0.9).seen_acc_thresholded == 0.0

    def test_seen_acc_matches_argmax(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(0, 3, (40, 3))
        fams = [SEEN[i % 3] for i in range(40)]
        rep = E.metrics_from_logits(logits, fams, SEEN, [])
        assert rep.seen_acc == np.mean(logits.argmax(1) == np.arange(40) % 3)
        assert math.isnan(rep.unseen_acc(0.7))

    def test_confusion_marginals(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(0, 2, (50, 3))
        fams = list(rng.choice(SEEN + UNSEEN, 50))
        rep = E.metrics_from_logits(logits, fams, SEEN, UNSEEN)
        counts = [fams.count(f) for f in SEEN] + [sum(fams.count(f) for f in UNSEEN)]
        for m in rep.thresholds:
            assert np.array(m.confusion).shape == (4, 4)
            assert list(np.array(m.confusion).sum(1)) == counts
        for row in rep.per_family:
            assert row["n"] == fams.count(row["family"])

    def test_constant_prediction_one_column(self):
        logits = np.tile([9.0, 0.0, 0.0], (12, 1))
        fams = [(SEEN + UNSEEN)[i % 5] for i in range(12)]
        for m in E.metrics_from_logits(logits, fams, SEEN, UNSEEN).thresholds:
            cols = np.flatnonzero(np.array(m.confusion).sum(0))
            assert list(cols) == [0]

    def test_unseen_monotone_in_report(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            logits = rng.normal(0, 2, (30, 3))
            fams = list(rng.choice(SEEN + UNSEEN, 30))
            rep = E.metrics_from_logits(logits, fams, SEEN, UNSEEN)
            if not math.isnan(rep.unseen_acc(0.7)):
                assert rep.unseen_acc(0.9) >= rep.unseen_acc(0.7)

    def test_errors(self):
        with pytest.raises(ConfigError):
            E.metrics_from_logits(np.zeros((0, 3)), [], SEEN, UNSEEN)
        with pytest.raises(ConfigError):
            E.metrics_from_logits(np.zeros((2, 4)), ["a", "b"], SEEN, UNSEEN)

    def test_report_roundtrip_and_files(self, tmp_path):
        logits, fams = toy(np.random.default_rng(5))
        rep = E.metrics_from_logits(logits, fams, SEEN, UNSEEN)
        assert E.EvalReport.from_dict(rep.to_dict()) == rep
        paths = E.write_report(rep, tmp_path)
        names = sorted(p.name for p in paths)
        assert names == ["confusion_0.7.csv", "confusion_0.9.csv", "eval_report.json", "eval_summary.csv",
                         "per_family.csv"]
        summary = (tmp_path / "eval_summary.csv").read_text().splitlines()
        assert summary[0] == "theta,seen_acc,seen_acc_thresholded,unseen_acc" and len(summary) == 3


def test_pca_projection():
    rng = np.random.default_rng(6)
    emb = rng.normal(size=(60, 8)) * np.array([10, 5, 1, 1, 1, 1, 1, 1])
    xy = E.pca_2d(emb)
    assert xy.shape == (60, 2)
    assert np.allclose(xy.mean(0), 0, atol=1e-12)
    assert np.var(xy[:, 0]) >= np.var(xy[:, 1])
    # the sign convention pins the axes, so negated data projects to negated points
    assert np.allclose(E.pca_2d(-emb), -xy)


@pytest.fixture(scope="module")
def small_setup():
    split = DatasetSplit(seen_families=["real", "stylegan_a"], unseen_families=["ldm_b"],
                         train_count=1, test_count=3, size=32)
    _, test = build_protocol(split, 0)
    cfg = EncoderConfig(size=32, patch=16, d=16, heads=2, channels=(4, 8), x=2)
    model = PVLM(cfg, seed=0)
    return split, test, model


class TestModelEvaluation:
    def test_pure(self, small_setup):
        split, test, model = small_setup
        batch = batch_from_samples(test, 16)
        fams = [s.family for s in test]
        a = E.evaluate(model, batch, fams, split.effective_seen(), split.unseen_families)
        b = E.evaluate(model, batch, fams, split.effective_seen(), split.unseen_families)
        assert a == b

    def test_chunking_invariant(self, small_setup):
        _, test, model = small_setup
        batch = batch_from_samples(test, 16)
        assert np.allclose(E.infer_logits(model, batch, chunk=2), E.infer_logits(model, batch), atol=1e-5)

    def test_robustness_grid(self, small_setup):
        split, test, model = small_setup
        seen, unseen = split.effective_seen(), split.unseen_families
        kinds = ["blur", "gaussian_noise"]
        rows = E.robustness_sweep(model, test, seen, unseen, kinds=kinds, seed=3)
        assert len(rows) == len(kinds) * 6
        assert [(r["kind"], r["severity"]) for r in rows] == [(k, s) for k in kinds for s in range(6)]
        for r in rows:
            for key in ("seen_acc", "unseen_acc@0.7", "unseen_acc@0.9"):
                assert 0.0 <= r[key] <= 1.0
        base = E.evaluate(model, batch_from_samples(test, 16), [s.family for s in test], seen, unseen)
        for r in rows:
            if r["severity"] == 0:
                assert r["seen_acc"] == base.seen_acc
                assert r["unseen_acc@0.9"] == base.unseen_acc(0.9)
        again = E.robustness_sweep(model, test, seen, unseen, kinds=kinds, seed=3)
        assert again == rows

    def test_empty_test_set(self, small_setup):
        _, test, model = small_setup
        empty = batch_from_samples(test, 16).take(np.array([], dtype=int))
        with pytest.raises(ConfigError):
            E.evaluate(model, empty, [], ["real", "stylegan_a"], ["ldm_b"])
