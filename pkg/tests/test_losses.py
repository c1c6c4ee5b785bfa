import math

import numpy as np
import pytest

from zsdfa import losses as L
from zsdfa import tensor as T
from zsdfa.errors import ContractError
from zsdfa.gradcheck import finite_diff_check
from zsdfa.tensor import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- independent oracles ---------------------------------------------------------
def dfacc_oracle(v, labels, centers, lam, m):
    b = len(v)
    intra = sum(math.sqrt(sum((v[u][j] - centers[labels[u]][j]) ** 2 for j in range(len(v[u]))))
                for u in range(b)) / b
    inter = 0.0
    for u in range(b):
        for w in range(u + 1, b):
            if labels[u] == labels[w]:
                continue
            d = math.dist(v[u], v[w])
            cd = math.dist(centers[labels[u]], centers[labels[w]])
            inter += max(d - m, 0.0) if cd < m else -d
    inter *= 2.0 / (b * (b - 1))
    return intra + lam * inter, intra, inter


def dcpc_decomposed(I, P, A, tau):
    """Ungated InfoNCE plus the diagonal gate penalty."""
    b = len(I)

    def ce(q, k):
        z = q @ k.T / tau
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -np.mean(np.diag(logp))

    gate_pen = -np.mean(-np.logaddexp(0, -np.diag(A[:b, :b])))
    return 0.5 * (ce(I, P) + ce(P, I)) + gate_pen


def random_dfacc_instance(rng, b=None, x=None):
    b = b or int(rng.integers(2, 17))
    x = x or int(rng.integers(2, 9))
    v = rng.normal(size=(b, x))
    labels = rng.integers(0, x, size=b)
    centers = rng.normal(scale=0.5, size=(x, x))
    return v, labels, centers


class TestDFA:
    def test_perfect_prediction(self):
        assert L.dfa_loss(t64([[0, 1, 0]]), np.array([[0, 1, 0]])).item() == 0.0

    def test_uniform_binary(self):
        assert L.dfa_loss(t64([[0.5, 0.5]]), np.array([[1, 0]])).item() == pytest.approx(0.693147, abs=1e-6)

    def test_permutation(self):
        rng = np.random.default_rng(0)
        p = T.softmax_rows(t64(rng.normal(size=(6, 4))))
        y = np.eye(4)[rng.integers(0, 4, 6)]
        perm = rng.permutation(6)
        a = L.dfa_loss(p, y).item()
        b = L.dfa_loss(t64(p.data[perm]), y[perm]).item()
        assert a == pytest.approx(b, rel=1e-14)

    def test_unnormalised_rows(self):
        with pytest.raises(ContractError):
            L.dfa_loss(t64([[0.5, 0.6]]), np.array([[1, 0]]))


class TestDFACC:
    def test_samples_at_centers(self):
        centers = t64([[1.0, 0.0], [0.0, 1.0]])
        v = t64([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        total, intra, inter = L.dfacc_loss(v, np.array([0, 0, 0]), centers)
        assert (total.item(), intra.item(), inter.item()) == (0.0, 0.0, 0.0)

    def test_far_centers_repel(self):
        centers = t64([[1.0, 0.0], [0.0, 1.0]])
        total, intra, inter = L.dfacc_loss(t64([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), centers, 0.5, 0.7)
        assert inter.item() == pytest.approx(-1.414214, abs=1e-6)
        assert intra.item() == pytest.approx(0.0, abs=1e-6)
        assert total.item() == pytest.approx(-0.707107, abs=1e-6)

    def test_near_centers_hinge(self):
        centers = t64([[0.0, 0.0], [0.5, 0.0]])
        _, _, inter = L.dfacc_loss(t64([[0.0, 0.0], [1.0, 0.0]]), np.array([0, 1]), centers, 0.5, 0.7)
        # one pair, 2/(b(b-1)) = 1
        assert inter.item() == pytest.approx(0.3, abs=1e-6)

    def test_batch_too_small(self):
        with pytest.raises(ContractError):
            L.dfacc_loss(t64([[0.0, 1.0]]), np.array([0]), t64(np.zeros((2, 2))))

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            v, labels, c = random_dfacc_instance(rng)
            got = L.dfacc_loss(t64(v), labels, t64(c), 0.5, 0.7)
            want = dfacc_oracle(v.tolist(), labels.tolist(), c.tolist(), 0.5, 0.7)
            for g, w in zip(got, want):
                assert abs(g.item() - w) < 1e-10

    @pytest.mark.parametrize("b,x", [(2, 3), (4, 5)])
    def test_gradients(self, b, x):
        rng = np.random.default_rng(b * 10 + x)
        for _ in range(5):
            while True:
                v, labels, c = random_dfacc_instance(rng, b, x)
                iu, iv = np.triu_indices(b, 1)
                d = np.linalg.norm(v[iu] - v[iv], axis=1)
                cd = np.linalg.norm(c[labels[iu]] - c[labels[iv]], axis=1)
                if np.all(np.abs(d - 0.7) > 1e-3) and np.all(np.abs(cd - 0.7) > 1e-3):
                    break
            assert finite_diff_check(lambda t: L.dfacc_loss(t, labels, t64(c))[0], v) < 1e-6
            assert finite_diff_check(lambda t: L.dfacc_loss(t64(v), labels, t)[0], c) < 1e-6


class TestDCPC:
    def test_single_pair_neutral_gate(self):
        loss = L.dcpc_loss(t64([[0.3, -1.2]]), t64([[2.0, 0.5]]), t64(np.zeros((4, 4))), 1.0)
        assert loss.item() == pytest.approx(0.693147, abs=1e-6)

    def test_perfect_alignment_limit(self):
        eye = np.eye(3) * 50.0
        loss = L.dcpc_loss(t64(eye), t64(eye), t64(np.eye(3) * 40.0), 1.0)
        assert loss.item() < 1e-12

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(1)
        I, P, A = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
        a = L.dcpc_loss(t64(I), t64(P), t64(A), 0.8).item()
        b = L.dcpc_loss(t64(P), t64(I), t64(A.T), 0.8).item()
        assert a == pytest.approx(b, abs=1e-14)

    def test_decomposition_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            b, d = int(rng.integers(1, 17)), int(rng.integers(2, 9))
            I, P = rng.normal(size=(b, d)), rng.normal(size=(b, d))
            A = rng.normal(scale=2.0, size=(16, 16))
            tau = float(rng.uniform(0.2, 3.0))
            got = L.dcpc_loss(t64(I), t64(P), t64(A), tau).item()
            assert abs(got - dcpc_decomposed(I, P, A, tau)) < 1e-10

    def test_bad_temperature(self):
        with pytest.raises(ContractError):
            L.dcpc_loss(t64([[1.0]]), t64([[1.0]]), t64([[0.0]]), 0.0)

    @pytest.mark.parametrize("b,d", [(2, 4), (4, 8)])
    def test_gradients(self, b, d):
        rng = np.random.default_rng(b + d)
        I, P, A = rng.normal(size=(b, d)), rng.normal(size=(b, d)), rng.normal(size=(6, 6))
        tau = t64(0.9)
        assert finite_diff_check(lambda t: L.dcpc_loss(t, t64(P), t64(A), tau), I) < 1e-6
        assert finite_diff_check(lambda t: L.dcpc_loss(t64(I), t, t64(A), tau), P) < 1e-6
        assert finite_diff_check(lambda t: L.dcpc_loss(t64(I), t64(P), t, tau), A) < 1e-6
        assert finite_diff_check(lambda t: L.dcpc_loss(t64(I), t64(P), t64(A), T.exp(t)),
                                 np.array(-0.2)) < 1e-6


class TestCMC:
    def test_single_sample(self):
        assert L.cmc_loss(t64([[1.0, 2.0]]), t64([[-3.0, 0.5]]), 0.07).item() == 0.0

    def test_perfect_alignment_limit(self):
        e = np.eye(3)
        assert L.cmc_loss(t64(e), t64(e), 1e-3).item() < 1e-12

    def test_two_sample_fixture(self):
        e = np.eye(2)
        assert L.cmc_loss(t64(e), t64(e), 1.0).item() == pytest.approx(0.313262, abs=1e-6)

    def test_zero_norm(self):
        with pytest.raises(ContractError):
            L.cmc_loss(t64([[0.0, 0.0], [1.0, 0.0]]), t64([[1.0, 0.0], [0.0, 1.0]]), 0.1)

    @pytest.mark.parametrize("b,d", [(2, 4), (4, 8)])
    def test_gradients(self, b, d):
        rng = np.random.default_rng(3 * b + d)
        I, Tl = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        assert finite_diff_check(lambda t: L.cmc_loss(t, t64(Tl), 0.5), I) < 1e-6
        assert finite_diff_check(lambda t: L.cmc_loss(t64(I), t, 0.5), Tl) < 1e-6
        assert finite_diff_check(lambda t: L.cmc_loss(t64(I), t64(Tl), T.exp(t)), np.array(-1.0)) < 1e-6


class TestKL:
    def test_identical(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 5)))
        assert L.kl_align_loss(x, x).item() == pytest.approx(0.0, abs=1e-15)

    def test_fixture(self):
        val = L.kl_align_loss(t64([[math.log(3), 0.0]]), t64([[0.0, 0.0]]), 1.0).item()
        assert val == pytest.approx(0.143841, abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a, b = rng.normal(scale=3, size=(4, 6)), rng.normal(scale=3, size=(4, 6))
            assert L.kl_align_loss(t64(a), t64(b), float(rng.uniform(0.5, 2))).item() >= -1e-15

    def test_target_detached(self):
        pre, tgt = t64([[0.2, 0.1]], grad=True), t64([[1.0, -1.0]], grad=True)
        L.kl_align_loss(pre, tgt).backward()
        assert tgt.grad is None and pre.grad is not None

    @pytest.mark.parametrize("b,d", [(2, 4), (4, 8)])
    def test_gradient(self, b, d):
        rng = np.random.default_rng(b * d)
        tgt = rng.normal(size=(b, d))
        assert finite_diff_check(lambda t: L.kl_align_loss(t, t64(tgt), 1.5), rng.normal(size=(b, d))) < 1e-6


class TestTotal:
    def test_all_zero(self):
        zero = t64(0.0)
        _, rep = L.total_loss({n: zero for n in L.LOSS_TERMS})
        assert rep.total == 0.0

    def test_bookkeeping_and_ablation(self):
        vals = {"dfa": 1.25, "dfacc": -0.5, "cmc": 0.75, "dcpc": 0.6931, "kl": 0.03125}
        total, rep = L.total_loss({k: t64(v) for k, v in vals.items()})
        assert rep.total == math.fsum(getattr(rep, n) for n in L.LOSS_TERMS)
        assert total.item() == pytest.approx(rep.total, rel=1e-15)
        partial = dict(vals)
        del partial["cmc"]
        _, rep2 = L.total_loss({k: t64(v) for k, v in partial.items()})
        assert rep.total - rep2.total == pytest.approx(vals["cmc"], rel=1e-12)
        assert rep2.cmc == 0.0

    def test_csv_row(self):
        rep = L.report_from_values(dfa=1.0, kl=0.5)
        row = rep.row(3)
        assert row[0] == "3" and float(row[-1]) == 1.5 and len(row) == len(L.LossReport.CSV_FIELDS)


def test_batch_permutation_invariance():
    rng = np.random.default_rng(9)
    for _ in range(20):
        b, x, d = 6, 4, 5
        v, labels, c = random_dfacc_instance(rng, b, x)
        I, P, Tl = (rng.normal(size=(b, d)) for _ in range(3))
        A = np.diag(rng.normal(size=b)) + 0 * rng.normal(size=(b, b))
        perm = rng.permutation(b)
        A_perm = A[np.ix_(perm, perm)]
        pairs = [
            (L.dfacc_loss(t64(v), labels, t64(c))[0], L.dfacc_loss(t64(v[perm]), labels[perm], t64(c))[0]),
            (L.dcpc_loss(t64(I), t64(P), t64(A), 1.0), L.dcpc_loss(t64(I[perm]), t64(P[perm]), t64(A_perm), 1.0)),
            (L.cmc_loss(t64(I), t64(Tl), 0.3), L.cmc_loss(t64(I[perm]), t64(Tl[perm]), 0.3)),
            (L.kl_align_loss(t64(I), t64(Tl)), L.kl_align_loss(t64(I[perm]), t64(Tl[perm]))),
        ]
        for a, b_ in pairs:
            assert a.item() == pytest.approx(b_.item(), rel=1e-12, abs=1e-13)
