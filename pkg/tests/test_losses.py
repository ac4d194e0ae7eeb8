import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastmask import checks
from contrastmask.config import ConfigError
from contrastmask.losses import contrastive_term, cosine_similarity, query_sharing_loss
from contrastmask.sampling import KeySets, SharedQueries

T = lambda *v: torch.tensor(v, dtype=torch.float64)
E = np.zeros(0, dtype=np.int64)


def keysets(fe, fh, be, bh, C=2):
    mk = lambda rows: torch.tensor(rows, dtype=torch.float64).reshape(-1, C)
    return KeySets(mk(fe), mk(fh), mk(be), mk(bh), E, E, E, E)


class TestCosine:
    def test_identity(self):
        assert float(cosine_similarity(T(1, 0), T(1, 0))) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert float(cosine_similarity(T(1, 0), T(0, 1))) == pytest.approx(0.0)

    def test_scale_invariant(self):
        assert float(cosine_similarity(T(1, 0), T(5, 0))) == pytest.approx(1.0)

    def test_zero_vectors_give_zero(self):
        assert float(cosine_similarity(T(0, 0), T(0, 0))) == 0.0


class TestContrastiveTerm:
    def test_perfect_positive_no_negatives(self):
        q = T(1, 0)
        assert float(contrastive_term(q, q[None], q.new_zeros(0, 2), 0.7)) == pytest.approx(0.0, abs=1e-15)

    def test_one_negative_tau_one(self):
        # reference value from the scalar oracle
        expected = checks.ref_term([1.0, 0.0], [[1.0, 0.0]], [[0.0, 1.0]], 1.0)
        assert expected == pytest.approx(0.313262, abs=1e-6)
        got = contrastive_term(T(1, 0), T(1, 0)[None], T(0, 1)[None], 1.0)
        assert float(got) == pytest.approx(expected, abs=1e-12)

    def test_empty_positives_is_zero(self):
        assert float(contrastive_term(T(1, 0), torch.zeros(0, 2, dtype=torch.float64), T(0, 1)[None], 0.5)) == 0.0

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(ConfigError):
            contrastive_term(T(1, 0), T(1, 0)[None], T(0, 1)[None], tau)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([0.05, 0.3, 0.7, 5.0]))
    def test_per_key_scale_invariance(self, seed, tau):
        g = torch.Generator().manual_seed(seed)
        q = torch.randn(5, generator=g, dtype=torch.float64)
        kp, kn = torch.randn(4, 5, generator=g, dtype=torch.float64), torch.randn(6, 5, generator=g, dtype=torch.float64)
        sp = torch.rand(4, 1, generator=g, dtype=torch.float64) * 10 + 0.1
        sn = torch.rand(6, 1, generator=g, dtype=torch.float64) * 10 + 0.1
        a = contrastive_term(q, kp, kn, tau)
        b = contrastive_term(q, kp * sp, kn * sn, tau)
        assert float(a) == pytest.approx(float(b), abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_nonnegative(self, seed):
        g = torch.Generator().manual_seed(seed)
        val = contrastive_term(
            torch.randn(4, generator=g), torch.randn(3, 4, generator=g), torch.randn(5, 4, generator=g), 0.3
        )
        assert float(val) >= 0.0

    def test_monotone_in_negative_similarity(self):
        q = T(1, 0)
        kp = T(0.6, 0.8)[None]
        prev = -1.0
        for angle in np.linspace(np.pi, 0.05, 12):  # negative rotates towards q
            kn = T(math.cos(angle), math.sin(angle))[None]
            val = float(contrastive_term(q, kp, kn, 0.3))
            assert val > prev
            prev = val

    def test_large_tau_limit(self):
        g = torch.Generator().manual_seed(0)
        q, kp, kn = torch.randn(3, generator=g), torch.randn(2, 3, generator=g), torch.randn(7, 3, generator=g)
        val = float(contrastive_term(q.double(), kp.double(), kn.double(), 1e7))
        assert val == pytest.approx(math.log(1 + 7), abs=1e-5)

    def test_stable_at_tiny_tau(self):
        val = contrastive_term(T(1, 0), T(-1, 0)[None], T(1, 0)[None], 1e-3)
        assert math.isfinite(float(val))
        assert float(val) == pytest.approx(2 / 1e-3, rel=1e-9)


class TestQuerySharingLoss:
    def test_closed_form_aligned_keys(self):
        qf, qb = T(1, 0), T(-1, 0)
        ks = keysets([[1, 0]] * 3, [[2, 0]] * 2, [[-1, 0]] * 4, [[-3, 0]] * 1)
        te, th = 0.7, 0.3
        out = query_sharing_loss(SharedQueries(qf, qb, 1), [ks], te, th)
        expected = [
            math.log(1 + 4 * math.exp(-2 / te)),
            math.log(1 + 1 * math.exp(-2 / th)),
            math.log(1 + 3 * math.exp(-2 / te)),
            math.log(1 + 2 * math.exp(-2 / th)),
        ]
        got = [float(out.term_fg_easy), float(out.term_fg_hard), float(out.term_bg_easy), float(out.term_bg_hard)]
        assert got == pytest.approx(expected, abs=1e-12)
        assert float(out.total) == pytest.approx(sum(expected), abs=1e-12)
        assert all(v > 0 for v in got)

    def test_all_empty_is_zero(self):
        ks = keysets([], [], [], [])
        out = query_sharing_loss(SharedQueries(T(1, 0), T(0, 1), 1), [ks], 0.7, 0.3)
        assert float(out.total) == 0.0 and out.n_proposals == 1

    def test_no_proposals(self):
        out = query_sharing_loss(SharedQueries(T(1, 0), T(0, 1), 1), [], 0.7, 0.3)
        assert float(out.total) == 0.0 and out.n_proposals == 0

    def test_mean_over_proposals(self):
        rng = np.random.default_rng(0)
        inst = checks.random_instance(rng)
        single = []
        for ks in inst.keysets:
            one = checks.LossInstance(inst.q_fg, inst.q_bg, [ks], inst.tau_easy, inst.tau_hard)
            single.append(checks.tensor_loss(one))
        assert checks.tensor_loss(inst) == pytest.approx(np.mean(single), abs=1e-12)

    def test_per_proposal_queries(self):
        ks = keysets([[1, 0]], [], [[0, 1]], [])
        q1, q2 = SharedQueries(T(1, 0), T(0, 1), 1), SharedQueries(T(0, 1), T(1, 0), 1)
        out = query_sharing_loss([q1, q2], [ks, ks], 1.0, 1.0)
        a = query_sharing_loss(q1, [ks], 1.0, 1.0).total
        b = query_sharing_loss(q2, [ks], 1.0, 1.0).total
        assert float(out.total) == pytest.approx(float(a + b) / 2)

    def test_total_is_sum_of_terms(self):
        inst = checks.random_instance(np.random.default_rng(9))
        q = SharedQueries(T(*inst.q_fg), T(*inst.q_bg), 1)
        out = query_sharing_loss(q, checks._to_keysets(inst, torch.float64), inst.tau_easy, inst.tau_hard)
        parts = out.term_fg_easy + out.term_fg_hard + out.term_bg_easy + out.term_bg_hard
        assert float(out.total) == pytest.approx(float(parts), abs=1e-12)


def test_oracle_equivalence():
    assert checks.oracle_equivalence(n=100, seed=1) <= 1e-6


@pytest.mark.parametrize("query_gradient", ["stop", "flow"])
def test_gradient_fp32(query_gradient):
    assert checks.gradient_check(n=10, seed=2, query_gradient=query_gradient, dtype=torch.float32) <= 1e-3


def test_gradient_fp64():
    assert checks.gradient_check(n=10, seed=3, query_gradient="flow", dtype=torch.float64) <= 1e-6

