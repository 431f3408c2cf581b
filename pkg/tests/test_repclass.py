import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import mesh_1d, synthetic_kl
from oracles import gamma_quantile_bisect
from spdfield import matalg, repclass
from spdfield.errors import (IndefiniteResultError, InvalidInputError,
                             NotPositiveDefiniteError, SaturationError)
from spdfield.klpce import ChaosBasis, eta_from_xi, identity_coeffs
from spdfield.repclass import (NormalizationField, Representation, SquashFunction,
                               bound_chain, bounds, denormalize_K0, h_apm, h_apm_inv,
                               normalize_K)

# arbitrary-precision reference values (bisection in 40-digit arithmetic)
S1 = 0.5 / math.sqrt(2.0)
H_APM_REF = [(0.3, 1.383060940576467932), (-0.5, 0.39970258395377334393),
             (1.2, 3.5995588927853369412), (-2.0, 0.0052064943003263114363),
             (4.0, 19.673998452197825812)]
H_APM_N3_REF = [(0.25, 1, 1.0781951306848571289), (-0.4, 2, 0.25149195105114049431)]
GAMMA_P_REF = [(2.5, 1.7, 0.36143007689620490988), (30.0, 35.0, 0.82295454789994030328)]
GAMMA_Q_REF = [(0.5, 12.0, 9.6335700864309458845e-7)]

APM3 = SquashFunction.apm(3, 0.7)


class TestIncompleteGamma:
    @pytest.mark.parametrize("a,x,ref", GAMMA_P_REF)
    def test_lower(self, a, x, ref):
        p, q = repclass.regularized_gamma(a, x)
        assert p == pytest.approx(ref, rel=1e-13)
        assert p + q == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("a,x,ref", GAMMA_Q_REF)
    def test_upper_tail(self, a, x, ref):
        assert repclass.regularized_gamma(a, x)[1] == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("a", [0.7, 2.0, 5.5, 40.0])
    @pytest.mark.parametrize("u", [1e-8, 0.05, 0.5, 0.93])
    def test_quantile_vs_bisection(self, a, u):
        for upper in (False, True):
            x = repclass.gamma_quantile(a, u, upper)
            ref = gamma_quantile_bisect(a, u, upper)
            assert x == pytest.approx(ref, rel=1e-10)


class TestSquash:
    @pytest.mark.parametrize("g,ref", H_APM_REF)
    def test_reference_values(self, g, ref):
        assert float(h_apm(g, 1.0 / (2 * S1 * S1), S1)) == pytest.approx(ref, rel=1e-11)

    @pytest.mark.parametrize("g,j,ref", H_APM_N3_REF)
    def test_reference_values_n3(self, g, j, ref):
        sq = SquashFunction.apm(3, 0.8)
        assert float(sq.h(g, j)) == pytest.approx(ref, rel=1e-11)

    def test_parameters(self):
        sq = SquashFunction.apm(2, 0.5)
        s = 0.5 / math.sqrt(3)
        assert sq.s == pytest.approx(s)
        np.testing.assert_allclose(sq.a, [1 / (2 * s * s), 1 / (2 * s * s) - 0.5])

    def test_dispersion_domain(self):
        with pytest.raises(InvalidInputError):
            SquashFunction.apm(2, math.sqrt(3.0))
        with pytest.raises(InvalidInputError):
            SquashFunction.apm(3, 0.0)
        SquashFunction.apm(1, 5.0)

    def test_saturation(self):
        sq = SquashFunction.apm(2, 0.5)
        with pytest.raises(SaturationError):
            sq.h(40 * sq.s, 0)
        with pytest.raises(SaturationError):
            sq.h(-40 * sq.s, 0)

    @pytest.mark.parametrize("maker", [lambda: APM3,
                                       lambda: SquashFunction.softabs([1.0, 0.5, 2.0])])
    def test_monotone_and_certificate(self, maker):
        sq = maker()
        lim = 30 * (sq.s or 1.0)
        g = np.linspace(-lim, lim, 2001)
        for j in range(sq.n):
            v = sq.h(g, j)
            assert np.all(np.diff(v) > 0) and np.all(v > 0)
            assert np.all(v <= sq.c_a[j] + sq.c_h * g * g)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-25.0, 25.0), st.integers(0, 2))
    def test_inverse_apm(self, w, j):
        sq = APM3
        g = w * sq.s
        assert float(sq.h_inv(sq.h(g, j), j)) == pytest.approx(g, abs=1e-8)

    @given(st.floats(-1e3, 1e3))
    def test_inverse_softabs(self, g):
        sq = SquashFunction.softabs([2.0])
        assert float(sq.h_inv(sq.h(g, 0), 0)) == pytest.approx(g, abs=1e-8, rel=1e-10)

    def test_h_inv_function_pair(self):
        a, s = 4.0, S1
        g = np.array([-1.0, 0.0, 0.7])
        np.testing.assert_allclose(h_apm_inv(h_apm(g, a, s), a, s), g, atol=1e-10)


def sym_strategy(n, bound):
    return st.lists(st.floats(-bound, bound), min_size=matalg.n_sym(n),
                    max_size=matalg.n_sym(n)).map(lambda v: matalg.vec_sym(np.array(v), n))


class TestRepresentation:
    def test_exponential_zero(self):
        np.testing.assert_array_equal(Representation.exponential().forward(np.zeros((3, 3))),
                                      np.eye(3))

    def test_square_softabs_zero(self):
        rep = Representation.square(SquashFunction.softabs([1.0, 1.0]))
        np.testing.assert_allclose(rep.forward(np.zeros((2, 2))), np.eye(2), atol=1e-15)

    def test_square_hand_expansion(self):
        sq = SquashFunction.softabs([1.5, 0.7])
        rep = Representation.square(sq)
        c = 0.8
        h1, h2 = float(sq.h(0.0, 0)), float(sq.h(0.0, 1))
        ref = np.array([[h1, c * math.sqrt(h1)], [c * math.sqrt(h1), h2 + c * c]])
        np.testing.assert_allclose(rep.forward(np.array([[0.0, c], [c, 0.0]])), ref, rtol=1e-14)

    def test_inverse_trivial(self):
        assert np.abs(Representation.exponential().inverse(np.eye(2))).max() == 0
        rep = Representation.square(SquashFunction.softabs([1.0, 1.0]))
        np.testing.assert_allclose(rep.inverse(np.eye(2)), 0.0, atol=1e-15)

    def test_inverse_rejects_indefinite(self):
        rep = Representation.square(SquashFunction.softabs([1.0, 1.0]))
        with pytest.raises(NotPositiveDefiniteError):
            rep.inverse(np.diag([1.0, -2.0]))

    @settings(max_examples=40, deadline=None)
    @given(sym_strategy(3, 1.5))
    def test_round_trip_exponential(self, g):
        rep = Representation.exponential()
        np.testing.assert_allclose(rep.inverse(rep.forward(g)), g, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(sym_strategy(3, 1.5))
    def test_round_trip_square_apm(self, g):
        rep = Representation.square(APM3)
        k0 = rep.forward(g)
        matalg.chol_upper(k0)
        np.testing.assert_allclose(rep.inverse(k0), g, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(sym_strategy(2, 5.0))
    def test_round_trip_square_softabs(self, g):
        rep = Representation.square(SquashFunction.softabs([1.0, 2.0]))
        np.testing.assert_allclose(rep.inverse(rep.forward(g)), g, atol=1e-8)

    def test_squash_dimension_mismatch(self):
        rep = Representation.square(SquashFunction.softabs([1.0, 2.0]))
        with pytest.raises(Exception):
            rep.forward(np.zeros((3, 3)))


class TestNormalization:
    def test_identity_input(self, rng):
        a = rng.normal(size=(4, 3, 3))
        kl = a @ a.transpose(0, 2, 1) + np.eye(3)
        norm = NormalizationField(kl, eps=0.05)
        np.testing.assert_allclose(normalize_K(norm, np.eye(3)), kl, rtol=1e-13)

    def test_limit_of_vanishing_k0(self):
        norm = NormalizationField.constant(np.eye(2), 1, eps=0.1)
        k = normalize_K(norm, np.zeros((2, 2)), 0)
        np.testing.assert_allclose(k, np.eye(2) / 11.0, rtol=1e-14)
        assert norm.k_eps == pytest.approx(1.0 / 11.0)
        assert matalg.eigvalsh(k)[0] == pytest.approx(norm.k_eps, rel=1e-14)

    def test_denormalize_inverse(self, rng):
        a = rng.normal(size=(5, 2, 2))
        kl = a @ a.transpose(0, 2, 1) + np.eye(2)
        norm = NormalizationField(kl)
        np.testing.assert_allclose(denormalize_K0(norm, kl), np.broadcast_to(np.eye(2), (5, 2, 2)),
                                   atol=1e-12)
        b = rng.normal(size=(5, 2, 2))
        k0 = b @ b.transpose(0, 2, 1) + 0.1 * np.eye(2)
        np.testing.assert_allclose(denormalize_K0(norm, normalize_K(norm, k0)), k0, atol=1e-11)

    def test_denormalize_violation(self):
        norm = NormalizationField.constant(np.eye(2), 3, eps=0.1)
        k = np.broadcast_to(np.eye(2), (3, 2, 2)).copy()
        k[1] = np.diag([1.0, 0.5 * norm.k_eps])
        with pytest.raises(IndefiniteResultError) as info:
            denormalize_K0(norm, k)
        assert info.value.index == 1

    def test_constants(self):
        kl = np.stack([np.diag([1.0, 4.0]), np.diag([2.0, 3.0])])
        norm = NormalizationField(kl)
        assert norm.k0 == 1.0
        assert norm.k1_tilde == pytest.approx(4.0 * math.sqrt(2))
        assert np.all(np.trace(kl, axis1=1, axis2=2) <= norm.k1)
        with pytest.raises(InvalidInputError):
            NormalizationField(kl, k0=1.5)

    def test_restrict_keeps_constants(self):
        kl = np.stack([np.diag([1.0, 4.0]), np.diag([2.0, 3.0])])
        norm = NormalizationField(kl).restrict([[0.5, 0.5], [0.25, 0.75]])
        assert norm.k0 == 1.0 and norm.n_points == 2


class TestBounds:
    def test_empty_sum(self):
        mesh = mesh_1d(10)
        kl, _ = synthetic_kl(mesh, 2, 2, mean_amp=0.0)
        kl0 = kl.truncate(0)
        kl0.mean[:] = 0.0
        sq = SquashFunction.softabs([1.0, 1.0])
        norm = NormalizationField.constant(np.eye(2), mesh.n_nodes)
        rep = bounds(Representation.square(sq), norm, kl0, np.zeros((1, 0)))
        assert rep.delta[0] == 0.0
        expected = norm.k1 * (math.sqrt(2) * norm.eps + sq.gamma0) / (1 + norm.eps)
        assert rep.gamma[0] == pytest.approx(expected)

    @pytest.mark.parametrize("kind", ["exponential", "square"])
    def test_sweep(self, kind, rng):
        n = 2
        mesh = mesh_1d(20)
        kl, _ = synthetic_kl(mesh, n, 3)
        rep = (Representation.exponential() if kind == "exponential"
               else Representation.square(SquashFunction.apm(n, 0.6)))
        a = rng.normal(size=(mesh.n_nodes, n, n))
        norm = NormalizationField(a @ a.transpose(0, 2, 1) + np.eye(n))
        chaos = ChaosBasis(3, 2)
        y = identity_coeffs(chaos.size, 3)
        xi = rng.normal(size=(200, 3))
        eta = eta_from_xi(y, chaos, xi)
        np.testing.assert_allclose(eta, xi, atol=1e-15)
        g_vec = kl.realize(eta)
        g = matalg.vec_sym(g_vec, n)
        k0 = rep.forward(g)
        k = normalize_K(norm, k0)
        br = bounds(rep, norm, kl, eta, kl.pointwise_norm(g_vec).max(axis=1))
        assert np.all(br.beta <= br.gamma * (1 + 1e-12))
        kn = np.linalg.norm(k, axis=(-2, -1)).max(axis=1)
        assert np.all(kn <= br.beta * (1 + 1e-12))
        for label, (lhs, rhs) in bound_chain(rep, norm, g, k0, k).items():
            slack = 1e-12 if label == "lower" else 1e-12 * np.abs(rhs)
            assert np.all(lhs <= rhs + slack), label
