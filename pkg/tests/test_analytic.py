import math

import numpy as np
import pytest

from mslab import analytic as an
from mslab.autodiff import ContractError
from mslab.verify import brute_phi_ss, random_pair, theorem2_identities

FD = an.FiniteDistribution
RING = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


def uniform(atoms):
    atoms = np.asarray(atoms, dtype=np.float64)
    return FD(atoms, np.full(len(atoms), 1.0 / len(atoms)))


# --- FiniteDistribution -----------------------------------------------------


def test_distribution_invariants():
    with pytest.raises(ContractError):
        FD(np.array([[0.0, 0.0]]), np.array([0.9]))
    with pytest.raises(ContractError):
        FD(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.5, -0.5]))
    with pytest.raises(ContractError):
        FD(np.array([[0.0, 0.0], [0.0, 1e-12]]), np.array([0.5, 0.5]))


def test_from_atoms_merges_repeats():
    P = FD.from_atoms([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert len(P) == 2
    assert P.prob(np.array([[1.0, 0.0]]))[0] == pytest.approx(2 / 3)


# --- pushforwards -----------------------------------------------------------


def test_transformed_marginal_examples():
    P = FD.point_mass([1.0, 0.0])
    assert an.transformed_marginal(P, 1).same_as(P)
    assert an.transformed_marginal(P, 2).same_as(FD.point_mass([0.0, 1.0]))
    R = uniform(RING)
    for k in range(1, 5):
        assert an.transformed_marginal(R, k).same_as(R)


def test_mixture_over_transforms_examples():
    origin = FD.point_mass([0.0, 0.0])
    assert an.mixture_over_transforms(origin).same_as(origin)
    assert an.mixture_over_transforms(FD.point_mass([1.0, 0.0])).same_as(uniform(RING))
    # uniform over {(1,0),(0,1)}: every orbit atom gets 2 * (1/2) * (1/4)
    assert an.mixture_over_transforms(uniform(RING[:2])).same_as(uniform(RING))


# --- optimal classifiers ----------------------------------------------------


def test_ss_rotation_invariant_rows_are_uniform():
    np.testing.assert_allclose(an.optimal_classifier_ss(uniform(RING)).table, 0.25)


def test_ss_point_mass_row():
    C = an.optimal_classifier_ss(FD.point_mass([1.0, 0.0]))
    np.testing.assert_array_equal(C.row([0.0, 1.0]), [0, 1, 0, 0])


def test_ss_half_orbit_row():
    C = an.optimal_classifier_ss(uniform(RING[:2]))
    np.testing.assert_allclose(C.row([0.0, 1.0]), [0.5, 0.5, 0, 0])


def test_ms_equal_invariant_row():
    R = uniform(RING)
    np.testing.assert_allclose(an.optimal_classifier_ms(R, R).table, [[1 / 8] * 4 + [1 / 2]] * 4)


def test_ms_fake_only_and_real_only_atoms():
    P_d = FD.point_mass([1.0, 0.0])
    P_g = FD.point_mass([2.0, 0.0])
    C = an.optimal_classifier_ms(P_d, P_g)
    np.testing.assert_array_equal(C.row([2.0, 0.0]), [0, 0, 0, 0, 1])
    np.testing.assert_array_equal(C.row([0.0, 1.0]), [0, 1, 0, 0, 0])


def test_ms_ratio_relation():
    # C_k = (p_d^T / p_g^T) * posterior_k * C_{K+1} wherever both mixtures are positive
    rng = np.random.default_rng(4)
    for _ in range(20):
        P_g, P_d = random_pair(rng)
        C = an.optimal_classifier_ms(P_d, P_g)
        prof_d = an.rotation_profile(P_d, C.atoms)
        prof_g = an.rotation_profile(P_g, C.atoms)
        sd, sg = prof_d.sum(1), prof_g.sum(1)
        both = (sd > 0) & (sg > 0)
        sd, sg, prof_d = sd[both], sg[both], prof_d[both]
        lhs = C.table[both, :4]
        rhs = (sd / sg)[:, None] * (prof_d / sd[:, None]) * C.table[both, 4:5]
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)


# --- value functions --------------------------------------------------------


def test_phi_ss_loophole_value_is_zero():
    P_d = uniform([[1.0, 0.0], [2.0, 0.0]])
    C = an.optimal_classifier_ss(P_d)
    assert an.phi_ss_value(FD.point_mass([1.0, 0.0]), C).value == 0.0


def test_phi_ss_uniform_rows_give_log_quarter():
    R = uniform(RING)
    assert an.phi_ss_value(R, an.optimal_classifier_ss(R)).value == pytest.approx(math.log(0.25))


def test_phi_ss_half_orbit_matches_enumeration():
    P = uniform(RING[:2])
    assert an.phi_ss_value(P, an.optimal_classifier_ss(P)).value == pytest.approx(brute_phi_ss(P, P), abs=1e-15)
    # by hand: both atoms sit in orbits where the true rotation has posterior 1/2
    assert brute_phi_ss(P, P) == pytest.approx(math.log(0.5))


def test_phi_ss_uncovered_support_is_minus_inf():
    C = an.optimal_classifier_ss(FD.point_mass([1.0, 0.0]))
    res = an.phi_ss_value(FD.point_mass([5.0, 5.0]), C)
    assert res.value == -math.inf
    assert len(res.uncovered) == 4


def test_kl_examples():
    P = FD(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0.5, 0.5]))
    Q = FD(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0.25, 0.75]))
    assert an.kl_divergence(P, P) == 0.0
    assert an.kl_divergence(P, Q) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3))
    assert an.kl_divergence(FD.point_mass([9.0, 9.0]), Q) == math.inf


def test_kl_rotation_invariance_is_exact():
    rng = np.random.default_rng(0)
    for _ in range(30):
        P_g, P_d = random_pair(rng)
        base = an.kl_divergence(P_g, P_d)
        for k in range(1, 5):
            assert an.kl_divergence(an.transformed_marginal(P_g, k), an.transformed_marginal(P_d, k)) == base


def test_phi_ms_value_examples():
    P = uniform([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]])
    dec = an.phi_ms_value(P, P)
    assert dec.kl_term == 0.0
    assert dec.total == pytest.approx(an.phi_ss_value(P, an.optimal_classifier_ss(P)).value)
    point = an.phi_ms_value(FD.point_mass([1.0, 0.0]), P)
    assert point.kl_term > 0 and point.total < 0.0


def test_phi_ms_support_violation_reports_infinite_kl():
    dec = an.phi_ms_value(FD.point_mass([7.0, 7.0]), uniform(RING))
    assert dec.kl_term == math.inf and dec.total == -math.inf


def test_theorem2_identities_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        P_g, P_d = random_pair(rng)
        res = theorem2_identities(P_g, P_d)
        for key, v in res.items():
            assert v <= 1e-10, (key, v)


def test_averaged_form_is_a_strict_lower_bound_when_posteriors_differ():
    # generator sits on one orbit point, data on the other: the rotation posteriors disagree
    P_d = uniform(RING[:2])
    P_g = FD(RING[:2], np.array([0.9, 0.1]))
    dec = an.phi_ms_value(P_g, P_d)
    direct = an.phi_ms_direct(P_g, an.optimal_classifier_ms(P_d, P_g))
    assert dec.total < direct - 1e-3
    assert direct == pytest.approx(-an.mixture_kl(P_g, P_d) + dec.residual_term, abs=1e-12)


def test_values_are_nonpositive():
    rng = np.random.default_rng(2)
    for _ in range(30):
        P_g, P_d = random_pair(rng)
        assert an.phi_ss_value(P_g, an.optimal_classifier_ss(P_d)).value <= 0
        assert an.phi_ms_value(P_g, P_d).total <= 0


# --- the loophole -----------------------------------------------------------


def test_loophole_two_points():
    P_d = uniform([[1.0, 0.0], [2.0, 0.0]])
    collapsed, cert = an.loophole_construct(P_d)
    assert cert.holds
    assert cert.phi_collapsed == 0.0
    assert cert.kl == pytest.approx(math.log(2))
    assert cert.ms_data > cert.ms_collapsed
    assert len(collapsed) == 1


def test_loophole_not_found_for_invariant_data():
    collapsed, cert = an.loophole_construct(uniform(RING))
    assert collapsed is None and not cert.found


def test_loophole_single_atom_is_degenerate():
    P = FD.point_mass([1.0, 0.0])
    collapsed, cert = an.loophole_construct(P)
    assert collapsed.same_as(P)
    assert cert.kl == 0.0 and cert.degenerate and not cert.holds


def test_ms_prefers_data_whenever_two_disjoint_orbits_exist():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(200):
        P_d = an.FiniteDistribution(*_random_support(rng))
        if len(an.disjoint_orbit_atoms(P_d)) < 2:
            continue
        collapsed, cert = an.loophole_construct(P_d)
        assert cert.phi_collapsed >= cert.phi_data
        assert cert.ms_data > cert.ms_collapsed
        checked += 1
    assert checked > 20


def _random_support(rng):
    from mslab.verify import random_distribution
    P = random_distribution(rng, max_atoms=6, lattice=4)
    return P.support, P.probs
