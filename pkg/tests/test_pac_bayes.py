import json
import math
from fractions import Fraction

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invlab.groups import block_permutation_group, sign_flip, swap, symmetric_group, trivial
from invlab.models import AverageOverGroup, Dense, ModelSpec, ParamVector, init_params
from invlab.pac_bayes import (BETA_GRID, GRID_PENALTY, PRIOR_STD_GRID, BoundDomainError, BoundInputs,
                              BoundReport, GaussianWeightDistribution as Gaussian,
                              InconsistentLabelsError, RiskSummary, assemble_report,
                              averaged_coordinate_classes, bound_baseline, bound_da, bound_fa,
                              boolean_kl, catoni_bound, catoni_bound_beta, effective_kl,
                              fit_posterior, kl_diag_gaussian, kl_pushforward_discrete,
                              kl_pushforward_gaussian, laplace_transform_estimate,
                              linear_symmetrization_map, optimize_stochastic_bound, partition_kl,
                              stochastic_risk, symmetrization_gap_linear, symmetrized_linear_kl)
from invlab.experiments import enumerate_boolean_kl
from invlab.symmetrization import SymmetrizationMode

REPORT_SCHEMA = {
    "type": "object",
    "required": ["mode", "n", "delta", "beta", "risk", "kl", "bound"],
    "properties": {
        "mode": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "risk": {"type": "object", "required": ["value", "stderr", "draws"]},
        "kl": {"type": "object",
               "required": ["value", "unit", "variance_term", "mean_term", "union_bound_penalty"]},
        "bound": {"type": "number"},
    },
}


# -- Catoni ------------------------------------------------------------------------


def test_catoni_vanishes_without_risk_kl_or_confidence_cost():
    for beta in (0.1, 1.0, 7.0):
        for n in (1, 10, 1000):
            assert catoni_bound(0.0, 0.0, BoundInputs(n, 1.0, beta)) == 0.0


def test_catoni_approaches_one_for_large_beta():
    vals = [catoni_bound(0.5, 0.0, BoundInputs(100, 1.0, b)) for b in (10.0, 30.0, 60.0)]
    assert all(v < 1.0 for v in vals)
    assert vals[-1] > 1.0 - 1e-12


def test_catoni_matches_formula():
    r, kl, n, delta, beta = 0.1, 12.0, 500, 0.05, 2.0
    want = (1 - math.exp(-beta * r - (kl + math.log(1 / delta)) / n)) / (1 - math.exp(-beta))
    assert catoni_bound(r, kl, BoundInputs(n, delta, beta)) == pytest.approx(want, rel=1e-14)


def test_catoni_orders_reference_kl_values():
    inputs = BoundInputs(4000, 0.05, 1.0)
    b = [catoni_bound(0.1, kl, inputs) for kl in (944, 1992, 24957)]
    assert b[0] < b[1] < b[2]


def test_beta_grid_and_optimization():
    assert BETA_GRID[0] == 2.0**-6 and BETA_GRID[-1] == 2.0**6
    assert np.allclose(np.diff(np.log2(BETA_GRID)), 0.25)
    inputs = BoundInputs(300, 0.05)
    value, beta = catoni_bound_beta(0.2, 5.0, inputs)
    assert beta in BETA_GRID
    assert value == min(catoni_bound(0.2, 5.0, BoundInputs(300, 0.05, float(b))) for b in BETA_GRID)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 500), st.floats(0, 500), st.floats(0.01, 50))
def test_catoni_is_monotone(r1, r2, k1, k2, beta):
    inputs = BoundInputs(200, 0.1, beta)
    lo_r, hi_r = sorted((r1, r2))
    lo_k, hi_k = sorted((k1, k2))
    assert catoni_bound(lo_r, lo_k, inputs) <= catoni_bound(hi_r, hi_k, inputs) + 1e-15


def test_bound_inputs_are_validated():
    for bad in [dict(n=0), dict(n=5, delta=0.0), dict(n=5, delta=1.5), dict(n=5, beta=-1.0),
                dict(n=5, loss="squared")]:
        with pytest.raises(BoundDomainError):
            BoundInputs(**bad)
    with pytest.raises(BoundDomainError):
        catoni_bound(1.5, 0.0, BoundInputs(5))
    with pytest.raises(BoundDomainError):
        catoni_bound(0.5, -1.0, BoundInputs(5))


# -- Gaussian KLs ------------------------------------------------------------------


def test_gaussian_kl_matches_monte_carlo():
    mu_q, mu_p = np.array([1.0, 1.0]), np.zeros(2)
    kl = kl_diag_gaussian((mu_q, 1.0), (mu_p, 1.0))
    assert kl.value == pytest.approx(1.0)
    assert kl.variance_term == 0.0 and kl.mean_term == pytest.approx(1.0)
    w = mu_q + np.random.default_rng(0).standard_normal((1_000_000, 2))
    log_ratio = -0.5 * ((w - mu_q) ** 2).sum(1) + 0.5 * ((w - mu_p) ** 2).sum(1)
    assert log_ratio.mean() == pytest.approx(1.0, abs=0.01)


def test_gaussian_kl_basic_properties():
    rng = np.random.default_rng(1)
    mu, s = rng.standard_normal(5), rng.uniform(0.5, 2.0, 5)
    assert kl_diag_gaussian((mu, s), (mu, s)).value == 0.0
    a = kl_diag_gaussian((mu, s), (np.zeros(5), 2 * s)).variance_term
    b = kl_diag_gaussian((mu, 3 * s), (np.zeros(5), 6 * s)).variance_term
    assert a == pytest.approx(b, rel=1e-12)
    with pytest.raises(BoundDomainError):
        Gaussian(mu, 0.0)


def test_pushforward_through_identity_is_plain_kl():
    rng = np.random.default_rng(2)
    Q = (rng.standard_normal(4), rng.uniform(0.5, 2, 4))
    P = (rng.standard_normal(4), rng.uniform(0.5, 2, 4))
    assert kl_pushforward_gaussian(Q, P, np.eye(4)).value == pytest.approx(kl_diag_gaussian(Q, P).value,
                                                                           rel=1e-10)


def test_pushforward_through_an_ill_conditioned_invertible_map_is_plain_kl():
    rng = np.random.default_rng(12)
    Q = (rng.standard_normal(5), rng.uniform(0.2, 3, 5))
    P = (rng.standard_normal(5), rng.uniform(0.2, 3, 5))
    U, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    A = U @ np.diag([1.0, 1e-1, 1e-2, 1e-3, 1e-4])
    assert kl_pushforward_gaussian(Q, P, A).value == pytest.approx(kl_diag_gaussian(Q, P).value, rel=1e-12)


def test_swap_worked_case():
    Q, P, G = (np.array([2.0, 0.0]), 1.0), (np.zeros(2), 1.0), swap()
    assert kl_diag_gaussian(Q, P).value == pytest.approx(2.0)
    assert kl_pushforward_gaussian(Q, P, linear_symmetrization_map(G)).value == pytest.approx(1.0, abs=1e-12)
    assert symmetrized_linear_kl(Q, P, G).value == pytest.approx(1.0, abs=1e-12)
    assert symmetrization_gap_linear(Q, P, G) == pytest.approx(1.0, abs=1e-9)


def test_gap_for_invariant_prior_mean_is_cauchy_schwarz_slack():
    rng = np.random.default_rng(3)
    k, sigma = 5, 0.7
    mu, w = rng.standard_normal(k), np.full(k, 0.4)
    gap = symmetrization_gap_linear((mu, sigma), (w, sigma), symmetric_group(k))
    want = (np.sum((mu - w) ** 2) - k * (mu.mean() - w.mean()) ** 2) / (2 * sigma**2)
    assert gap == pytest.approx(want, rel=1e-10)
    assert symmetrization_gap_linear((w, sigma), (w, sigma), symmetric_group(k)) == pytest.approx(0.0, abs=1e-12)


def test_pushforward_kl_never_exceeds_full_kl():
    rng = np.random.default_rng(4)
    for _ in range(200):
        d, m = rng.integers(1, 6), rng.integers(1, 6)
        Q = (rng.standard_normal(d), rng.uniform(0.2, 3, d))
        P = (rng.standard_normal(d), rng.uniform(0.2, 3, d))
        A = rng.standard_normal((m, d)) * (rng.random((m, d)) < 0.7)
        assert kl_pushforward_gaussian(Q, P, A).value <= kl_diag_gaussian(Q, P).value + 1e-9


def test_pushforward_of_zero_map_is_zero():
    assert kl_pushforward_gaussian((np.ones(3), 1.0), (np.zeros(3), 2.0), np.zeros((2, 3))).value == 0.0


def test_kl_chain_along_subgroup_tower_is_monotone():
    # averaging over a larger subgroup factors through the smaller one
    tower = [trivial(4), block_permutation_group([2, 1, 1]), block_permutation_group([2, 2]),
             symmetric_group(4)]
    rng = np.random.default_rng(5)
    for _ in range(100):
        Q = (rng.standard_normal(4), rng.uniform(0.3, 1.5, 4))
        P = (rng.standard_normal(4), rng.uniform(0.3, 1.5, 4))
        kls = [symmetrized_linear_kl(Q, P, G).value for G in tower]
        assert np.all(np.diff(kls) <= 1e-9)


def test_kl_along_nested_element_sets_can_increase():
    # a documented counterexample to monotonicity along arbitrary nested sets
    G = symmetric_group(3)
    Q, P = (np.array([2.0, 0.0, 0.0]), 1.0), (np.zeros(3), 1.0)
    chain = [[G.element(n) for n in names] for names in (["e"], ["e", "(12)"], ["e", "(12)", "(23)"])]
    kls = [symmetrized_linear_kl(Q, P, G, s).value for s in chain]
    assert kls == pytest.approx([2.0, 1.0, 5.0 / 3.0], abs=1e-12)


def test_element_chains_stay_below_full_kl_and_end_at_the_symmetrized_kl():
    G = symmetric_group(3)
    rng = np.random.default_rng(6)
    for _ in range(100):
        Q = (rng.standard_normal(3), rng.uniform(0.3, 1.5, 3))
        P = (rng.standard_normal(3), rng.uniform(0.3, 1.5, 3))
        order = rng.permutation(6)
        kls = [symmetrized_linear_kl(Q, P, G, order[:m]).value for m in range(1, 7)]
        assert max(kls) <= kl_diag_gaussian(Q, P).value + 1e-9
        assert kls[0] == pytest.approx(kl_diag_gaussian(Q, P).value, rel=1e-9)
        assert kls[-1] == pytest.approx(symmetrized_linear_kl(Q, P, G).value, abs=1e-9)


def test_partition_kl_equals_pushforward_kl():
    G = block_permutation_group([2, 3])
    rng = np.random.default_rng(7)
    labels = G.coordinate_orbits()
    for _ in range(20):
        mq, mp = rng.standard_normal(5), rng.standard_normal(5)
        s, sigma = rng.uniform(0.3, 2, 5), rng.uniform(0.3, 2, 5)
        part = partition_kl(mq, s, mp, sigma, labels)[0]
        push = kl_pushforward_gaussian((mq, s), (mp, sigma), G.averaging_matrix())
        assert part.value == pytest.approx(push.value, rel=1e-9)


def test_partition_kl_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    labels = np.array([0, 0, 1, 1, 1, 2])
    mq, mp = rng.standard_normal(6), rng.standard_normal(6)
    s, sigma = rng.uniform(0.3, 2, 6), rng.uniform(0.3, 2, 6)
    _, g_mu, g_s, g_sigma = partition_kl(mq, s, mp, sigma, labels)
    f = lambda a, b, c: partition_kl(a, b, mp, c, labels)[0].value
    h = 1e-6
    for j in range(6):
        e = np.eye(6)[j] * h
        assert g_mu[j] == pytest.approx((f(mq + e, s, sigma) - f(mq - e, s, sigma)) / (2 * h), rel=1e-5, abs=1e-8)
        assert g_s[j] == pytest.approx((f(mq, s + e, sigma) - f(mq, s - e, sigma)) / (2 * h), rel=1e-5, abs=1e-8)
        assert g_sigma[j] == pytest.approx((f(mq, s, sigma + e) - f(mq, s, sigma - e)) / (2 * h), rel=1e-5, abs=1e-8)


def test_effective_kl_uses_the_averaged_coordinates():
    G = symmetric_group(3)
    fa = ModelSpec(3, (AverageOverGroup(G), Dense(2)))
    plain = ModelSpec(3, (Dense(2),))
    mean = init_params(fa, np.random.default_rng(9))
    Q = Gaussian(mean, 0.05)
    P = Gaussian(mean.with_values(np.zeros(fa.n_params)), 0.1)
    labels = averaged_coordinate_classes(fa)
    assert labels is not None and len(np.unique(labels)) == 2 + 2  # two weight classes, two biases
    assert averaged_coordinate_classes(plain) is None
    assert effective_kl(Q, P).value < kl_diag_gaussian(Q, P).value
    Qp = Gaussian(ParamVector(mean.values, plain), 0.05)
    Pp = Gaussian(ParamVector(np.zeros(plain.n_params), plain), 0.1)
    assert effective_kl(Qp, Pp).value == kl_diag_gaussian(Qp, Pp).value


# -- discrete and Boolean KLs -------------------------------------------------------


def test_discrete_pushforward_worked_case():
    mu = np.full(4, 0.25)
    nu = np.array([0.5, 0.25, 0.125, 0.125])
    before, after, gap = kl_pushforward_discrete(mu, nu, ["ab", "ab", "cd", "cd"])
    exact_before = sum(Fraction(1, 4) * math.log(Fraction(1, 4) / q) for q in
                       (Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 8)))
    exact_after = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert before == pytest.approx(exact_before, abs=1e-15)
    assert after == pytest.approx(exact_after, abs=1e-15)
    assert gap > 0 and before == pytest.approx(after + gap, abs=1e-12)


def test_discrete_pushforward_extreme_maps():
    rng = np.random.default_rng(10)
    mu, nu = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    before, after, gap = kl_pushforward_discrete(mu, nu, range(6))
    assert gap == pytest.approx(0.0, abs=1e-15) and after == pytest.approx(before)
    before, after, gap = kl_pushforward_discrete(mu, nu, lambda i: 0)
    assert after == 0.0 and gap == pytest.approx(before, abs=1e-12)
    with pytest.raises(BoundDomainError):
        kl_pushforward_discrete([0.5, 0.5], [1.0, 0.0], [0, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_discrete_kl_decomposes(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    mu, nu = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    psi = rng.integers(int(rng.integers(1, n + 1)), size=n)
    before, after, gap = kl_pushforward_discrete(mu, nu, psi)
    assert before == pytest.approx(after + gap, abs=1e-12)
    assert gap >= -1e-12


def test_boolean_kl_examples():
    assert boolean_kl([], 3) == (0, 0, 0)
    pairs = [((0, 1), 1), ((1, 0), 1)]
    assert boolean_kl(pairs, 2) == (2, 1, 1)
    assert enumerate_boolean_kl(pairs, 2) == (2, 1)
    with pytest.raises(InconsistentLabelsError) as raw:
        boolean_kl([((0, 1), 1), ((0, 1), 0)], 2)
    assert raw.value.function_class == "raw"
    with pytest.raises(InconsistentLabelsError) as inv:
        boolean_kl([((0, 1), 1), ((1, 0), 0)], 2)
    assert inv.value.function_class == "invariant"


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 3), st.integers(0, 2**32 - 1))
def test_boolean_kl_matches_enumeration(k, seed):
    rng = np.random.default_rng(seed)
    rule = rng.integers(2, size=k + 1)  # a label per number of ones keeps data consistent
    n = int(rng.integers(0, 10))
    X = rng.integers(2, size=(n, k))
    pairs = [(tuple(x), int(rule[x.sum()])) for x in X]
    bits = boolean_kl(pairs, k)
    assert (bits.kl_bits, bits.kl_inv_bits) == enumerate_boolean_kl(pairs, k)
    assert bits.kl_bits <= n


# -- stochastic bounds ------------------------------------------------------------------


def _linear_setup(seed=0, n=60):
    G = symmetric_group(3)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    y = (X.sum(1) > 0).astype(np.int64)
    spec = ModelSpec(3, (Dense(2, bias=False),))
    mean = ParamVector(np.tile([[-1.0, 1.0]], (3, 1)).ravel(), spec)
    return G, spec, mean, (X, y)


def test_invariant_point_mass_has_equal_plain_and_augmented_bounds():
    G, spec, mean, ds = _linear_setup()
    Q, P = Gaussian(mean, 1e-9), Gaussian(mean.with_values(np.zeros(6)), 0.1)
    inputs = BoundInputs(60, 0.05, mc_samples=5)
    b0 = bound_baseline(Q, P, ds, inputs, np.random.default_rng(0))
    bda = bound_da(Q, P, ds, G, inputs, np.random.default_rng(0))
    assert b0.risk.value == bda.risk.value
    assert b0.bound == bda.bound and b0.kl == bda.kl


def test_exact_and_exhaustive_mc_da_reports_agree():
    G, spec, mean, ds = _linear_setup()
    Q, P = Gaussian(mean, 0.8), Gaussian(mean.with_values(np.zeros(6)), 0.5)
    inputs = BoundInputs(60, 0.05, mc_samples=20)
    W = Q.sample(np.random.default_rng(1), 20)
    exact = bound_da(Q, P, ds, G, inputs, np.random.default_rng(2), weights=W)
    mc = bound_da(Q, P, ds, G, inputs, np.random.default_rng(2), estimator="exhaustive", weights=W)
    assert exact.risk.value == pytest.approx(mc.risk.value, abs=1e-15)
    assert exact.bound == pytest.approx(mc.bound, abs=1e-15)


def test_single_draw_da_risk_is_unbiased_for_exact_da_risk():
    G, spec, mean, ds = _linear_setup(n=20)
    Q = Gaussian(ParamVector(np.random.default_rng(3).standard_normal(6), spec), 0.5)
    W = Q.sample(np.random.default_rng(4), 10)
    exact = stochastic_risk(Q, ds, np.random.default_rng(5), 10, "augmented", G, weights=W).value
    vals = np.array([stochastic_risk(Q, ds, np.random.default_rng(s), 10, "augmented_mc", G, 1,
                                     weights=W).value for s in range(300)])
    assert abs(vals.mean() - exact) < 3 * vals.std(ddof=1) / np.sqrt(len(vals))


def test_fa_bound_uses_symmetrized_kl():
    G, _, _, ds = _linear_setup()
    spec = ModelSpec(3, (AverageOverGroup(G), Dense(2, bias=False)))
    mean = ParamVector(np.random.default_rng(6).standard_normal(6), spec)
    Q, P = Gaussian(mean, 0.05), Gaussian(mean.with_values(np.zeros(6)), 0.1)
    inputs = BoundInputs(60, 0.05, mc_samples=10)
    fa = bound_fa(Q, P, ds, inputs, np.random.default_rng(0))
    base = bound_baseline(Q, P, ds, inputs, np.random.default_rng(0))
    assert fa.kl.value < base.kl.value
    assert fa.risk == base.risk and fa.bound < base.bound


def test_report_json_roundtrip_and_schema():
    rep = assemble_report("baseline", BoundInputs(100, 0.05), RiskSummary(0.1, 0.01, 150),
                          kl_diag_gaussian((np.ones(3), 1.0), (np.zeros(3), 1.0)), GRID_PENALTY,
                          {"prior_std": 0.1})
    d = json.loads(rep.to_json())
    jsonschema.validate(d, REPORT_SCHEMA)
    assert d["kl"]["unit"] == "nats"
    assert d["kl"]["union_bound_penalty"] == pytest.approx(math.log(18))
    assert BoundReport.from_dict(d) == rep
    # the grid penalty spends delta / 18 on each prior scale
    assert rep.bound == pytest.approx(catoni_bound(0.1, 1.5, BoundInputs(100, 0.05 / 18)), rel=1e-12)


def test_prior_grid():
    assert len(PRIOR_STD_GRID) == 18
    assert PRIOR_STD_GRID[0] == 0.1
    assert np.allclose(PRIOR_STD_GRID[1:] / PRIOR_STD_GRID[:-1], 2**-0.5)


def test_posterior_fit_and_optimized_bound():
    G, spec, _, (X, y) = _linear_setup(n=200)
    trained = ParamVector(np.tile([[-2.0, 2.0]], (3, 1)).ravel(), spec)
    center = trained.with_values(np.zeros(6))
    Q, learned = fit_posterior(spec, trained, (X, y), center, np.random.default_rng(0))
    assert PRIOR_STD_GRID[-1] <= learned <= PRIOR_STD_GRID[0]
    assert np.all(Q.std > 0)
    rep = optimize_stochastic_bound(spec, trained, (X, y), BoundInputs(200, 0.05, mc_samples=50),
                                    center, np.random.default_rng(1))
    assert 0.0 < rep.bound < 1.0
    assert rep.union_bound_penalty == pytest.approx(GRID_PENALTY)
    assert rep.extra["prior_std"] in PRIOR_STD_GRID


def test_matched_posterior_and_prior_have_zero_kl():
    _, spec, mean, _ = _linear_setup()
    Q = Gaussian(mean, 0.05)
    assert kl_diag_gaussian(Q, Gaussian(mean, 0.05)).value == 0.0
    wider = [kl_diag_gaussian(Gaussian(mean, s), Gaussian(mean, 0.05)).variance_term
             for s in (0.05, 0.08, 0.12)]
    assert wider[0] == 0.0 and wider[0] < wider[1] < wider[2]


def test_laplace_estimate_edge_cases():
    G, spec, mean, ds = _linear_setup(n=30)
    P = Gaussian(mean.with_values(np.zeros(6)), 0.5)
    assert laplace_transform_estimate(P, ds, G, 0.0, 20, np.random.default_rng(0)).value == 1.0
    one = laplace_transform_estimate(P, ds, trivial(3), 2.0, 20, np.random.default_rng(0))
    assert one.value == pytest.approx(1.0, abs=1e-12) and not one.certified
    with pytest.raises(BoundDomainError):
        laplace_transform_estimate(P, ds, G, -1.0, 5, np.random.default_rng(0))


def test_laplace_estimate_on_sign_task_is_at_most_one():
    G = sign_flip(1)
    spec = ModelSpec(1, (AverageOverGroup(G, SymmetrizationMode("max_pool")), Dense(2)))
    X = np.random.default_rng(1).choice([-1.0, 1.0], size=(40, 1))
    y = np.ones(40, dtype=np.int64)
    P = Gaussian(ParamVector(np.zeros(spec.n_params), spec), 1.0)
    est = laplace_transform_estimate(P, (X, y), G, 1.0, 200, np.random.default_rng(2))
    assert est.value <= 1.0 + 3 * est.stderr
