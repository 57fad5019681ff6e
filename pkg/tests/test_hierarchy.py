import numpy as np
import pytest
from hypothesis import given, strategies as st

from metachain import oracle
from metachain.chain import PerturbedChain, ergodic_decomposition
from metachain.chains import chain_a, chain_b, random_chain, two_state
from metachain.committor import extract_order
from metachain.errors import ValidationError
from metachain.hierarchy import (
    asymptotic_stationary,
    build_hierarchy,
    check_approximation,
    class_masses,
    effective_chain,
    escape_value,
    exit_law,
    final_classes,
    reversible_chain,
    rescale,
    verify_metastable_set,
)
from metachain.perturb import ONE, pv

from conftest import idx

LADDER = (1e-2, 1e-3, 1e-4)


def fit(samples, chain):
    return extract_order(samples, [v.exp for v in chain.entries.values()], max_degree=4 * chain.n)


def without(chain, src, dst):
    i, j = chain.index(src), chain.index(dst)
    return PerturbedChain(chain.labels, {k: v for k, v in chain.entries.items() if k != (i, j)})


def scaled(chain, src, dst, factor):
    i, j = chain.index(src), chain.index(dst)
    entries = dict(chain.entries)
    v = entries[(i, j)]
    entries[(i, j)] = pv(v.coeff * factor, v.exp)
    return PerturbedChain(chain.labels, entries)


# effective chain ------------------------------------------------------------------------------------


@pytest.mark.parametrize("linked", [False, True])
def test_effective_chain_wells(linked):
    chain = chain_b(linked)
    p_hat = effective_chain(chain)
    assert p_hat.labels == ("x", "y", "z")
    x, y, z = (p_hat.index(s) for s in "xyz")
    assert p_hat.p(x, y) == pv(1, 1)
    assert p_hat.p(x, z) == pv(1, 2)


def test_effective_chain_wells_against_ladder(wells):
    dec = ergodic_decomposition(wells)
    p_hat = effective_chain(wells, dec)
    for (i, j), v in p_hat.entries.items():
        f = fit([(e, oracle.effective_entry(wells, e, dec, i, j)) for e in LADDER], wells)
        assert f.value.exp == v.exp
        assert f.value.coeff == pytest.approx(v.coeff, rel=0.02)


def test_effective_chain_two_state_is_identity(two_state):
    assert dict(effective_chain(two_state).entries) == dict(two_state.entries)


def test_effective_chain_needs_two_classes():
    chain = PerturbedChain.from_edges(["a", "b"], [("a", "b", 0.5, 0), ("b", "a", 0.5, 0)])
    with pytest.raises(ValidationError, match="already ergodic"):
        effective_chain(chain)


# reversible chain -----------------------------------------------------------------------------------------


def test_q_hat_two_state(two_state):
    q = reversible_chain(two_state)
    assert q[(0, 1)] == pv(1, 1)
    assert q[(1, 0)] == pv(1, 2)


def test_q_hat_wells_z_to_y(wells):
    dec = ergodic_decomposition(wells)
    q = reversible_chain(wells, dec)
    a, b = dec.class_of(wells.index("z")), dec.class_of(wells.index("y"))
    assert q[(a, b)].exp == 2
    f = fit([(e, oracle.q_hat_entry(wells, e, dec, a, b)) for e in LADDER], wells)
    assert f.value.exp == 2
    assert q[(a, b)].coeff == pytest.approx(f.value.coeff, rel=0.02)


def test_q_hat_symmetric_chain():
    chain = two_state(2, 2, 0.3, 0.3)
    q = reversible_chain(chain)
    assert q[(0, 1)] == q[(1, 0)]


# rescaled chain and exit law ----------------------------------------------------------------------------------


def test_rescale_two_state(two_state):
    p_check, T = rescale(effective_chain(two_state))
    assert T == pv(1, 1)
    assert p_check.p(0, 1) == ONE
    assert p_check.p(1, 0) == pv(1, 1)


def test_rescale_linked_second_scale(wells_linked):
    p_check, T = rescale(effective_chain(wells_linked))
    assert T == pv(4, 1)
    x, y, z = (p_check.index(s) for s in "xyz")
    assert p_check.p(y, x) == pv(0.25, 0) and p_check.p(y, z) == pv(0.25, 0)
    law = exit_law(p_check)
    assert law[(y, x)] == pv(0.5, 0) and law[(y, z)] == pv(0.5, 0)
    assert law[(x, y)] == ONE


def test_rescale_uniform():
    labels = ["a", "b", "c"]
    chain = PerturbedChain.from_edges(labels, [(s, t, 1, 2) for s in labels for t in labels if s != t])
    p_check, T = rescale(chain)
    assert T == pv(6, 2)
    assert all(v.exp == 0 for v in p_check.entries.values())
    assert sum(v.coeff for v in p_check.entries.values()) == pytest.approx(1.0)


def test_rescale_rejects_empty():
    with pytest.raises(ValidationError):
        rescale(PerturbedChain(["a"], {}))


# hierarchy ---------------------------------------------------------------------------------------------------------


def test_hierarchy_two_state(two_state):
    levels = build_hierarchy(two_state)
    assert len(levels) == 1
    # one class is left; at the eps scale x drains into y and is transient
    assert final_classes(two_state, levels) == [frozenset({"y"})]
    assert levels[0].time_scale == pv(1, 1)


def test_hierarchy_linked_merges_at_once(wells_linked):
    levels = build_hierarchy(wells_linked)
    assert [sorted(map(sorted, lv.basins)) for lv in levels] == [[["x"], ["y"], ["z"]]]
    assert final_classes(wells_linked, levels) == [frozenset({"x", "y", "z"})]


def test_hierarchy_plain_merges_in_two_steps(wells):
    levels = build_hierarchy(wells)
    assert len(levels) == 2
    assert sorted(map(sorted, levels[1].basins)) == [["x", "y"], ["z"]]
    first = levels[0].p_check
    x, y, z = (first.index(s) for s in "xyz")
    # at the first rescaled scale x <-> y is order one, z is linked at order eps
    assert first.p(x, y).exp == 0
    assert first.p(x, z) == pv(0.5, 1) and first.p(z, y) == pv(0.5, 1)
    assert first.p(z, x).is_zero
    assert final_classes(wells, levels) == [frozenset({"x", "y", "z"})]
    assert levels[1].cumulative_time_scale == levels[0].time_scale * levels[1].time_scale


def test_hierarchy_level_json(wells):
    data = build_hierarchy(wells)[0].to_json()
    assert data["level"] == 1 and data["parent"] is None
    assert data["transient"] == ["w"]


def test_hierarchy_ergodic_chain_has_no_levels():
    chain = PerturbedChain.from_edges(["a", "b"], [("a", "b", 0.5, 0), ("b", "a", 0.5, 0)])
    assert build_hierarchy(chain) == []


@given(seed=st.integers(0, 2**32 - 1))
def test_hierarchy_class_count_decreases(seed):
    chain = random_chain(np.random.default_rng(seed))
    levels = build_hierarchy(chain)
    counts = [lv.n_classes for lv in levels] + [1]
    assert all(a > b for a, b in zip(counts, counts[1:]))
    for lv in levels:
        assert any(v.exp == 0 for v in lv.p_check.entries.values())
    assert len(final_classes(chain, levels)) == 1


@given(seed=st.integers(0, 2**32 - 1))
def test_detailed_balance_every_level(seed):
    chain = random_chain(np.random.default_rng(seed))
    for lv in build_hierarchy(chain):
        mu = lv.class_masses
        for (a, b), q in lv.q_hat.items():
            back = lv.q_hat.get((b, a))
            assert back is not None
            left, right = mu[a] * q, mu[b] * back
            assert left.exp == right.exp
            assert left.coeff == pytest.approx(right.coeff, rel=1e-9)


# stationary law ----------------------------------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "chain, expected",
    [(two_state(1, 2), [0.0, 1.0]), (two_state(2, 1), [1.0, 0.0]), (two_state(1, 1, 2.0, 3.0), [0.6, 0.4])],
)
def test_stationary_two_state(chain, expected):
    dist = asymptotic_stationary(chain)
    assert [dist.limit[i] for i in range(2)] == pytest.approx(expected, abs=1e-12)


def test_stationary_two_state_mass(two_state):
    dist = asymptotic_stationary(two_state)
    assert dist.class_mass[0] == pv(1, 1)


def test_stationary_wells_against_direct(wells):
    dist = asymptotic_stationary(wells)
    mu = oracle.stationary_direct(wells, 1e-4)
    for i in range(wells.n):
        if dist.limit[i] > 0:
            assert mu[i] / dist.limit[i] == pytest.approx(1.0, rel=0.02)
        else:
            assert mu[i] < 1e-3
    assert dist.limit[wells.index("w")] == 0.0
    assert sum(dist.limit.values()) == pytest.approx(1.0, abs=1e-9)


@given(seed=st.integers(0, 2**32 - 1))
def test_stationary_consistency_with_effective_chain(seed):
    chain = random_chain(np.random.default_rng(seed))
    dec = ergodic_decomposition(chain)
    if dec.n_classes < 2:
        return
    masses = class_masses(dec, reversible_chain(chain, dec))
    p_hat = effective_chain(chain, dec)
    hat_dec = ergodic_decomposition(p_hat)
    if hat_dec.n_classes < 2:
        return
    # the effective chain's own masses, summed over its classes, reproduce mu(E)
    hat_masses = class_masses(hat_dec, reversible_chain(p_hat, hat_dec))
    for c, m in zip(hat_dec.classes, hat_masses):
        for k in c:
            inner = hat_dec.nu[hat_dec.class_of(k)][k]
            mine = masses[k]
            value = m * pv(inner)
            assert value.exp == mine.exp
            assert value.coeff == pytest.approx(mine.coeff, rel=0.02)


# escape probabilities of the effective chain ------------------------------------------------------------------------------------------------------------


@given(seed=st.integers(0, 2**32 - 1))
def test_effective_chain_escape_matches_q_hat(seed):
    chain = random_chain(np.random.default_rng(seed))
    dec = ergodic_decomposition(chain)
    if dec.n_classes < 2:
        return
    p_hat = effective_chain(chain, dec)
    q = reversible_chain(chain, dec)
    for i in range(dec.n_classes):
        for j in range(dec.n_classes):
            if i == j:
                continue
            e = escape_value(p_hat, i, {j})
            assert e == q.get((i, j), e) or (e.exp == q[(i, j)].exp and e.coeff == pytest.approx(q[(i, j)].coeff, rel=0.02))


def test_q_hat_against_ladder_random():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(10):
        chain = random_chain(rng, n=int(rng.integers(3, 7)))
        dec = ergodic_decomposition(chain)
        if dec.n_classes < 2:
            continue
        for (a, b), v in reversible_chain(chain, dec).items():
            f = fit([(e, oracle.q_hat_entry(chain, e, dec, a, b)) for e in LADDER], chain)
            assert f.value.exp == v.exp
            assert f.value.coeff == pytest.approx(v.coeff, rel=0.02)
            checked += 1
    assert checked > 10


@given(seed=st.integers(0, 2**32 - 1))
def test_representative_independence(seed):
    rng = np.random.default_rng(seed)
    chain = random_chain(rng)
    dec = ergodic_decomposition(chain)
    if dec.n_classes < 2:
        return
    other = dec.with_representatives([c[int(rng.integers(len(c)))] for c in dec.classes])
    a = reversible_chain(effective_chain(chain, dec))
    b = reversible_chain(effective_chain(chain, decomposition=other))
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].exp == b[k].exp
        assert a[k].coeff == pytest.approx(b[k].coeff, rel=0.02)


# metastable sets --------------------------------------------------------------------------------------------------------------


def test_metastable_wells(wells):
    assert verify_metastable_set(wells, idx(wells, "x", "y", "z"))


def test_metastable_whole_space_fails_at_w(wells):
    verdict = verify_metastable_set(wells, range(wells.n))
    assert not verdict
    assert verdict.witness[0] == "w"


def test_metastable_two_state(two_state):
    assert verify_metastable_set(two_state, {0, 1})


def test_metastable_needs_members(wells):
    with pytest.raises(ValidationError):
        verify_metastable_set(wells, [])


# approximation criterion ---------------------------------------------------------------------------------------------------------


def test_exact_effective_chain_passes(wells):
    assert check_approximation(wells, effective_chain(wells)).ok


def test_truncated_effective_chain_flagged(wells):
    exact = effective_chain(wells)
    truncated = without(exact, "x", "z")
    report = check_approximation(wells, truncated)
    assert not report.ok
    assert ("x", "z") in report.flagged


def test_coefficient_perturbation_flagged(wells_linked):
    exact = effective_chain(wells_linked)
    report = check_approximation(wells_linked, scaled(exact, "y", "x", 1.1))
    assert not report.ok
    bad = [p for p in report.pairs if not p["ok"]]
    assert all(p["exponent_ok"] for p in bad)


def test_approximation_needs_same_states(wells):
    with pytest.raises(ValidationError):
        check_approximation(wells, chain_a())
