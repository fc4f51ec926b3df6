import warnings

import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltlshape.automata import ApRegistry, SafetyAutomaton, compile_invariant
from ltlshape.envs import make_env, reference_advice
from ltlshape.envs.gridworld import DOWN, RIGHT
from ltlshape.errors import (
    DistanceClampWarning,
    EmptyRegionWarning,
    InvalidC,
    ParseError,
    RegistryMismatch,
)
from ltlshape.mdp import Mdp
from ltlshape.product import (
    ConstantPenalty,
    Custom,
    ManhattanToRegion,
    PotentialTable,
    WinningRegion,
    algorithm1_sweep,
    almost_sure_region,
    almost_sure_region_sweep,
    build_product,
    hop_distance,
    l1_distance,
    parse_distance,
    synthesize_potential,
)


def random_labelled_mdp(rng, n_states, n_actions, n_ap=1):
    """Arbitrary (not necessarily communicating) MDP with random labels and partial availability."""
    trans = {}
    for s in range(n_states):
        acts = [a for a in range(n_actions) if rng.random() < 0.8] or [int(rng.integers(n_actions))]
        for a in acts:
            k = int(rng.integers(1, min(3, n_states) + 1))
            succ = rng.choice(n_states, size=k, replace=False)
            p = rng.dirichlet(np.ones(k))
            p[-1] = 1.0 - p[:-1].sum()
            if np.any(p <= 0):
                p = np.full(k, 1.0 / k)
            trans[(s, a)] = [(int(x), float(y), 0.0) for x, y in zip(succ, p)]
    labels = rng.integers(0, 1 << n_ap, n_states)
    ap = tuple("pqr"[:n_ap])
    return Mdp.from_transitions(n_states, n_actions, trans, labels=labels, ap=ap)


def random_dfa(rng, n_states, n_ap=1, accepting=None):
    reg = ApRegistry(tuple("pqr"[:n_ap]))
    delta = rng.integers(0, n_states, (n_states, reg.n_letters))
    # self-loops keep many instances away from the all-losing extreme
    delta = np.where(rng.random(delta.shape) < 0.5, np.arange(n_states)[:, None], delta)
    if accepting is None:
        accepting = rng.random(n_states) < 0.75
        accepting[0] = True
        if n_states > 1 and accepting.all():
            accepting[-1] = False
    return SafetyAutomaton(reg, delta, 0, np.asarray(accepting))


def random_instance(seed):
    rng = np.random.default_rng(seed)
    q = int(rng.integers(2, 4))
    s = int(rng.integers(2, 12 // q + 1))
    mdp = random_labelled_mdp(rng, s, int(rng.integers(1, 4)), n_ap=int(rng.integers(1, 3)))
    aut = random_dfa(rng, q, n_ap=len(mdp.ap))
    return mdp, aut


def package_pairs(region):
    prod = region.product
    out = set()
    for v, (s, q) in enumerate(prod.pairs):
        for a in np.flatnonzero(region.product_pairs[v]):
            out.add(((int(s), int(q)), int(a)))
    return out


def oracle_pairs_on_product(prod):
    table, accepting = oracles.hand_product(prod.mdp, prod.aut)
    _, pairs = oracles.brute_force_safe_pairs(table, accepting)
    present = {(int(s), int(q)) for s, q in prod.pairs}
    return {p for p in pairs if p[0] in present}


# build_product


def test_product_rows_match_hand_expansion():
    rng = np.random.default_rng(1)
    mdp = random_labelled_mdp(rng, 2, 2)
    aut = compile_invariant("G p", ApRegistry(("p",)))
    prod = build_product(mdp, aut)
    table, accepting = oracles.hand_product(mdp, aut)
    assert prod.n_states <= 4
    assert np.allclose(prod.row_sums()[prod.available], 1.0, atol=1e-12)
    for v, (s, q) in enumerate(prod.pairs):
        assert prod.accepting[v] == accepting[(s, q)]
        for a in np.flatnonzero(prod.available[v]):
            succ, p = prod.successors(v, a)
            got = {tuple(int(x) for x in prod.pairs[w]): float(pp) for w, pp in zip(succ, p)}
            assert got == pytest.approx(table[(int(s), int(q)), int(a)])


def test_product_initial_reads_initial_label():
    mdp = Mdp.from_transitions(2, 1, {(0, 0): [(1, 1.0, 0.0)], (1, 0): [(0, 1.0, 0.0)]}, labels=[0, 1], ap=("p",))
    aut = compile_invariant("G p", ApRegistry(("p",)))
    prod = build_product(mdp, aut)
    s, q = prod.pairs[prod.initial]
    assert s == 0 and not aut.accepting[q]


def test_trivial_automaton_product():
    mdp = random_labelled_mdp(np.random.default_rng(2), 5, 2)
    aut = compile_invariant("G true", ApRegistry(("p",)))
    prod = build_product(mdp, aut)
    assert prod.n_states == mdp.n_states and prod.accepting.all()
    region = almost_sure_region(prod)
    assert np.array_equal(region.pairs, mdp.available)


def test_registry_mismatch():
    mdp = random_labelled_mdp(np.random.default_rng(2), 3, 2)
    with pytest.raises(RegistryMismatch):
        build_product(mdp, compile_invariant("G x", ApRegistry(("x",))))


def test_invisible_human_states_go_to_sink():
    env = make_env("sweep-human")
    mdp = env.joint_mdp()
    aut = compile_invariant("G human_visible", ApRegistry(mdp.ap))
    prod = build_product(mdp, aut)
    s, q = prod.pairs[:, 0], prod.pairs[:, 1]
    invisible = mdp.labels[s] == 0
    assert invisible.any()
    assert not prod.accepting[invisible].any()
    assert np.all(q[invisible] == 1)


# almost_sure_region


def test_gridworld_region_is_down_right():
    region = reference_advice("gridworld").synthesize().region
    expected = np.zeros_like(region.pairs)
    expected[:, [DOWN, RIGHT]] = True
    assert np.array_equal(region.pairs, expected)


def test_region_matches_brute_force_oracle():
    for seed in range(300):
        mdp, aut = random_instance(seed)
        region = almost_sure_region(build_product(mdp, aut))
        assert package_pairs(region) == oracle_pairs_on_product(region.product), seed


def test_worklist_equals_literal_sweep():
    for seed in range(300):
        mdp, aut = random_instance(10_000 + seed)
        prod = build_product(mdp, aut)
        assert np.array_equal(almost_sure_region(prod).product_pairs, almost_sure_region_sweep(prod)), seed


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_region_invariants(seed):
    mdp, aut = random_instance(seed)
    prod = build_product(mdp, aut)
    region = almost_sure_region(prod)
    win = region.product_pairs
    win_state = win.any(axis=1)
    # members stay accepting and every successor can continue inside the region
    assert not win[~prod.accepting].any()
    for v, a in zip(*np.nonzero(win)):
        succ, _p = prod.successors(v, a)
        assert np.all(prod.accepting[succ]) and np.all(win_state[succ])
    # one more removal sweep changes nothing
    losing_pair = ~win
    losing_state = ~win_state
    new_pair, new_state = algorithm1_sweep(prod, losing_pair, losing_state)
    assert np.array_equal(new_pair & prod.available, losing_pair & prod.available)
    assert np.array_equal(new_state, losing_state)
    # projection soundness and exactness
    for s, a in zip(*np.nonzero(region.pairs)):
        vs = np.flatnonzero(prod.pairs[:, 0] == s)
        assert win[vs, a].any()
    proj = np.zeros_like(region.pairs)
    for v, (s, _) in enumerate(prod.pairs):
        proj[s] |= win[v]
    assert np.array_equal(proj, region.pairs)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_more_accepting_states_never_shrink_region(seed):
    mdp, aut = random_instance(seed)
    rng = np.random.default_rng(seed)
    bigger = aut.accepting | (rng.random(aut.n_states) < 0.5)
    aut2 = SafetyAutomaton(aut.registry, aut.delta, aut.initial, bigger)
    small = almost_sure_region(build_product(mdp, aut)).pairs
    large = almost_sure_region(build_product(mdp, aut2)).pairs
    assert np.all(large >= small)


def test_empty_region():
    mdp = Mdp.from_transitions(2, 1, {(0, 0): [(1, 1.0, 0.0)], (1, 0): [(0, 1.0, 0.0)]}, labels=[1, 0], ap=("p",))
    region = almost_sure_region(build_product(mdp, compile_invariant("G p", ApRegistry(("p",)))))
    assert region.is_empty


def test_probabilistic_leak_is_losing():
    # action 0 at state 0 stays with prob 0.99 but can reach the bad state
    mdp = Mdp.from_transitions(
        3, 2,
        {(0, 0): [(0, 0.99, 0.0), (2, 0.01, 0.0)], (0, 1): [(1, 1.0, 0.0)], (1, 0): [(0, 1.0, 0.0)],
         (2, 0): [(2, 1.0, 0.0)]},
        labels=[1, 1, 0], ap=("p",),
    )
    region = almost_sure_region(build_product(mdp, compile_invariant("G p", ApRegistry(("p",)))))
    assert region.pairs.tolist() == [[False, True], [True, False], [False, False]]


# potentials


def test_full_region_constant_potential():
    mdp = random_labelled_mdp(np.random.default_rng(5), 4, 2)
    region = WinningRegion(mdp.available.copy())
    table = synthesize_potential(mdp, region, 1.0, ConstantPenalty(-1.0))
    assert np.all(table.values[mdp.available] == 1.0)


def test_potential_dichotomy_and_clamp():
    mdp = random_labelled_mdp(np.random.default_rng(6), 5, 2)
    pairs = np.zeros((5, 2), dtype=bool)
    pairs[:2] = mdp.available[:2]
    region = WinningRegion(pairs)
    d = np.full((5, 2), 0.5)
    d[4, 1] = 3.0
    with pytest.warns(DistanceClampWarning):
        table = synthesize_potential(mdp, region, 1.0, Custom(d))
    assert np.all((table.values == 1.0) == pairs)
    assert table.values[~pairs].max() < 1.0
    assert table.values[4, 1] == pytest.approx(1.0 - 1e-6, abs=1e-15)
    assert table.clamped == 1


def test_invalid_c():
    mdp = random_labelled_mdp(np.random.default_rng(6), 3, 2)
    with pytest.raises(InvalidC):
        synthesize_potential(mdp, WinningRegion(mdp.available.copy()), float("inf"))


def test_empty_region_warns():
    mdp = random_labelled_mdp(np.random.default_rng(6), 3, 2)
    with pytest.warns(EmptyRegionWarning):
        table = synthesize_potential(mdp, WinningRegion(np.zeros((3, 2), bool)), 1.0, ConstantPenalty(-1.0))
    assert np.all(table.values == -1.0)


def test_kitchen_potential():
    env = make_env("sweep-kitchen")
    model = reference_advice("sweep-kitchen", env).synthesize()
    mdp = env.robot_mdp()
    phi = model.potential.values
    kitchen = env.kitchen
    dist = np.array([np.abs(env.coords[kitchen] - xy).sum(axis=1).min() for xy in env.coords], dtype=float)
    assert model.potential.C == 1.0
    for s in range(mdp.n_states):
        for a in np.flatnonzero(mdp.available[s]):
            if model.region.pairs[s, a]:
                assert phi[s, a] == 1.0
            else:
                t = env.target[s, a]
                assert phi[s, a] == -dist[s] + (1.0 if dist[t] < dist[s] else 0.0)
    # members of the region are exactly the kitchen moves that stay in the kitchen
    stay = mdp.available & kitchen[:, None] & kitchen[env.target]
    assert np.array_equal(model.region.pairs, stay)


def test_human_potential_fallback():
    env = make_env("sweep-human")
    model = reference_advice("sweep-human", env).synthesize()
    phi = model.potential.values
    m = env.n_human
    win_states = model.region.states().reshape(env.n_cells, m)
    rng = np.random.default_rng(0)
    for s in rng.choice(env.n_states, 400, replace=False):
        robot, human = divmod(int(s), m)
        a = int(np.flatnonzero(env.robot_available[robot])[0])
        if model.region.pairs[s, a]:
            assert phi[s, a] == 1.0
        elif not env.visible[robot, human]:
            assert phi[s, a] == -6.0
        elif win_states[:, human].any():
            d = np.abs(env.coords[win_states[:, human]] - env.coords[robot]).sum(axis=1).min()
            assert phi[s, a] == -float(d)


def test_potential_save_load(tmp_path):
    mdp = random_labelled_mdp(np.random.default_rng(7), 4, 3)
    pairs = mdp.available & (np.arange(3) < 2)
    table = synthesize_potential(mdp, WinningRegion(pairs), 2.5, ManhattanToRegion(0.5, 1.0))
    table.save(tmp_path / "phi.json")
    back = PotentialTable.load(tmp_path / "phi.json")
    assert back.C == 2.5
    assert np.array_equal(back.in_region, table.in_region)
    assert np.allclose(back.values, table.values, rtol=1e-11)


def test_parse_distance():
    assert parse_distance("const:-2") == ConstantPenalty(-2.0)
    assert parse_distance("region:scale=2,bonus=1,fallback=-6") == ManhattanToRegion(2.0, 1.0, -6.0)
    with pytest.raises(ParseError):
        parse_distance("banana")


def test_distances():
    coords = np.array([[0, 0], [0, 1], [0, 2], [1, 2]])
    assert l1_distance(coords, np.array([False, False, False, True])).tolist() == [3, 2, 1, 0]
    mdp = Mdp.from_transitions(3, 1, {(0, 0): [(1, 1.0, 0)], (1, 0): [(2, 1.0, 0)], (2, 0): [(0, 1.0, 0)]})
    assert hop_distance(mdp, np.array([False, False, True])).tolist() == [2, 1, 0]


def test_synthesis_deterministic():
    env = make_env("sweep-kitchen")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = reference_advice("sweep-kitchen", env).synthesize().potential.values
        b = reference_advice("sweep-kitchen", env).synthesize().potential.values
    assert np.array_equal(a, b)
