import math

import numpy as np
import oracles
import pytest
from scipy import stats

from ltlshape.envs import ENV_NAMES, make_env, reference_advice
from ltlshape.envs.cartpole import (
    MAX_SPEED,
    CartPoleEnv,
    Discretizer,
    physics_step,
    scoring,
    wrap_angle,
)
from ltlshape.envs.gridworld import (
    DOWN,
    GREEN_REWARD,
    LEFT,
    RIGHT,
    UP,
    GridworldEnv,
    exact_state_index,
    gridworld_as_mdp,
)
from ltlshape.envs.sweeping import (
    CLEAR_PROB,
    FREQ_RANGE,
    OFFSETS,
    SPEED,
    Layout,
    SweepingEnv,
)
from ltlshape.errors import ParseError, UnknownEnv
from ltlshape.mdp import policy_gain, solve_average_reward, validate

# gridworld


def test_entering_green_pays_and_teleports():
    env = GridworldEnv()
    rng = np.random.default_rng(0)
    landed = []
    for _ in range(3600):
        env.state, env.count = env.index[(5, 4)], 7
        s2, r, _ = env.step(RIGHT, rng)
        assert r == GREEN_REWARD and env.count == 0
        landed.append(s2)
    counts = np.bincount(landed, minlength=36)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_wall_blocks_moves():
    env = GridworldEnv(wall=True)
    env.state, env.count = env.index[(2, 1)], 0
    s2, r, _ = env.step(RIGHT, np.random.default_rng(0))
    assert s2 == env.index[(2, 1)] and r == 0.0
    env.state = env.index[(1, 3)]
    assert env.step(DOWN, np.random.default_rng(0))[0] == env.index[(1, 3)]


def test_budget_teleport():
    env = GridworldEnv()
    env.reset()
    rng = np.random.default_rng(1)
    for _ in range(99):
        env.step(UP, rng)
        assert env.state == env.start
    env.step(UP, rng)
    assert env.count == 0


def test_every_step_on_grid():
    env = GridworldEnv(wall=True)
    rng = np.random.default_rng(2)
    env.reset()
    for a in rng.integers(0, 4, 5000):
        s, _, _ = env.step(int(a), rng)
        assert 0 <= s < env.n_states and env.cells[s] not in env.walls


def test_simulator_matches_exact_model_rows():
    env = GridworldEnv(wall=True)
    mdp = gridworld_as_mdp(env, "exact")
    assert validate(mdp) == []
    index = exact_state_index(env)
    rng = np.random.default_rng(3)
    samples = 10**5
    cases = [(0, env.index[(5, 4)], RIGHT), (99, env.index[(0, 0)], LEFT), (3, env.index[(1, 1)], DOWN)]
    for k, c, a in cases:
        v = int(index[k, c])
        succ, prob, _rew = mdp.successors(v, a)
        observed = np.zeros(mdp.n_states)
        for _ in range(samples):
            env.state, env.count = c, k
            s2, _r, _ = env.step(a, rng)
            observed[index[env.count, s2]] += 1
        expected = np.zeros(mdp.n_states)
        expected[succ] = prob * samples
        assert np.all(observed[expected == 0] == 0)
        support = expected > 0
        if support.sum() > 1:
            assert stats.chisquare(observed[support], expected[support]).pvalue > 1e-3
    # deterministic rows on a sampled subset
    for _ in range(200):
        k, c, a = int(rng.integers(0, 98)), int(rng.integers(env.n_states)), int(rng.integers(4))
        if index[k, c] < 0 or env.next_cell[c, a] == env.green_index:
            continue
        env.state, env.count = c, k
        s2, _, _ = env.step(a, rng)
        succ, prob, _ = mdp.successors(int(index[k, c]), a)
        assert succ.tolist() == [index[k + 1, s2]] and prob.tolist() == [1.0]


def test_oracle_gain_matches_simulator():
    env = GridworldEnv()
    mdp = gridworld_as_mdp(env, "exact")
    gb, pi = solve_average_reward(mdp)
    index = exact_state_index(env)
    rng = np.random.default_rng(4)
    env.reset()
    steps = 200_000
    rewards = np.empty(steps)
    for t in range(steps):
        a = pi[int(index[env.count, env.state])]
        rewards[t] = env.step(a, rng)[1]
    batches = rewards.reshape(200, -1).mean(axis=1)
    se = batches.std(ddof=1) / math.sqrt(len(batches))
    assert abs(rewards.mean() - gb.gain) < 3 * se


def test_wall_cuts_monotone_paths():
    env = GridworldEnv(wall=True)
    mdp = gridworld_as_mdp(env, "memoryless")
    # cells from which green is reachable using only down and right moves in the model graph
    good = {env.green_index}
    changed = True
    while changed:
        changed = False
        for c in range(env.n_states):
            if c in good:
                continue
            for a in (DOWN, RIGHT):
                succ, prob, rew = mdp.successors(c, a)
                main = env.green_index if np.any(rew == GREEN_REWARD) else int(succ[np.argmax(prob)])
                if main != c and main in good:
                    good.add(c)
                    changed = True
    above = [env.index[(r, c)] for r in (0, 1) for c in range(2, 6)]
    assert not any(c in good for c in above)
    assert env.index[(3, 0)] in good


def test_degenerate_grid():
    env = GridworldEnv(width=1, height=1)
    for kind in ("exact", "memoryless"):
        mdp = gridworld_as_mdp(env, kind)
        assert mdp.n_states == 1
        gb, _ = solve_average_reward(mdp)
        assert gb.gain == pytest.approx(100.0, abs=1e-9)


def test_exact_and_memoryless_policy_gains_are_close():
    env = GridworldEnv()
    exact = gridworld_as_mdp(env, "exact")
    mem = gridworld_as_mdp(env, "memoryless")
    _, pi = solve_average_reward(mem)
    index = exact_state_index(env)
    lifted = np.array([pi[int(c)] for c in np.argwhere(index >= 0)[:, 1]])
    assert policy_gain(exact, lifted) == pytest.approx(policy_gain(mem, pi), rel=0.05)


# sweeping


def test_layout_validation():
    with pytest.raises(ParseError):
        Layout.from_text("R.\n.X")
    with pytest.raises(ParseError):
        Layout.from_text("..\n..")
    default = Layout.default()
    assert default.shape == (15, 15)


def test_robot_moves_respect_walls_and_speed():
    env = SweepingEnv()
    free = set(env.cells)
    for i, (r, c) in enumerate(env.cells):
        for a in np.flatnonzero(env.robot_available[i]):
            dr, dc = OFFSETS[a]
            assert abs(dr) + abs(dc) <= SPEED
            tr, tc = env.cells[env.target[i, a]]
            assert (tr, tc) == (r + dr, c + dc) and (tr, tc) in free
        assert env.robot_available[i, OFFSETS.index((0, 0))]
    # a move across a wall needs a detour longer than the speed bound
    i = env.index[(4, 6)]
    assert (5, 6) not in free and (4, 8) in free
    assert not env.robot_available[i, OFFSETS.index((0, 2))]


def test_collect_trash():
    env = SweepingEnv(seed=0)
    env.reset()
    rng = np.random.default_rng(0)
    k = int(np.flatnonzero(env.kitchen)[0])
    env.freq = np.where(np.arange(env.n_cells) == k, 0.0, env.freq)  # no reappearance within the step
    env.robot = k
    env.trash[k] = True
    _, r, _ = env.step(OFFSETS.index((0, 0)), rng)
    assert r == 1.0 and not env.trash[k]
    _, r, _ = env.step(OFFSETS.index((0, 0)), rng)
    assert r == 0.0


def test_trash_frequencies():
    env = SweepingEnv(seed=5)
    assert np.all((env.freq[env.kitchen] >= FREQ_RANGE[0]) & (env.freq[env.kitchen] <= FREQ_RANGE[1]))
    assert np.all(env.freq[~env.kitchen] == 0.0)
    env.reset()
    env.robot = env.index[(7, 3)]  # corridor cell, away from all trash
    stay = OFFSETS.index((0, 0))
    rng = np.random.default_rng(6)
    cells = np.flatnonzero(env.kitchen)
    steps = 10**6
    clean_before = np.zeros(len(cells))
    appeared = np.zeros(len(cells))
    cleared = dirty_before = 0
    prev = env.trash[cells].copy()
    for _ in range(steps):
        env.step(stay, rng)
        cur = env.trash[cells]
        clean_before += ~prev
        appeared += ~prev & cur
        dirty_before += int(prev.sum())
        cleared += int((prev & ~cur).sum())
        prev = cur.copy()
    f = env.freq[cells]
    rate = appeared / clean_before
    se = np.sqrt(f * (1 - f) / clean_before)
    assert np.all(np.abs(rate - f) < 3 * se)
    p = cleared / dirty_before
    assert abs(p - CLEAR_PROB) < 3 * math.sqrt(CLEAR_PROB * (1 - CLEAR_PROB) / dirty_before)


def test_extra_trash_only_in_right_corridor():
    env = make_env("sweep-kitchen-extra", seed=3)
    assert len(env.extra_cells)
    for c in env.extra_cells:
        _r, col = env.cells[c]
        assert env.corridor[c] and col >= 8


def test_human_walk_stays_in_corridor_and_room():
    env = SweepingEnv(trash_cells="none", human=True)
    rng = np.random.default_rng(7)
    env.reset()
    allowed = set(env.human_cells.tolist())
    prev = env.human_pos
    for _ in range(5000):
        env.step(OFFSETS.index((0, 0)), rng)
        cell = int(env.human_cells[env.human_pos])
        assert cell in allowed
        pr, pc = env.cells[int(env.human_cells[prev])]
        r, c = env.cells[cell]
        assert abs(pr - r) + abs(pc - c) <= 1
        prev = env.human_pos


def test_visibility_labels_match_ray_sampling():
    env = SweepingEnv(trash_cells="none", human=True)
    walls = [(r, c) for r in range(15) for c in range(15) if env.layout.char(r, c) == "#"]
    coords = env.coords
    for i in range(env.n_cells):
        for h, j in enumerate(env.human_cells):
            p0, p1 = coords[i], coords[j]
            near = [w for w in walls
                    if min(p0[0], p1[0]) - 1 <= w[0] <= max(p0[0], p1[0]) + 1
                    and min(p0[1], p1[1]) - 1 <= w[1] <= max(p0[1], p1[1]) + 1]
            expect = oracles.visible_by_sampling(near, p0, p1, 5.0)
            assert env.label_of(i, h) == int(expect), (env.cells[i], env.cells[j])


def test_joint_mdp_shape_and_rows():
    env = SweepingEnv(trash_cells="none", human=True)
    mdp = env.joint_mdp()
    assert mdp.n_states == env.n_cells * env.n_human
    assert validate(mdp) == []
    assert mdp.available.any(axis=1).all()


# cart pole


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.1) == pytest.approx(0.1)


def test_clamp_and_wrap_along_trajectories():
    rng = np.random.default_rng(8)
    for _ in range(20):
        state = tuple(rng.uniform(-1, 1, 4))
        for a in rng.integers(0, 2, 2000):
            state = physics_step(state, int(a))
            assert abs(state[1]) <= MAX_SPEED
            assert -math.pi < state[2] <= math.pi


def test_cartpole_env_reward_and_index():
    env = CartPoleEnv()
    rng = np.random.default_rng(9)
    s = env.reset(rng)
    assert 0 <= s < env.n_states
    for a in rng.integers(0, 2, 3000):
        s, r, lab = env.step(int(a))
        assert 0 <= s < env.n_states
        assert r == float(scoring(env.state))
        assert lab == int(abs(env.state[0]) <= 2.4)


def test_discretizer_centres_round_trip():
    d = Discretizer()
    centres = d.centres()
    assert len(centres) == d.n_states == 9600
    for k in np.random.default_rng(0).choice(d.n_states, 300, replace=False):
        assert d.index(tuple(centres[k])) == k


# registry


def test_make_env_names():
    for name in ENV_NAMES:
        env = make_env(name)
        assert env.available.any(axis=1).all()
    with pytest.raises(UnknownEnv):
        make_env("pacman")
    with pytest.raises(UnknownEnv):
        reference_advice("pacman")


def test_reference_advice_packages():
    assert str(reference_advice("gridworld").formula) == "G monotone"
    kitchen = reference_advice("sweep-kitchen")
    assert kitchen.C == 1.0 and "kitchen" in str(kitchen.formula)
    accurate = reference_advice("cartpole")
    inaccurate = reference_advice("cartpole-inaccurate")
    assert accurate.distance.limit == 2.4 and inaccurate.distance.limit == 2.0
    model = inaccurate.synthesize()
    x_next = inaccurate.distance.predicted_x()
    assert np.array_equal(model.region.pairs[:, 0], np.abs(x_next) <= 2.0)
    assert model.shield.allowed.any(axis=1).all()
