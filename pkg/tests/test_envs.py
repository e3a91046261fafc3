import numpy as np
import pytest

from qfactor.envs import (
    STOP,
    GaussianSqueeze,
    MatrixGame,
    PayoffTable,
    PredatorPrey,
    gs_multi_domain,
    penalty_game,
    random_payoff,
    two_peak_game,
    two_peak_reward,
)


class TestPayoffTable:
    def test_penalty_game_lookups(self):
        table = penalty_game()
        assert table.reward((0, 0)) == 8.0
        assert table.reward((0, 1)) == -12.0
        assert table.reward((1, 2)) == 0.0

    def test_out_of_range_action_raises(self):
        table = penalty_game()
        with pytest.raises(ValueError):
            table.reward((3, 0))
        with pytest.raises(ValueError):
            table.reward((0,))

    def test_rejects_non_finite_entries(self):
        with pytest.raises(ValueError):
            PayoffTable(np.array([[1.0, np.inf], [0.0, 0.0]]))

    def test_file_round_trip(self, tmp_path, rng):
        table = random_payoff(rng, n_agents=3, n_actions=4)
        path = tmp_path / "payoff.txt"
        table.save(path)
        loaded = PayoffTable.load(path)
        assert loaded.n_agents == 3
        assert loaded.n_actions == 4
        assert np.array_equal(loaded.rewards, table.rewards)

    def test_file_format_header(self, tmp_path):
        path = tmp_path / "payoff.txt"
        penalty_game().save(path)
        assert path.read_text().splitlines()[0] == "2 3"


class TestTwoPeakGame:
    def test_global_maximum(self):
        assert two_peak_reward(5, 15) == 10.0

    def test_local_maximum(self):
        assert two_peak_reward(15, 5) == 5.0

    def test_hand_evaluated_point(self):
        # f1 = 5 - 0 - (10/3)^2, f2 = 10 - 100 - 0; max is f1
        assert two_peak_reward(15, 15) == pytest.approx(5 - 100 / 9, abs=1e-12)

    def test_table_optimum_is_unique(self):
        from qfactor.verifier import oracle_optimal
        winners, best = oracle_optimal(two_peak_game().rewards)
        assert winners == [(5, 15)]
        assert best == 10.0


class TestMatrixGame:
    def test_single_step_episode(self):
        env = MatrixGame(penalty_game())
        obs = env.reset()
        assert obs.shape == (2, 1)
        obs2, r, done = env.step((0, 0))
        assert r == 8.0 and done
        assert obs2.shape == obs.shape


class TestGaussianSqueeze:
    def test_reward_peak_when_usage_hits_center(self):
        # 10 agents at level 8 with unit resource 0.1 -> usage exactly 8
        env = GaussianSqueeze(np.full(10, 0.1), mus=[8.0], sigmas=[1.0])
        assert env.reward(np.full(10, 8)) == pytest.approx(8.0, abs=1e-12)

    def test_zero_usage_gives_zero(self):
        env = GaussianSqueeze(np.full(10, 0.1), mus=[8.0], sigmas=[1.0])
        assert env.reward(np.zeros(10, dtype=int)) == 0.0

    def test_hand_evaluated_offset_usage(self):
        env = GaussianSqueeze(np.full(10, 0.1), mus=[8.0], sigmas=[1.0])
        assert env.reward_of_usage(9.0) == pytest.approx(9.0 * np.exp(-1.0), abs=1e-12)

    def test_reward_nonnegative_for_nonnegative_resources(self, rng):
        env = gs_multi_domain()
        for _ in range(50):
            u = rng.integers(0, 10, size=10)
            assert env.reward(u) >= 0.0

    def test_usage_is_linear_in_each_action(self):
        env = gs_multi_domain(s=0.15)
        u = np.full(10, 3)
        x0 = float(env.s @ u)
        for i in range(10):
            bumped = u.copy()
            bumped[i] += 1
            assert float(env.s @ bumped) - x0 == pytest.approx(0.15, abs=1e-12)

    def test_optimal_reward_enumeration(self):
        env = gs_multi_domain(s=0.15)
        best = env.optimal_reward()
        # exhaustive cross-check over all usage totals
        totals = [env.reward_of_usage(0.15 * m) for m in range(91)]
        assert best == pytest.approx(max(totals), abs=0)
        assert best > 7.8  # the high narrow peak, not the wide 5-ish one

    def test_optimal_reward_requires_equal_resources(self):
        env = GaussianSqueeze(np.linspace(0.0, 0.2, 10), mus=[8.0], sigmas=[1.0])
        with pytest.raises(ValueError):
            env.optimal_reward()

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            GaussianSqueeze(np.full(10, 0.3), mus=[8.0], sigmas=[1.0])
        with pytest.raises(ValueError):
            GaussianSqueeze(np.full(10, 0.1), mus=[8.0], sigmas=[-1.0])


class _ScriptedRng:
    """Stands in for a Generator: fixed prey move, fixed respawn cell."""

    def __init__(self, move=STOP, cell=3):
        self.move = move
        self.cell = cell

    def integers(self, lo, hi, size=None):
        value = self.move if hi == 5 else self.cell
        if size is None:
            return value
        return np.full(size, value, dtype=np.int64)


class TestPredatorPrey:
    def make(self, predators, prey, penalty=1.5, w=9, h=9):
        env = PredatorPrey(grid_w=w, grid_h=h, n_predators=len(predators),
                           n_prey=len(prey), penalty=penalty,
                           rng=_ScriptedRng())
        env.predators = np.array(predators, dtype=np.int64)
        env.prey = np.array(prey, dtype=np.int64)
        return env

    def test_two_catchers_reward_and_respawn(self):
        env = self.make(predators=[(3, 4), (5, 4)], prey=[(4, 4)])
        _, r, _ = env.step([STOP, STOP])
        assert r == 1.0
        assert tuple(env.prey[0]) == (3, 3)  # scripted respawn cell

    def test_single_catcher_pays_penalty_no_respawn(self):
        env = self.make(predators=[(3, 4), (8, 8)], prey=[(4, 4)], penalty=1.5)
        _, r, _ = env.step([STOP, STOP])
        assert r == -1.5
        assert tuple(env.prey[0]) == (4, 4)

    def test_no_catcher_no_reward(self):
        env = self.make(predators=[(0, 0), (8, 8)], prey=[(4, 4)])
        _, r, _ = env.step([STOP, STOP])
        assert r == 0.0

    def test_same_cell_is_not_a_catch(self):
        env = self.make(predators=[(4, 4), (8, 8)], prey=[(4, 4)])
        _, r, _ = env.step([STOP, STOP])
        assert r == 0.0

    def test_rewards_sum_over_prey(self):
        env = self.make(predators=[(3, 4), (5, 4), (0, 8)], prey=[(4, 4), (0, 7)])
        _, r, _ = env.step([STOP, STOP, STOP])
        assert r == 1.0 - 1.5

    def test_moves_blocked_at_walls(self):
        env = self.make(predators=[(0, 0), (8, 8)], prey=[(4, 4)])
        env.step([0, 1])  # left into wall, right into wall
        assert tuple(env.predators[0]) == (0, 0)
        assert tuple(env.predators[1]) == (8, 8)

    def test_invalid_action_raises(self):
        env = self.make(predators=[(0, 0), (8, 8)], prey=[(4, 4)])
        with pytest.raises(ValueError):
            env.step([5, 0])

    def test_episode_runs_fixed_number_of_steps(self):
        env = PredatorPrey(rng=np.random.default_rng(3), episode_limit=100)
        env.reset()
        for t in range(1, 101):
            _, _, done = env.step([STOP, STOP])
            assert done == (t == 100)

    def test_observation_layout_and_window(self):
        env = self.make(predators=[(4, 4), (0, 0)], prey=[(4, 3)])
        obs = env.observe()
        assert obs.shape == (2, env.obs_dim)
        # agent 0: own coords scaled, id one-hot, prey one row up
        assert obs[0, 0] == pytest.approx(4 / 8)
        assert obs[0, 1] == pytest.approx(4 / 8)
        assert np.array_equal(obs[0, 2:4], [1.0, 0.0])
        assert np.array_equal(obs[0, 4:7], [0.0, -1.0, 1.0])
        # agent 1: prey is 4+ cells away, outside the 5x5 window
        assert np.array_equal(obs[1, 4:7], [0.0, 0.0, 0.0])

    def test_same_cell_agents_differ_only_in_id(self):
        env = self.make(predators=[(4, 4), (4, 4)], prey=[(0, 0)])
        obs = env.observe()
        assert np.array_equal(obs[0, :2], obs[1, :2])
        assert np.array_equal(obs[0, 4:], obs[1, 4:])
        assert not np.array_equal(obs[0, 2:4], obs[1, 2:4])

    def test_observation_dim_stable_across_resets(self):
        env = PredatorPrey(rng=np.random.default_rng(0))
        dims = {env.reset().shape for _ in range(5)}
        assert dims == {(2, env.obs_dim)}

    def test_step_rewards_with_one_prey_take_three_values(self):
        env = PredatorPrey(rng=np.random.default_rng(5), penalty=1.5)
        env.reset()
        seen = set()
        for _ in range(300):
            _, r, done = env.step(np.random.default_rng(len(seen)).integers(0, 5, 2))
            seen.add(r)
            if done:
                env.reset()
        assert seen <= {-1.5, 0.0, 1.0}


class TestRandomPayoff:
    def test_entries_in_unit_interval(self, rng):
        table = random_payoff(rng)
        assert table.rewards.shape == (3, 3)
        assert np.all((table.rewards >= 0) & (table.rewards < 1))

    def test_seeded_reproducibility(self):
        a = random_payoff(np.random.default_rng(9)).rewards
        b = random_payoff(np.random.default_rng(9)).rewards
        assert np.array_equal(a, b)

    def test_mean_close_to_half(self):
        rng = np.random.default_rng(0)
        vals = np.concatenate([random_payoff(rng).rewards.ravel()
                               for _ in range(1112)])
        assert abs(vals[:10000].mean() - 0.5) < 0.02
