"""The three benchmark environments behind one tiny episodic interface.

Every environment exposes:
    n_agents, n_actions, obs_dim   -- static dimensions
    single_state                   -- True for the one-shot games
    episode_limit                  -- steps per episode
    reset() -> obs                 -- obs has shape (n_agents, obs_dim)
    step(actions) -> (obs, reward, done)

Rewards are shared by the whole team. Actions are integer vectors with one
entry per agent.
"""

from __future__ import annotations

import itertools

import numpy as np


class PayoffTable:
    """Explicit joint-reward tensor for one-shot cooperative games."""

    def __init__(self, rewards: np.ndarray):
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.n_agents = self.rewards.ndim
        sizes = set(self.rewards.shape)
        if len(sizes) != 1:
            raise ValueError("per-agent action counts must be equal")
        self.n_actions = self.rewards.shape[0]
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("payoff entries must be finite")

    def reward(self, actions) -> float:
        u = tuple(int(a) for a in actions)
        if len(u) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(u)}")
        for a in u:
            if not 0 <= a < self.n_actions:
                raise ValueError(f"action {a} out of range 0..{self.n_actions - 1}")
        return float(self.rewards[u])

    def save(self, path):
        """Plain text: first line "n_agents actions", then row-major rewards."""
        with open(path, "w") as f:
            f.write(f"{self.n_agents} {self.n_actions}\n")
            for v in self.rewards.reshape(-1):
                f.write(f"{float(v)!r}\n")

    @classmethod
    def load(cls, path) -> "PayoffTable":
        with open(path) as f:
            n_agents, n_actions = map(int, f.readline().split())
            values = [float(line) for line in f if line.strip()]
        expected = n_actions ** n_agents
        if len(values) != expected:
            raise ValueError(f"{path}: expected {expected} rewards, got {len(values)}")
        return cls(np.array(values).reshape((n_actions,) * n_agents))


def penalty_game() -> PayoffTable:
    """3x3 two-agent game whose single optimum sits next to -12 penalties.

    Any unilateral slip away from the best joint action is punished hard,
    so the payoff is strongly non-monotonic in each agent's value.
    """
    return PayoffTable(np.array([
        [8.0, -12.0, -12.0],
        [-12.0, 0.0, 0.0],
        [-12.0, 0.0, 0.0],
    ]))


def two_peak_reward(u1: int, u2: int) -> float:
    """21-action game: max of a wide low hump and a narrow high one.

    The global maximum 10 is at (5, 15); a flat local maximum 5 sits at
    (15, 5), which is much easier to find by hill climbing.
    """
    if not (0 <= u1 <= 20 and 0 <= u2 <= 20):
        raise ValueError("actions must lie in 0..20")
    f1 = 5.0 - ((15.0 - u1) / 3.0) ** 2 - ((5.0 - u2) / 3.0) ** 2
    f2 = 10.0 - (5.0 - u1) ** 2 - (15.0 - u2) ** 2
    return max(f1, f2)


def two_peak_game() -> PayoffTable:
    grid = np.empty((21, 21))
    for u1 in range(21):
        for u2 in range(21):
            grid[u1, u2] = two_peak_reward(u1, u2)
    return PayoffTable(grid)


def random_payoff(rng: np.random.Generator, n_agents: int = 2,
                  n_actions: int = 3) -> PayoffTable:
    """Payoff tensor with i.i.d. uniform [0, 1) entries."""
    return PayoffTable(rng.random((n_actions,) * n_agents))


class MatrixGame:
    """One-shot game on a payoff table; every agent sees a constant input."""

    single_state = True
    episode_limit = 1

    def __init__(self, table: PayoffTable):
        self.table = table
        self.n_agents = table.n_agents
        self.n_actions = table.n_actions
        self.obs_dim = 1
        self._obs = np.ones((self.n_agents, 1))

    def reset(self) -> np.ndarray:
        return self._obs

    def step(self, actions):
        return self._obs, self.table.reward(actions), True


class GaussianSqueeze:
    """One-shot resource allocation: N agents each pick a usage level 0..9.

    Total usage x = sum_i s_i * u_i is rewarded with
    sum_k x * exp(-(x - mu_k)^2 / sigma_k^2), one bump per domain; with two
    domains the wide low bump is an attractive trap next to the narrow high
    one. Observations are the (static) resource vector plus a one-hot agent
    id so that agents can share network parameters.
    """

    single_state = True
    episode_limit = 1

    def __init__(self, s, mus, sigmas, n_actions: int = 10):
        self.s = np.asarray(s, dtype=np.float64)
        self.mus = np.asarray(mus, dtype=np.float64)
        self.sigmas = np.asarray(sigmas, dtype=np.float64)
        if self.mus.shape != self.sigmas.shape or self.mus.ndim != 1 or self.mus.size < 1:
            raise ValueError("mus and sigmas must be equal-length vectors")
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be positive")
        if np.any(self.s < 0) or np.any(self.s > 0.2):
            raise ValueError("per-agent resources must lie in [0, 0.2]")
        self.n_agents = self.s.size
        self.n_actions = n_actions
        self.obs_dim = 2 * self.n_agents
        self._obs = np.hstack([
            np.tile(self.s, (self.n_agents, 1)),
            np.eye(self.n_agents),
        ])

    def reward_of_usage(self, x: float) -> float:
        return float(np.sum(x * np.exp(-((x - self.mus) ** 2) / self.sigmas ** 2)))

    def reward(self, actions) -> float:
        u = np.asarray(actions)
        if u.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} actions")
        if np.any(u < 0) or np.any(u >= self.n_actions):
            raise ValueError("action out of range")
        return self.reward_of_usage(float(self.s @ u))

    def optimal_reward(self) -> float:
        """Exact optimum by enumerating total usage; needs equal resources.

        With all s_i equal, x only depends on sum_i u_i, which ranges over
        0 .. (n_actions-1)*n_agents, so the joint space collapses to a line.
        """
        if not np.all(self.s == self.s[0]):
            raise ValueError("exact enumeration requires equal s_i")
        total = (self.n_actions - 1) * self.n_agents
        return max(self.reward_of_usage(self.s[0] * m) for m in range(total + 1))

    def reset(self) -> np.ndarray:
        return self._obs

    def step(self, actions):
        return self._obs, self.reward(actions), True


def gs_single_domain(s=0.1, n_agents: int = 10) -> GaussianSqueeze:
    return GaussianSqueeze(np.full(n_agents, s), mus=[8.0], sigmas=[1.0])


def gs_multi_domain(s=0.1, n_agents: int = 10) -> GaussianSqueeze:
    """Two domains: a narrow high bump at usage 8 and a wide one at 5.

    With equal resources of 0.1 the high bump sits exactly on the
    everyone-picks-8 profile (reward 8.0) and the wide pitfall on
    everyone-picks-5 (reward 5.0, half as good but far easier to find).
    """
    return GaussianSqueeze(np.full(n_agents, s), mus=[8.0, 5.0], sigmas=[0.5, 1.0])


# Predator-prey grid world ---------------------------------------------------

LEFT, RIGHT, UP, DOWN, STOP = range(5)
_MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)])


class PredatorPrey:
    """Grid world where predators must corner randomly walking prey.

    A prey is caught by every predator standing in a cardinally adjacent
    cell after all moves resolve. Each prey caught by two or more predators
    at once pays the team +1 and respawns at a uniformly random cell; a prey
    caught by exactly one predator costs -penalty and stays. Cells may be
    shared. Episodes always run for episode_limit steps.

    Each agent observes its own coordinates scaled to [0, 1], a one-hot
    agent id, and per prey (dx, dy, visible): the prey's offset in cells
    when it lies inside the agent's view window (up is negative dy),
    zeros with visible=0 otherwise.
    """

    single_state = False

    def __init__(self, grid_w: int = 5, grid_h: int = 5, n_predators: int = 2,
                 n_prey: int = 1, penalty: float = 1.5,
                 rng: np.random.Generator | None = None,
                 episode_limit: int = 100, view: int = 5):
        self.grid_w = grid_w
        self.grid_h = grid_h
        self.n_agents = n_predators
        self.n_prey = n_prey
        self.penalty = float(penalty)
        self.n_actions = 5
        self.episode_limit = episode_limit
        self.view_radius = view // 2
        self.rng = rng if rng is not None else np.random.default_rng()
        self.obs_dim = 2 + self.n_agents + 3 * self.n_prey
        self.predators = np.zeros((self.n_agents, 2), dtype=np.int64)
        self.prey = np.zeros((self.n_prey, 2), dtype=np.int64)
        self._t = 0

    def _random_cells(self, n: int) -> np.ndarray:
        xs = self.rng.integers(0, self.grid_w, size=n)
        ys = self.rng.integers(0, self.grid_h, size=n)
        return np.stack([xs, ys], axis=1)

    def reset(self) -> np.ndarray:
        self.predators = self._random_cells(self.n_agents)
        self.prey = self._random_cells(self.n_prey)
        self._t = 0
        return self.observe()

    def _clip(self, cells: np.ndarray) -> np.ndarray:
        cells[:, 0] = np.clip(cells[:, 0], 0, self.grid_w - 1)
        cells[:, 1] = np.clip(cells[:, 1], 0, self.grid_h - 1)
        return cells

    def step(self, actions):
        u = np.asarray(actions, dtype=np.int64)
        if u.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} actions")
        if np.any(u < 0) or np.any(u >= 5):
            raise ValueError("action index out of range")
        self.predators = self._clip(self.predators + _MOVES[u])
        prey_moves = self.rng.integers(0, 5, size=self.n_prey)
        self.prey = self._clip(self.prey + _MOVES[prey_moves])

        reward = 0.0
        for k in range(self.n_prey):
            dist = np.abs(self.predators - self.prey[k]).sum(axis=1)
            catchers = int(np.count_nonzero(dist == 1))
            if catchers >= 2:
                reward += 1.0
                self.prey[k] = self._random_cells(1)[0]
            elif catchers == 1:
                reward -= self.penalty

        self._t += 1
        return self.observe(), reward, self._t >= self.episode_limit

    def observe(self) -> np.ndarray:
        obs = np.zeros((self.n_agents, self.obs_dim))
        obs[:, 0] = self.predators[:, 0] / (self.grid_w - 1)
        obs[:, 1] = self.predators[:, 1] / (self.grid_h - 1)
        obs[np.arange(self.n_agents), 2 + np.arange(self.n_agents)] = 1.0
        base = 2 + self.n_agents
        for k in range(self.n_prey):
            d = self.prey[k] - self.predators
            visible = (np.abs(d) <= self.view_radius).all(axis=1)
            obs[visible, base + 3 * k] = d[visible, 0]
            obs[visible, base + 3 * k + 1] = d[visible, 1]
            obs[visible, base + 3 * k + 2] = 1.0
        return obs

    def render(self) -> str:
        """ASCII dump for debugging: predator index, 'p' for prey."""
        grid = [["." for _ in range(self.grid_w)] for _ in range(self.grid_h)]
        for k, (x, y) in enumerate(self.prey):
            grid[y][x] = "p"
        for i, (x, y) in enumerate(self.predators):
            grid[y][x] = str(i)
        return "\n".join("".join(row) for row in grid)
