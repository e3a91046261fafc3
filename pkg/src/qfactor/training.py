"""Replay, loss functions and the training loop.

One training step: act epsilon-greedily, store the transition, sample a
minibatch, take one Adam step on the method's loss, and periodically sync
the target assembly. The one-shot games have a fast path: their identical
observations are stored once and every minibatch references row 0.

Gradient blocking: the factorization losses compare the summed individual
values against the joint estimate with the joint estimate held fixed. Each
loss function accepts those fixed values via `hat` and returns the values
it used, so tests can freeze them and finite-difference the remainder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import Assembly, NetConfig, assembly_for_env
from .nn import Adam, NonFiniteGradient


@dataclass
class TrainConfig:
    total_steps: int = 20000
    lr: float = 5e-4
    batch_size: int = 32
    buffer_size: int = 20000
    gamma: float = 0.99
    lambda_opt: float = 1.0
    lambda_nopt: float = 1.0
    target_update_period: int | None = None
    eps_start: float = 1.0
    eps_end: float = 1.0
    eps_anneal_steps: int = 0
    eval_interval: int = 1000
    eval_episodes: int = 10
    checkpoint_interval: int | None = None

    def __post_init__(self):
        if self.lambda_opt < 0 or self.lambda_nopt < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.eps_end <= 1 or not 0 <= self.eps_start <= 1:
            raise ValueError("epsilon bounds must lie in [0, 1]")


def epsilon_at(cfg: TrainConfig, step: int) -> float:
    """Linear anneal from eps_start at step 0 to eps_end at anneal_steps."""
    if step >= cfg.eps_anneal_steps:
        return cfg.eps_end
    frac = step / cfg.eps_anneal_steps
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


@dataclass
class LossBreakdown:
    td: float
    opt: float = 0.0
    nopt: float = 0.0

    def total(self, lambda_opt: float = 1.0, lambda_nopt: float = 1.0) -> float:
        return self.td + lambda_opt * self.opt + lambda_nopt * self.nopt


@dataclass
class MetricRow:
    step: int
    seed: int
    algo: str
    env_tag: str
    eval_reward_mean: float
    loss_td: float
    loss_opt: float
    loss_nopt: float
    epsilon: float


@dataclass
class Batch:
    """Minibatch in row form; ridx maps each sample to its obs row."""
    obs_rows: np.ndarray        # (R, N, D)
    ridx: np.ndarray            # (B,)
    actions: np.ndarray         # (B, N)
    rewards: np.ndarray         # (B,)
    next_obs_rows: np.ndarray   # (R', N, D)
    nridx: np.ndarray           # (B,)
    done: np.ndarray            # (B,) bool

    @property
    def size(self) -> int:
        return self.rewards.shape[0]


class ReplayBuffer:
    """FIFO ring of transitions with uniform no-replacement sampling.

    For single-state environments the (constant) observations are not
    stored; sample_batch then builds compressed single-row batches.
    """

    def __init__(self, capacity: int, n_agents: int, obs_dim: int,
                 store_obs: bool = True):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.store_obs = store_obs
        if store_obs:
            self.obs = np.zeros((capacity, n_agents, obs_dim))
            self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.size = 0
        self.pos = 0

    def push(self, obs, actions, reward, next_obs, done):
        i = self.pos
        self.actions[i] = actions
        self.rewards[i] = reward
        self.done[i] = done
        if self.store_obs:
            self.obs[i] = obs
            self.next_obs[i] = next_obs
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_batch(self, batch_size: int, rng: np.random.Generator,
                     const_obs: np.ndarray | None = None) -> Batch:
        if batch_size > self.size:
            raise ValueError("not enough transitions to sample")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        if self.store_obs:
            rows = np.arange(batch_size)
            return Batch(self.obs[idx], rows, self.actions[idx],
                         self.rewards[idx], self.next_obs[idx], rows,
                         self.done[idx])
        if const_obs is None:
            raise ValueError("const_obs required when observations are not stored")
        zeros = np.zeros(batch_size, dtype=np.int64)
        single = const_obs[None, :, :]
        return Batch(single, zeros, self.actions[idx], self.rewards[idx],
                     single, zeros, self.done[idx])


def _reduce_rows(values: np.ndarray, rows: int, ridx: np.ndarray) -> np.ndarray:
    """Sum per-sample values back onto their obs rows."""
    if values.shape[0] == rows:
        return values
    out = np.zeros((rows,) + values.shape[1:])
    np.add.at(out, ridx, values)
    return out


# -- TD targets (always evaluated on the target assembly) ---------------------

def td_targets(target: Assembly, batch: Batch, gamma: float) -> np.ndarray:
    """y = r + gamma * Q_jt(next, greedy next actions); terminal -> r.

    Greedy next actions and the joint estimate both come from the target
    assembly; the joint estimate is the method's own (sum / mixer / joint
    head / mean of counterfactual heads).
    """
    y = batch.rewards.copy()
    live = ~batch.done
    if not live.any():
        return y
    algo = target.algo
    next_rows = batch.next_obs_rows
    if algo == "vdn":
        qn = target.bank.q_values(next_rows)
        qjt_next = qn.max(axis=2).sum(axis=1)
    elif algo == "qmix":
        qn = target.bank.q_values(next_rows)
        q_sel = qn.max(axis=2)[batch.nridx]
        state = next_rows.reshape(next_rows.shape[0], -1)
        qjt_b, _ = target.mix_forward(q_sel, state, batch.nridx)
        y[live] += gamma * qjt_b[live]
        return y
    else:
        q, hq, hv, _ = target.bank.forward(next_rows, features=True)
        rows = np.arange(next_rows.shape[0])[:, None]
        agents = np.arange(target.dims.n_agents)[None, :]
        ubar = q.argmax(axis=2)
        hq_bar = hq[rows, agents, ubar]
        if algo == "qtran-base":
            qjt_next = target.joint.forward(hq_bar.sum(axis=1))[0][:, 0]
        elif algo == "qtran-alt":
            sum_minus = hq_bar.sum(axis=1, keepdims=True) - hq_bar
            cols, _ = target.cf_forward(hv, sum_minus)
            qjt_next = cols[rows, agents, ubar].mean(axis=1)
        else:
            raise ValueError(f"unknown algo {algo!r}")
    y[live] += gamma * qjt_next[batch.nridx[live]]
    return y


# -- losses --------------------------------------------------------------------

def loss_vdn(batch: Batch, asm, target, cfg: TrainConfig, hat=None):
    B, N = batch.size, asm.dims.n_agents
    agents = np.arange(N)[None, :]
    q, _, _, tape = asm.bank.forward(batch.obs_rows, features=False)
    q_sel = q[batch.ridx[:, None], agents, batch.actions]
    e = q_sel.sum(axis=1) - td_targets(target, batch, cfg.gamma)
    dq = np.zeros_like(q)
    np.add.at(dq, (batch.ridx[:, None], agents, batch.actions),
              (2.0 / B) * e[:, None])
    asm.bank.backward(tape, dq)
    return LossBreakdown(td=float(np.mean(e * e))), None


def loss_qmix(batch: Batch, asm, target, cfg: TrainConfig, hat=None):
    B, N = batch.size, asm.dims.n_agents
    agents = np.arange(N)[None, :]
    q, _, _, tape = asm.bank.forward(batch.obs_rows, features=False)
    q_sel = q[batch.ridx[:, None], agents, batch.actions]
    state = batch.obs_rows.reshape(batch.obs_rows.shape[0], -1)
    q_jt, mix_cache = asm.mix_forward(q_sel, state, batch.ridx)
    e = q_jt - td_targets(target, batch, cfg.gamma)
    dq_sel = asm.mix_backward(mix_cache, (2.0 / B) * e)
    dq = np.zeros_like(q)
    np.add.at(dq, (batch.ridx[:, None], agents, batch.actions), dq_sel)
    asm.bank.backward(tape, dq)
    return LossBreakdown(td=float(np.mean(e * e))), None


def loss_qtran_base(batch: Batch, asm, target, cfg: TrainConfig, hat=None):
    B, N = batch.size, asm.dims.n_agents
    R = batch.obs_rows.shape[0]
    rows = np.arange(R)[:, None]
    agents = np.arange(N)[None, :]
    ridx = batch.ridx

    q, hq, hv, tape = asm.bank.forward(batch.obs_rows, features=True)
    q_sel = q[ridx[:, None], agents, batch.actions]          # (B, N)
    hq_sel = hq[ridx[:, None], agents, batch.actions]        # (B, N, F)
    ubar = q.argmax(axis=2)                                  # (R, N)
    q_bar = q.max(axis=2)                                    # (R, N)
    hq_bar = hq[rows, agents, ubar]                          # (R, N, F)

    qjt_u_m, tape_j = asm.joint.forward(hq_sel.sum(axis=1))
    qjt_u = qjt_u_m[:, 0]                                    # (B,)
    vjt_r, tape_v = asm.value.forward(hv.sum(axis=1))
    vjt = vjt_r[ridx, 0]                                     # (B,)

    if hat is None:
        hat_u = qjt_u.copy()
        hat_bar = asm.joint.forward(hq_bar.sum(axis=1))[0][:, 0]   # (R,)
        hat = (hat_u, hat_bar)
    else:
        hat_u, hat_bar = hat

    e_td = qjt_u - td_targets(target, batch, cfg.gamma)
    e_opt = q_bar.sum(axis=1)[ridx] - hat_bar[ridx] + vjt    # (B,)
    d_clamp = np.minimum(q_sel.sum(axis=1) - hat_u + vjt, 0.0)

    bd = LossBreakdown(td=float(np.mean(e_td * e_td)),
                       opt=float(np.mean(e_opt * e_opt)),
                       nopt=float(np.mean(d_clamp * d_clamp)))

    # TD path: through the joint head into the selected-action features.
    d_sum_hq = asm.joint.backward(tape_j, (2.0 / B) * e_td[:, None])
    dhq = np.zeros_like(hq)
    np.add.at(dhq, (ridx[:, None], agents, batch.actions), d_sum_hq[:, None, :])

    # Factorization paths: into individual values and the state value.
    g_opt = cfg.lambda_opt * (2.0 / B) * e_opt               # (B,)
    g_nopt = cfg.lambda_nopt * (2.0 / B) * d_clamp           # (B,)
    dq = np.zeros_like(q)
    np.add.at(dq, (ridx[:, None], agents, ubar[ridx]), g_opt[:, None])
    np.add.at(dq, (ridx[:, None], agents, batch.actions), g_nopt[:, None])
    d_vjt = _reduce_rows(g_opt + g_nopt, R, ridx)
    d_sum_hv = asm.value.backward(tape_v, d_vjt[:, None])
    dhv = np.broadcast_to(d_sum_hv[:, None, :], hv.shape).copy()

    asm.bank.backward(tape, dq, dhq, dhv)
    return bd, hat


def loss_qtran_alt(batch: Batch, asm, target, cfg: TrainConfig, hat=None):
    B, N = batch.size, asm.dims.n_agents
    R = batch.obs_rows.shape[0]
    rows = np.arange(R)[:, None]
    brows = np.arange(B)[:, None]
    agents = np.arange(N)[None, :]
    ridx = batch.ridx

    q, hq, hv, tape = asm.bank.forward(batch.obs_rows, features=True)
    q_sel = q[ridx[:, None], agents, batch.actions]          # (B, N)
    hq_sel = hq[ridx[:, None], agents, batch.actions]        # (B, N, F)
    ubar = q.argmax(axis=2)                                  # (R, N)
    q_bar = q.max(axis=2)                                    # (R, N)
    hq_bar = hq[rows, agents, ubar]                          # (R, N, F)

    hv_b = hv[ridx]                                          # (B, N, F)
    sum_minus_u = hq_sel.sum(axis=1, keepdims=True) - hq_sel
    cf_u, tape_cf = asm.cf_forward(hv_b, sum_minus_u)        # (B, N, A)
    q_cf_u = cf_u[brows, agents, batch.actions]              # (B, N)

    vjt_r, tape_v = asm.value.forward(hv.sum(axis=1))
    vjt = vjt_r[ridx, 0]                                     # (B,)

    if hat is None:
        hat_u_cols = cf_u.copy()
        sum_minus_bar = hq_bar.sum(axis=1, keepdims=True) - hq_bar
        cf_bar, _ = asm.cf_forward(hv, sum_minus_bar)        # (R, N, A)
        hat_bar = cf_bar[rows, agents, ubar]                 # (R, N)
        hat = (hat_u_cols, hat_bar)
    else:
        hat_u_cols, hat_bar = hat

    y = td_targets(target, batch, cfg.gamma)
    e_td = q_cf_u - y[:, None]                               # (B, N)
    qprime_bar = q_bar.sum(axis=1)                           # (R,)
    e_opt = qprime_bar[ridx][:, None] - hat_bar[ridx] + vjt[:, None]   # (B, N)

    # Per-agent deviation columns: own values vary, others stay at u.
    qprime_cols = q[ridx] + (q_sel.sum(axis=1)[:, None] - q_sel)[:, :, None]
    d_cols = qprime_cols - hat_u_cols + vjt[:, None, None]   # (B, N, A)
    mins = d_cols.min(axis=2)                                # (B, N)
    amin = d_cols.argmin(axis=2)                             # (B, N)

    bd = LossBreakdown(td=float(np.mean(e_td * e_td)),
                       opt=float(np.mean(e_opt * e_opt)),
                       nopt=float(np.mean(mins * mins)))

    scale = 2.0 / (B * N)

    # TD path through each counterfactual head at the taken action.
    d_cf = np.zeros_like(cf_u)
    d_cf[brows, agents, batch.actions] = scale * e_td
    d_hv_cf, d_sum_minus = asm.cf_backward(tape_cf, d_cf)    # (B,N,F) each
    total = d_sum_minus.sum(axis=1, keepdims=True)
    d_hq_sel = total - d_sum_minus                           # (B, N, F)
    dhq = np.zeros_like(hq)
    np.add.at(dhq, (ridx[:, None], agents, batch.actions), d_hq_sel)
    dhv = np.zeros_like(hv)
    np.add.at(dhv, ridx, d_hv_cf)

    # Factorization paths into individual values and the state value.
    g_opt = cfg.lambda_opt * scale * e_opt                   # (B, N)
    g_min = cfg.lambda_nopt * scale * mins                   # (B, N)
    dq = np.zeros_like(q)
    np.add.at(dq, (ridx[:, None], agents, ubar[ridx]),
              g_opt.sum(axis=1)[:, None])
    np.add.at(dq, (ridx[:, None], agents, amin), g_min)
    np.add.at(dq, (ridx[:, None], agents, batch.actions),
              g_min.sum(axis=1)[:, None] - g_min)
    d_vjt = _reduce_rows(g_opt.sum(axis=1) + g_min.sum(axis=1), R, ridx)
    d_sum_hv = asm.value.backward(tape_v, d_vjt[:, None])
    dhv += np.broadcast_to(d_sum_hv[:, None, :], hv.shape)

    asm.bank.backward(tape, dq, dhq, dhv)
    return bd, hat


LOSS_FNS = {
    "vdn": loss_vdn,
    "qmix": loss_qmix,
    "qtran-base": loss_qtran_base,
    "qtran-alt": loss_qtran_alt,
}


# -- training loop --------------------------------------------------------------

def evaluate(asm: Assembly, make_env, episodes: int,
             rng: np.random.Generator) -> float:
    """Mean episode return over fully greedy rollouts."""
    env = make_env(rng)
    total = 0.0
    for _ in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            obs, r, done = env.step(asm.greedy_actions(obs))
            total += r
    return total / episodes


def train(make_env, algo: str, cfg: TrainConfig, seed: int,
          net_cfg: NetConfig | None = None, env_tag: str = "env",
          checkpoint_cb=None):
    """Runs one seed of one method; returns (assembly, metric rows).

    make_env(rng) must build a fresh environment; separate instances are
    used for training and for the periodic greedy evaluations so the
    training episode stream is never disturbed.
    """
    root = np.random.SeedSequence(seed)
    init_ss, env_ss, act_ss, sample_ss = root.spawn(4)
    env = make_env(np.random.default_rng(env_ss))
    asm = assembly_for_env(algo, env, net_cfg, np.random.default_rng(init_ss))
    target = asm.clone()
    optimizer = Adam(asm.params(), cfg.lr)
    act_rng = np.random.default_rng(act_ss)
    sample_rng = np.random.default_rng(sample_ss)
    buffer = ReplayBuffer(cfg.buffer_size, env.n_agents, env.obs_dim,
                          store_obs=not env.single_state)
    loss_fn = LOSS_FNS[algo]

    obs = env.reset()
    const_obs = obs.copy() if env.single_state else None
    metrics: list[MetricRow] = []
    loss_sum = np.zeros(3)
    loss_n = 0

    for step in range(1, cfg.total_steps + 1):
        eps = epsilon_at(cfg, step - 1)
        actions = asm.act(obs, eps, act_rng)
        next_obs, reward, done = env.step(actions)
        buffer.push(obs, actions, reward, next_obs, done)
        obs = env.reset() if done else next_obs

        if buffer.size >= cfg.batch_size:
            batch = buffer.sample_batch(cfg.batch_size, sample_rng, const_obs)
            optimizer.zero_grad()
            bd, _ = loss_fn(batch, asm, target, cfg)
            if not np.isfinite(bd.total(cfg.lambda_opt, cfg.lambda_nopt)):
                raise NonFiniteGradient(
                    f"{algo} seed {seed}: non-finite loss at step {step}: {bd}")
            optimizer.step()
            loss_sum += (bd.td, bd.opt, bd.nopt)
            loss_n += 1

        if cfg.target_update_period and step % cfg.target_update_period == 0:
            target.copy_params_from(asm)

        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            if metrics and metrics[-1].step == step:
                continue
            eval_rng = np.random.default_rng(
                np.random.SeedSequence([seed, 101, step]))
            mean_r = evaluate(asm, make_env, cfg.eval_episodes, eval_rng)
            means = loss_sum / max(loss_n, 1)
            metrics.append(MetricRow(step, seed, algo, env_tag, float(mean_r),
                                     float(means[0]), float(means[1]),
                                     float(means[2]), float(eps)))
            loss_sum[:] = 0.0
            loss_n = 0

        if (checkpoint_cb and cfg.checkpoint_interval
                and step % cfg.checkpoint_interval == 0):
            checkpoint_cb(step, asm)

    return asm, metrics
