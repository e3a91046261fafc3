"""Network assemblies for the four factorization methods.

Each assembly owns per-agent action-value networks (an AgentBank) plus its
own mixing machinery:

    vdn         joint value = sum of selected individual values
    qmix        monotone one-hidden-layer mixer, weights from hypernetworks
    qtran-base  joint and state-value heads fed by summed hidden features
    qtran-alt   per-agent counterfactual joint heads instead of one joint head

Forward helpers work on "row" batches: observations come as (R, n_agents,
obs_dim) where R is either the minibatch size or 1 when every sample shares
the same observation (the one-shot games). A row index array maps samples
to rows so gathers and gradient scatters stay uniform across both cases.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .nn import MLP, Dense, Param, snapshot_into, save_arrays, load_arrays


@dataclass(frozen=True)
class Dims:
    n_agents: int
    n_actions: int
    obs_dim: int

    @property
    def state_dim(self) -> int:
        return self.n_agents * self.obs_dim


@dataclass(frozen=True)
class NetConfig:
    """Widths and depths; one-shot games use 32/2, the others 64/3."""
    hidden: int = 32
    feat: int = 32
    trunk_layers: int = 2
    joint_layers: int = 2
    mix_embed: int = 32
    shared: bool = False


def net_config_for(env) -> NetConfig:
    if getattr(env, "single_state", False) and env.n_agents <= 2:
        return NetConfig(hidden=32, feat=32, trunk_layers=2, shared=False)
    return NetConfig(hidden=64, feat=64, trunk_layers=3, shared=True)


class AgentNet:
    """Trunk MLP with an action-value head and a hidden-feature head.

    The feature head emits one feature row per action (selected later by
    the taken action) plus an action-independent feature block, giving the
    joint heads their summed inputs.
    """

    def __init__(self, obs_dim: int, n_actions: int, cfg: NetConfig,
                 rng: np.random.Generator):
        dims = [obs_dim] + [cfg.hidden] * cfg.trunk_layers
        self.trunk = MLP(dims, rng, out_activation="relu")
        self.q_head = Dense(cfg.hidden, n_actions, "identity", rng)
        self.feat_head = Dense(cfg.hidden, n_actions * cfg.feat + cfg.feat,
                               "identity", rng)
        self.n_actions = n_actions
        self.feat = cfg.feat

    def forward(self, x: np.ndarray, features: bool = True):
        rows = x.shape[0]
        trunk_out, trunk_tape = self.trunk.forward(x)
        q, q_cache = self.q_head.forward(trunk_out)
        if features:
            f, f_cache = self.feat_head.forward(trunk_out)
            hq = f[:, :self.n_actions * self.feat].reshape(
                rows, self.n_actions, self.feat)
            hv = f[:, self.n_actions * self.feat:]
        else:
            hq = hv = f_cache = None
        return q, hq, hv, (trunk_tape, q_cache, f_cache)

    def backward(self, tape, dq, dhq=None, dhv=None):
        trunk_tape, q_cache, f_cache = tape
        d_trunk = self.q_head.backward(q_cache, dq)
        if dhq is not None or dhv is not None:
            rows = dq.shape[0]
            df = np.concatenate(
                [dhq.reshape(rows, -1), dhv], axis=1)
            d_trunk = d_trunk + self.feat_head.backward(f_cache, df)
        self.trunk.backward(trunk_tape, d_trunk)

    def params(self) -> list[Param]:
        return self.trunk.params() + self.q_head.params() + self.feat_head.params()


class AgentBank:
    """N per-agent networks, either separate or one shared by agent id."""

    def __init__(self, dims: Dims, cfg: NetConfig, rng: np.random.Generator):
        self.dims = dims
        self.cfg = cfg
        n_nets = 1 if cfg.shared else dims.n_agents
        self.nets = [AgentNet(dims.obs_dim, dims.n_actions, cfg, rng)
                     for _ in range(n_nets)]

    @property
    def shared(self) -> bool:
        return len(self.nets) == 1

    def forward(self, obs_rows: np.ndarray, features: bool = True):
        """obs_rows (R, N, D) -> q (R,N,A), hq (R,N,A,F), hv (R,N,F), tape."""
        R, N, D = obs_rows.shape
        if self.shared:
            q, hq, hv, tape = self.nets[0].forward(
                obs_rows.reshape(R * N, D), features)
            q = q.reshape(R, N, -1)
            if features:
                hq = hq.reshape(R, N, self.dims.n_actions, -1)
                hv = hv.reshape(R, N, -1)
            return q, hq, hv, tape
        qs, hqs, hvs, tapes = [], [], [], []
        for i, net in enumerate(self.nets):
            q, hq, hv, tape = net.forward(obs_rows[:, i, :], features)
            qs.append(q)
            hqs.append(hq)
            hvs.append(hv)
            tapes.append(tape)
        q = np.stack(qs, axis=1)
        hq = np.stack(hqs, axis=1) if features else None
        hv = np.stack(hvs, axis=1) if features else None
        return q, hq, hv, tapes

    def backward(self, tape, dq, dhq=None, dhv=None):
        R, N = dq.shape[:2]
        if self.shared:
            self.nets[0].backward(
                tape,
                dq.reshape(R * N, -1),
                None if dhq is None else dhq.reshape(R * N, self.dims.n_actions, -1),
                None if dhv is None else dhv.reshape(R * N, -1))
        else:
            for i, net in enumerate(self.nets):
                net.backward(tape[i], dq[:, i],
                             None if dhq is None else dhq[:, i],
                             None if dhv is None else dhv[:, i])

    def q_values(self, obs_rows: np.ndarray) -> np.ndarray:
        """Action values only, tape discarded; for acting and evaluation."""
        q, _, _, _ = self.forward(obs_rows, features=False)
        return q

    def params(self) -> list[Param]:
        return [p for net in self.nets for p in net.params()]


def vdn_joint_value(q_selected: np.ndarray) -> np.ndarray:
    """Additive joint value: plain sum of the chosen per-agent values."""
    return np.asarray(q_selected).sum(axis=-1)


class Assembly:
    """Shared surface: action selection, cloning, checkpointing."""

    algo = "?"

    def __init__(self, dims: Dims, cfg: NetConfig, rng: np.random.Generator):
        self.dims = dims
        self.cfg = cfg
        self.bank = AgentBank(dims, cfg, rng)

    # -- acting -------------------------------------------------------------

    def greedy_actions(self, obs: np.ndarray) -> np.ndarray:
        """Componentwise argmax of the individual values; ties -> lowest."""
        q = self.bank.q_values(obs[None, :, :])[0]
        return np.argmax(q, axis=1)

    def act(self, obs: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
        """Per-agent epsilon-greedy: each agent randomises independently."""
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        n = self.dims.n_agents
        if eps == 0.0:
            return self.greedy_actions(obs)
        explore = rng.random(n) < eps
        actions = np.zeros(n, dtype=np.int64)
        for i in np.flatnonzero(explore):
            actions[i] = rng.integers(self.dims.n_actions)
        if not explore.all():
            greedy = self.greedy_actions(obs)
            actions[~explore] = greedy[~explore]
        return actions

    # -- parameter plumbing ---------------------------------------------------

    def extra_params(self) -> list[Param]:
        return []

    def params(self) -> list[Param]:
        return self.bank.params() + self.extra_params()

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def clone(self) -> "Assembly":
        twin = type(self)(self.dims, self.cfg, np.random.default_rng(0))
        snapshot_into(self.params(), twin.params())
        return twin

    def copy_params_from(self, other: "Assembly"):
        snapshot_into(other.params(), self.params())

    # -- checkpointing --------------------------------------------------------

    def named_params(self) -> dict[str, Param]:
        out = {}
        for i, net in enumerate(self.bank.nets):
            role = "agent_shared" if self.bank.shared else f"agent{i}"
            for j, p in enumerate(net.params()):
                out[f"{role}/p{j}"] = p
        for j, p in enumerate(self.extra_params()):
            out[f"{self._extra_role(j)}/p{j}"] = p
        return out

    def _extra_role(self, idx: int) -> str:
        return "mixer"

    def save(self, path, extra_meta: dict | None = None):
        meta = {
            "algo": self.algo,
            "dims": asdict(self.dims),
            "net": asdict(self.cfg),
            "components": sorted({k.split("/")[0] for k in self.named_params()}),
        }
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, {k: p.value for k, p in self.named_params().items()}, meta)

    @staticmethod
    def load(path) -> "Assembly":
        arrays, meta = load_arrays(path)
        dims = Dims(**meta["dims"])
        cfg = NetConfig(**meta["net"])
        asm = build_assembly(meta["algo"], dims, cfg, np.random.default_rng(0))
        named = asm.named_params()
        if set(named) != set(arrays):
            raise ValueError(f"{path}: checkpoint does not match architecture")
        for k, p in named.items():
            if p.value.shape != arrays[k].shape:
                raise ValueError(f"{path}: shape mismatch for {k}")
            p.value[...] = arrays[k]
        return asm

    # -- enumeration hooks (one-shot games; used by the verifier) -------------

    def joint_q_values(self, obs: np.ndarray, joint_actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_value(self, obs: np.ndarray):
        """Action-independent value estimate, or None if the method has none."""
        return None


class VdnAssembly(Assembly):
    algo = "vdn"

    def joint_q_values(self, obs, joint_actions):
        q = self.bank.q_values(obs[None, :, :])[0]
        return q[np.arange(self.dims.n_agents), joint_actions].sum(axis=1)


class QmixAssembly(Assembly):
    """Monotone mixer: weights are hypernetwork outputs through abs()."""

    algo = "qmix"

    def __init__(self, dims, cfg, rng):
        super().__init__(dims, cfg, rng)
        s, e, n = dims.state_dim, cfg.mix_embed, dims.n_agents
        self.hyper_w1 = Dense(s, n * e, "identity", rng)
        self.hyper_b1 = Dense(s, e, "identity", rng)
        self.hyper_w2 = Dense(s, e, "identity", rng)
        self.hyper_b2 = Dense(s, 1, "identity", rng)

    def extra_params(self):
        return (self.hyper_w1.params() + self.hyper_b1.params()
                + self.hyper_w2.params() + self.hyper_b2.params())

    def mix_forward(self, q_sel: np.ndarray, state_rows: np.ndarray,
                    ridx: np.ndarray):
        """q_sel (B, N) + state rows (R, S) -> joint values (B,)."""
        n, e = self.dims.n_agents, self.cfg.mix_embed
        w1_raw, c1 = self.hyper_w1.forward(state_rows)
        b1_raw, c2 = self.hyper_b1.forward(state_rows)
        w2_raw, c3 = self.hyper_w2.forward(state_rows)
        b2_raw, c4 = self.hyper_b2.forward(state_rows)
        w1 = np.abs(w1_raw).reshape(-1, n, e)[ridx]
        w2 = np.abs(w2_raw)[ridx]
        h_pre = np.einsum("bn,bne->be", q_sel, w1) + b1_raw[ridx]
        h = np.maximum(h_pre, 0.0)
        q_jt = (h * w2).sum(axis=1) + b2_raw[ridx, 0]
        cache = (c1, c2, c3, c4, w1_raw, w2_raw, w1, w2,
                 q_sel, h_pre, h, ridx, state_rows.shape[0])
        return q_jt, cache

    def mix_backward(self, cache, d_qjt: np.ndarray) -> np.ndarray:
        (c1, c2, c3, c4, w1_raw, w2_raw, w1, w2,
         q_sel, h_pre, h, ridx, rows) = cache
        n, e = self.dims.n_agents, self.cfg.mix_embed
        dh = w2 * d_qjt[:, None]
        dw2 = h * d_qjt[:, None]
        dh_pre = dh * (h_pre > 0.0)
        dw1 = q_sel[:, :, None] * dh_pre[:, None, :]
        dq_sel = np.einsum("be,bne->bn", dh_pre, w1)

        def reduce(v):
            if v.shape[0] == rows:
                return v
            out = np.zeros((rows,) + v.shape[1:])
            np.add.at(out, ridx, v)
            return out

        dw1_r = reduce(dw1).reshape(rows, n * e) * np.sign(w1_raw)
        dw2_r = reduce(dw2) * np.sign(w2_raw)
        self.hyper_w1.backward(c1, dw1_r)
        self.hyper_b1.backward(c2, reduce(dh_pre))
        self.hyper_w2.backward(c3, dw2_r)
        self.hyper_b2.backward(c4, reduce(d_qjt)[:, None])
        return dq_sel

    def joint_q_values(self, obs, joint_actions):
        q = self.bank.q_values(obs[None, :, :])[0]
        q_sel = q[np.arange(self.dims.n_agents), joint_actions]
        state = obs.reshape(1, -1)
        ridx = np.zeros(len(joint_actions), dtype=np.int64)
        q_jt, _ = self.mix_forward(q_sel, state, ridx)
        return q_jt


class QtranBaseAssembly(Assembly):
    """Joint and state-value heads over summed hidden features."""

    algo = "qtran-base"

    def __init__(self, dims, cfg, rng):
        super().__init__(dims, cfg, rng)
        shape = [cfg.feat] + [cfg.hidden] * cfg.joint_layers + [1]
        self.joint = MLP(shape, rng)
        self.value = MLP(shape, rng)

    def extra_params(self):
        return self.joint.params() + self.value.params()

    def _extra_role(self, idx: int) -> str:
        return "joint" if idx < len(self.joint.params()) else "value"

    def joint_q_values(self, obs, joint_actions):
        _, hq, _, _ = self.bank.forward(obs[None, :, :])
        sel = hq[0][np.arange(self.dims.n_agents), joint_actions]  # (M, N, F)
        out, _ = self.joint.forward(sel.sum(axis=1))
        return out[:, 0]

    def state_value(self, obs):
        _, _, hv, _ = self.bank.forward(obs[None, :, :])
        out, _ = self.value.forward(hv[0].sum(axis=0, keepdims=True))
        return float(out[0, 0])


class QtranAltAssembly(Assembly):
    """Per-agent counterfactual joint heads plus the state-value head.

    Agent i's head maps (h_v of i, summed action features of everyone else)
    to a vector of joint values over i's own actions, so all single-agent
    deviations from a joint action are scored in one forward pass.
    """

    algo = "qtran-alt"

    def __init__(self, dims, cfg, rng):
        super().__init__(dims, cfg, rng)
        cf_shape = [2 * cfg.feat] + [cfg.hidden] * cfg.joint_layers + [dims.n_actions]
        n_cf = 1 if cfg.shared else dims.n_agents
        self.cf_nets = [MLP(cf_shape, rng) for _ in range(n_cf)]
        v_shape = [cfg.feat] + [cfg.hidden] * cfg.joint_layers + [1]
        self.value = MLP(v_shape, rng)

    def extra_params(self):
        return [p for net in self.cf_nets for p in net.params()] + self.value.params()

    def _extra_role(self, idx: int) -> str:
        n_cf_params = sum(len(net.params()) for net in self.cf_nets)
        if idx < n_cf_params:
            per = len(self.cf_nets[0].params())
            return "cf_shared" if len(self.cf_nets) == 1 else f"cf{idx // per}"
        return "value"

    def cf_forward(self, hv_b: np.ndarray, sum_minus: np.ndarray):
        """(B,N,F) own value features + (B,N,F) others' sums -> (B,N,A)."""
        B, N, F = hv_b.shape
        x = np.concatenate([hv_b, sum_minus], axis=2)
        if len(self.cf_nets) == 1:
            out, tape = self.cf_nets[0].forward(x.reshape(B * N, 2 * F))
            return out.reshape(B, N, -1), tape
        outs, tapes = [], []
        for i, net in enumerate(self.cf_nets):
            out, tape = net.forward(x[:, i, :])
            outs.append(out)
            tapes.append(tape)
        return np.stack(outs, axis=1), tapes

    def cf_backward(self, tape, dout: np.ndarray):
        """Returns (d_hv (B,N,F), d_sum_minus (B,N,F))."""
        B, N, A = dout.shape
        F = self.cfg.feat
        if len(self.cf_nets) == 1:
            dx = self.cf_nets[0].backward(tape, dout.reshape(B * N, A))
            dx = dx.reshape(B, N, 2 * F)
        else:
            parts = [net.backward(tape[i], dout[:, i])
                     for i, net in enumerate(self.cf_nets)]
            dx = np.stack(parts, axis=1)
        return dx[:, :, :F], dx[:, :, F:]

    def counterfactual_columns(self, obs: np.ndarray, actions: np.ndarray):
        """Joint-value and summed-value columns for one observation.

        Returns (q_jt_cols, q_prime_cols), both (n_agents, n_actions):
        row i scores all of agent i's actions with the others pinned to
        `actions`. The summed column is exactly Q_i(., a) plus the other
        agents' selected values.
        """
        q, hq, hv, _ = self.bank.forward(obs[None, :, :])
        q, hq, hv = q[0], hq[0], hv[0]
        idx = np.arange(self.dims.n_agents)
        hq_sel = hq[idx, actions]
        sum_minus = hq_sel.sum(axis=0)[None, :] - hq_sel
        cols, _ = self.cf_forward(hv[None], sum_minus[None])
        q_sel = q[idx, actions]
        total = q_sel.sum()
        q_prime_cols = q + (total - q_sel)[:, None]
        # every column crosses the joint action itself; pin those entries
        # to the one transformed value so the identity is bitwise exact
        q_prime_cols[idx, actions] = total
        return cols[0], q_prime_cols

    def joint_q_values(self, obs, joint_actions):
        """Mean of the per-agent counterfactual estimates at each action."""
        M = len(joint_actions)
        n = self.dims.n_agents
        _, hq, hv, _ = self.bank.forward(obs[None, :, :])
        hq, hv = hq[0], hv[0]
        idx = np.arange(n)
        hq_sel = hq[idx[None, :], joint_actions]              # (M, N, F)
        sum_minus = hq_sel.sum(axis=1, keepdims=True) - hq_sel
        hv_b = np.broadcast_to(hv, (M, n, hv.shape[1]))
        cols, _ = self.cf_forward(hv_b, sum_minus)            # (M, N, A)
        vals = cols[np.arange(M)[:, None], idx[None, :], joint_actions]
        return vals.mean(axis=1)

    def state_value(self, obs):
        _, _, hv, _ = self.bank.forward(obs[None, :, :])
        out, _ = self.value.forward(hv[0].sum(axis=0, keepdims=True))
        return float(out[0, 0])


_ASSEMBLIES = {
    "vdn": VdnAssembly,
    "qmix": QmixAssembly,
    "qtran-base": QtranBaseAssembly,
    "qtran-alt": QtranAltAssembly,
}

ALGOS = tuple(_ASSEMBLIES)


def build_assembly(algo: str, dims: Dims, cfg: NetConfig,
                   rng: np.random.Generator) -> Assembly:
    try:
        cls = _ASSEMBLIES[algo]
    except KeyError:
        raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGOS}") from None
    return cls(dims, cfg, rng)


def assembly_for_env(algo: str, env, cfg: NetConfig | None,
                     rng: np.random.Generator) -> Assembly:
    dims = Dims(env.n_agents, env.n_actions, env.obs_dim)
    return build_assembly(algo, dims, cfg or net_config_for(env), rng)
