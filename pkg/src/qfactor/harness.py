"""Experiment orchestration: config files, CSV metrics, sweeps, summaries.

Config files are flat key-value text ("key = value", '#' comments, dotted
section keys). Metric CSVs have exactly the MetricRow columns. Runs are
deterministic per (config, seed) and each (algo, seed) writes its own
files, so a worker pool can dispatch them without any shared state.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import envs
from .agents import ALGOS, NetConfig, net_config_for
from .training import MetricRow, TrainConfig, train

CSV_COLUMNS = ["step", "seed", "algo", "env_tag", "eval_reward_mean",
               "loss_td", "loss_opt", "loss_nopt", "epsilon"]

ENV_NAMES = ("matrix", "wide_matrix", "gs", "mgs", "mpp")


class ConfigError(ValueError):
    pass


# -- flat key-value config format ---------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def serialize_config(mapping: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def load_config_file(path) -> dict[str, str]:
    with open(path) as f:
        return parse_config_text(f.read())


# -- experiment configuration ---------------------------------------------------

_ENV_DEFAULTS = {
    "matrix": dict(total_steps=20000, buffer_size=20000, eps_end=1.0,
                   eval_interval=1000),
    "wide_matrix": dict(total_steps=8000, buffer_size=20000, eps_end=1.0,
                        eval_interval=1000),
    "gs": dict(total_steps=200000, buffer_size=200000, eps_end=0.1,
               eps_anneal_steps=160000, eval_interval=5000),
    "mgs": dict(total_steps=200000, buffer_size=200000, eps_end=0.1,
                eps_anneal_steps=160000, eval_interval=5000),
    "mpp": dict(total_steps=300000, buffer_size=100000, gamma=0.99,
                target_update_period=10000, eps_end=0.1,
                eps_anneal_steps=90000, eval_interval=5000),
}


@dataclass
class ExperimentConfig:
    env_name: str
    algo: str
    train: TrainConfig
    net: NetConfig | None = None
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: str = "runs"
    env_tag: str = ""
    env_params: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.env_name not in ENV_NAMES:
            raise ConfigError(f"env.name must be one of {ENV_NAMES}")
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}")
        if not self.env_tag:
            self.env_tag = self.env_name


def _parse_scalar(field_type, value: str):
    if field_type == "int":
        return int(value)
    if field_type == "float":
        return float(value)
    if field_type == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return value


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_NET_FIELDS = {f.name: f for f in fields(NetConfig)}


def config_from_mapping(mapping: dict[str, str]) -> ExperimentConfig:
    m = dict(mapping)
    env_name = m.pop("env.name", None)
    if env_name is None:
        raise ConfigError("missing required key env.name")
    algo = m.pop("algo", None)
    if algo is None:
        raise ConfigError("missing required key algo")

    train_kwargs = dict(_ENV_DEFAULTS.get(env_name, {}))
    net_kwargs: dict = {}
    env_params: dict[str, str] = {}
    seeds = [1, 2, 3, 4, 5]
    output_dir = "runs"
    env_tag = ""

    for key, value in m.items():
        try:
            if key.startswith("train."):
                name = key[len("train."):]
                if name not in _TRAIN_FIELDS:
                    raise ConfigError(f"unknown train key {key!r}")
                kind = ("int" if "int" in str(_TRAIN_FIELDS[name].type)
                        else "float")
                if value.lower() == "none":
                    train_kwargs[name] = None
                else:
                    train_kwargs[name] = _parse_scalar(kind, value)
            elif key.startswith("net."):
                name = key[len("net."):]
                if name not in _NET_FIELDS:
                    raise ConfigError(f"unknown net key {key!r}")
                kind = "bool" if name == "shared" else "int"
                net_kwargs[name] = _parse_scalar(kind, value)
            elif key.startswith("env."):
                env_params[key[len("env."):]] = value
            elif key == "seeds":
                seeds = [int(s) for s in value.split(",") if s.strip()]
            elif key == "output_dir":
                output_dir = value
            elif key == "tag":
                env_tag = value
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from None

    net = NetConfig(**net_kwargs) if net_kwargs else None
    return ExperimentConfig(env_name=env_name, algo=algo,
                            train=TrainConfig(**train_kwargs), net=net,
                            seeds=seeds, output_dir=output_dir,
                            env_tag=env_tag, env_params=env_params)


def config_to_mapping(cfg: ExperimentConfig) -> dict[str, str]:
    out = {"env.name": cfg.env_name, "algo": cfg.algo}
    for k, v in cfg.env_params.items():
        out[f"env.{k}"] = v
    for f in fields(TrainConfig):
        v = getattr(cfg.train, f.name)
        out[f"train.{f.name}"] = "none" if v is None else repr(v)
    if cfg.net is not None:
        for f in fields(NetConfig):
            out[f"net.{f.name}"] = str(getattr(cfg.net, f.name)).lower()
    out["seeds"] = ",".join(map(str, cfg.seeds))
    out["output_dir"] = cfg.output_dir
    out["tag"] = cfg.env_tag
    return out


def make_env_factory(cfg: ExperimentConfig):
    """Returns make_env(rng) building a fresh environment per call."""
    name, p = cfg.env_name, cfg.env_params

    if name in ("matrix", "wide_matrix"):
        if "payoff_file" in p:
            table = envs.PayoffTable.load(p["payoff_file"])
        elif name == "matrix":
            table = envs.penalty_game()
        else:
            table = envs.two_peak_game()
        return lambda rng: envs.MatrixGame(table)

    if name in ("gs", "mgs"):
        n_agents = int(p.get("n_agents", 10))
        s = float(p.get("s", 0.1))
        if "mus" in p:
            mus = [float(v) for v in p["mus"].split(",")]
            sigmas = [float(v) for v in p["sigmas"].split(",")]
        elif name == "gs":
            mus, sigmas = [8.0], [1.0]
        else:
            mus, sigmas = [8.0, 5.0], [0.5, 1.0]
        return lambda rng: envs.GaussianSqueeze(np.full(n_agents, s), mus, sigmas)

    grid_w = int(p.get("grid_w", 5))
    grid_h = int(p.get("grid_h", 5))
    n_predators = int(p.get("n_predators", 2))
    n_prey = int(p.get("n_prey", 1))
    penalty = float(p.get("penalty", 1.5))
    return lambda rng: envs.PredatorPrey(grid_w=grid_w, grid_h=grid_h,
                                         n_predators=n_predators,
                                         n_prey=n_prey, penalty=penalty,
                                         rng=rng)


# -- metric CSV io ----------------------------------------------------------------

def write_metrics(path, rows: list[MetricRow]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.step, r.seed, r.algo, r.env_tag,
                        repr(float(r.eval_reward_mean)), repr(float(r.loss_td)),
                        repr(float(r.loss_opt)), repr(float(r.loss_nopt)),
                        repr(float(r.epsilon))])


def read_metrics(path) -> list[MetricRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected CSV header {header}")
        for rec in reader:
            rows.append(MetricRow(int(rec[0]), int(rec[1]), rec[2], rec[3],
                                  float(rec[4]), float(rec[5]), float(rec[6]),
                                  float(rec[7]), float(rec[8])))
    return rows


# -- experiment running ---------------------------------------------------------

def n_workers(requested: int | None = None) -> int:
    cap = os.environ.get("QFACTOR_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested is not None:
        limit = min(limit, requested)
    return max(limit, 1)


def _limit_blas_threads():
    # Runs consist of many small matrix products; BLAS thread pools only
    # add contention, especially with several worker processes.
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def run_single(mapping: dict[str, str], seed: int) -> tuple[str, str]:
    """Trains one (algo, seed) run; returns (csv_path, checkpoint_path)."""
    cfg = config_from_mapping(mapping)
    os.makedirs(cfg.output_dir, exist_ok=True)
    make_env = make_env_factory(cfg)
    stem = os.path.join(cfg.output_dir, f"{cfg.env_tag}_{cfg.algo}_seed{seed}")

    def checkpoint_cb(step, asm):
        asm.save(f"{stem}_step{step}.ckpt", {"seed": seed, "env_tag": cfg.env_tag})

    assembly, metrics = train(make_env, cfg.algo, cfg.train, seed,
                              net_cfg=cfg.net, env_tag=cfg.env_tag,
                              checkpoint_cb=checkpoint_cb)
    csv_path = stem + ".csv"
    ckpt_path = stem + ".ckpt"
    write_metrics(csv_path, metrics)
    assembly.save(ckpt_path, {"seed": seed, "env_tag": cfg.env_tag})
    return csv_path, ckpt_path


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[tuple[str, str]]:
    """All seeds of one config, dispatched to a worker pool."""
    mapping = config_to_mapping(cfg)
    jobs = [(mapping, seed) for seed in cfg.seeds]
    return _pool_map(run_single, jobs, workers)


def _pool_map(fn, jobs, workers: int | None):
    w = n_workers(workers)
    if w <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    _limit_blas_threads()
    import multiprocessing as mp
    ctx = mp.get_context("spawn")
    with ctx.Pool(min(w, len(jobs))) as pool:
        return pool.starmap(fn, jobs)


# -- random-matrix study -----------------------------------------------------------

STUDY_ALGOS = ("qtran-base", "vdn", "qmix")


@dataclass
class SweepSummary:
    n: int
    steps: int
    success: dict[str, int]
    mean_final_reward: dict[str, float]
    optimal_value_mean: float
    all_equal: int = 0
    qtran_ahead: int = 0
    vdn_over_qmix: int = 0
    qmix_over_vdn: int = 0

    def lines(self) -> list[str]:
        out = [f"random 3x3 matrices: {self.n} instances, {self.steps} steps each"]
        for algo in STUDY_ALGOS:
            out.append(f"  {algo:11s} optimal {self.success[algo]:3d}/{self.n}"
                       f"   mean final reward {self.mean_final_reward[algo]:.4f}")
        out.append(f"  mean optimal value {self.optimal_value_mean:.4f}")
        out.append(f"  all equal {self.all_equal} | qtran ahead (vdn=qmix) "
                   f"{self.qtran_ahead} | vdn>qmix {self.vdn_over_qmix} | "
                   f"qmix>vdn {self.qmix_over_vdn}")
        return out


def study_one_matrix(master_seed: int, index: int, steps: int,
                     table: "envs.PayoffTable | None" = None) -> dict:
    """Trains the three compared methods on one (random) payoff table."""
    from .verifier import oracle_optimal, tabulate

    ss = np.random.SeedSequence([master_seed, index])
    if table is None:
        table = envs.random_payoff(np.random.default_rng(ss))
    train_seed = int(ss.generate_state(2)[1])
    make_env = lambda rng_: envs.MatrixGame(table)  # noqa: E731
    winners, best = oracle_optimal(table.rewards)
    cfg = TrainConfig(total_steps=steps, buffer_size=max(steps, 1),
                      eps_end=1.0, eval_interval=max(steps, 1))
    result = {"optimal_value": best}
    for algo in STUDY_ALGOS:
        asm, _ = train(make_env, algo, cfg, seed=train_seed, env_tag="random_matrix")
        tab = tabulate(asm, make_env(None))
        greedy = tab.greedy()
        result[algo] = {
            "greedy_reward": table.reward(greedy),
            "optimal": greedy in winners,
        }
    return result


def random_matrix_study(count: int, steps: int = 20000, seed: int = 0,
                        workers: int | None = None) -> SweepSummary:
    if count < 1:
        raise ValueError("need at least one matrix")
    jobs = [(seed, i, steps) for i in range(count)]
    results = _pool_map(study_one_matrix, jobs, workers)

    success = {a: 0 for a in STUDY_ALGOS}
    reward_sum = {a: 0.0 for a in STUDY_ALGOS}
    summary = SweepSummary(n=count, steps=steps, success=success,
                           mean_final_reward={}, optimal_value_mean=0.0)
    opt_sum = 0.0
    for res in results:
        opt_sum += res["optimal_value"]
        for a in STUDY_ALGOS:
            success[a] += res[a]["optimal"]
            reward_sum[a] += res[a]["greedy_reward"]
        q, v, x = (res[a]["greedy_reward"] for a in STUDY_ALGOS)
        if abs(v - x) <= 1e-9:
            if abs(q - v) <= 1e-9:
                summary.all_equal += 1
            else:
                summary.qtran_ahead += 1
        elif v > x:
            summary.vdn_over_qmix += 1
        else:
            summary.qmix_over_vdn += 1
    summary.mean_final_reward = {a: reward_sum[a] / count for a in STUDY_ALGOS}
    summary.optimal_value_mean = opt_sum / count
    return summary


# -- summaries and plots -------------------------------------------------------------

def summarize(csv_paths) -> list[dict]:
    """Mean and 95% CI of evaluation reward per (algo, step) across seeds."""
    paths = sorted(csv_paths)
    if not paths:
        raise ValueError("no metric files matched")
    by_key: dict[tuple[str, int], list[float]] = {}
    for path in paths:
        for row in read_metrics(path):
            by_key.setdefault((row.algo, row.step), []).append(row.eval_reward_mean)
    n_seeds = max(len(v) for v in by_key.values())
    if n_seeds < 2:
        raise ValueError("need at least two seeds for a confidence interval")
    out = []
    for (algo, step), vals in sorted(by_key.items()):
        arr = np.asarray(vals)
        mean = float(arr.mean())
        if len(arr) > 1:
            stderr = float(arr.std(ddof=1) / np.sqrt(len(arr)))
        else:
            stderr = 0.0
        out.append({"algo": algo, "step": step, "n": len(arr),
                    "mean": mean, "ci95": 1.96 * stderr})
    return out


def write_summary_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["algo", "step", "n", "mean", "ci95"])
        for r in rows:
            w.writerow([r["algo"], r["step"], r["n"], repr(r["mean"]),
                        repr(r["ci95"])])


def format_summary(rows: list[dict]) -> str:
    lines = [f"{'algo':12s} {'step':>9s} {'n':>3s} {'mean':>12s} {'ci95':>10s}"]
    for r in rows:
        lines.append(f"{r['algo']:12s} {r['step']:9d} {r['n']:3d} "
                     f"{r['mean']:12.4f} {r['ci95']:10.4f}")
    return "\n".join(lines)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def write_plot(csv_paths, out_path, width: int = 720, height: int = 440):
    """Mean evaluation reward per algorithm as an SVG line chart."""
    rows = summarize(csv_paths)
    by_algo: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        by_algo.setdefault(r["algo"], []).append((r["step"], r["mean"]))
    xs = [s for pts in by_algo.values() for s, _ in pts]
    ys = [v for pts in by_algo.values() for _, v in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    mx, my = 60, 30

    def px(x):
        return mx + (x - x_lo) / (x_hi - x_lo) * (width - 2 * mx)

    def py(y):
        return height - my - (y - y_lo) / (y_hi - y_lo) * (height - 2 * my)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="monospace" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{mx}" y1="{height-my}" x2="{width-mx}" '
             f'y2="{height-my}" stroke="black"/>',
             f'<line x1="{mx}" y1="{my}" x2="{mx}" y2="{height-my}" stroke="black"/>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text x="{px(xv):.0f}" y="{height-my+14:.0f}" '
                     f'text-anchor="middle">{xv:.0f}</text>')
        parts.append(f'<text x="{mx-6}" y="{py(yv)+4:.0f}" '
                     f'text-anchor="end">{yv:.3g}</text>')
    for k, (algo, pts) in enumerate(sorted(by_algo.items())):
        color = _PALETTE[k % len(_PALETTE)]
        pts = sorted(pts)
        path = " ".join(f"{px(s):.1f},{py(v):.1f}" for s, v in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{path}"/>')
        parts.append(f'<text x="{width-mx+4}" y="{my + 14*k + 4}" '
                     f'fill="{color}">{algo}</text>')
    parts.append("</svg>")
    with open(out_path, "w") as f:
        f.write("\n".join(parts) + "\n")
