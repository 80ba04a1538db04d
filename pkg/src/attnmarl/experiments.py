"""Experiment orchestration: config files, seeded runs, metrics, curves.

Each training seed runs as an independent worker-process job with BLAS pinned
to one thread (also on the serial path), so runs are bit-reproducible
regardless of parallelism and never oversubscribe the machine.
"""

import csv
import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .bandit import QuadraticBanditEnv
from .merge_env import MergeEnv, mini_merge_0, mini_merge_2
from .models import AttentionModel, MlpModel, model_from_checkpoint_dict
from .numerics import Rng
from .ppo import PpoConfig, init_train_state, train_iteration
from .stats import aggregate_curves, welch_t_test

SCENARIOS = ("mini-merge-0", "mini-merge-2", "quadratic-bandit")
ARCHITECTURES = ("attentional", "mlp")

METRICS_FIELDS = ("iteration", "seed", "mean_episode_reward", "surrogate",
                  "value_loss", "entropy", "kl", "beta", "grad_norm",
                  "n_timesteps", "wall_clock_s")
# wall-clock is telemetry, not part of the reproducibility contract
DETERMINISTIC_FIELDS = tuple(f for f in METRICS_FIELDS if f != "wall_clock_s")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    arch: str = "attentional"
    max_rel_pos: int = 3
    edge_dropout: float = 0.0
    ppo: dict = field(default_factory=dict)
    seeds: tuple = (0,)
    iterations: int = 50
    out_dir: str = "runs/experiment"
    checkpoint_every: int = 0   # 0 = final checkpoint only

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {ARCHITECTURES}")
        if self.max_rel_pos < 0:
            raise ConfigError("max_rel_pos must be non-negative")
        if not (0.0 <= self.edge_dropout <= 1.0):
            raise ConfigError("edge_dropout must lie in [0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        valid_ppo = {f.name for f in dataclasses.fields(PpoConfig)}
        for key in self.ppo:
            if key not in valid_ppo:
                raise ConfigError(f"unknown ppo override {key!r}; valid keys: {sorted(valid_ppo)}")


def parse_config(doc: dict) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    doc = dict(doc)
    if "seeds" in doc:
        doc["seeds"] = tuple(int(s) for s in doc["seeds"])
    try:
        return ExperimentConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["seeds"] = list(cfg.seeds)
    return doc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc)


# scenario-tuned training defaults; everything remains overridable per config
_SCENARIO_PPO = {
    "mini-merge-0": dict(rollouts_per_iter=20, epochs=5, minibatch=1024, lr=5e-4,
                         gamma=0.97, lam=0.95, target_kl=0.015, pad_size=5),
    # half the rollouts of the small scenario: episodes are ~3x costlier here
    "mini-merge-2": dict(rollouts_per_iter=10, epochs=5, minibatch=1024, lr=5e-4,
                         gamma=0.97, lam=0.95, target_kl=0.015, pad_size=17),
    "quadratic-bandit": dict(rollouts_per_iter=20, epochs=10, minibatch=64,
                             lr=3e-3, gamma=0.99, lam=0.95),
}


def build_ppo_config(cfg: ExperimentConfig) -> PpoConfig:
    base = dict(_SCENARIO_PPO[cfg.scenario])
    base.update(cfg.ppo)
    try:
        return PpoConfig(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad ppo settings: {exc}") from None


def build_env_factory(cfg: ExperimentConfig):
    """Environment factory plus the dimensions a model needs."""
    if cfg.scenario == "quadratic-bandit":
        env = QuadraticBanditEnv()
        return (lambda: QuadraticBanditEnv()), env.obs_dim, env.num_classes, env.action_dim, None
    preset = mini_merge_0 if cfg.scenario == "mini-merge-0" else mini_merge_2
    slots = None
    if cfg.arch == "mlp":
        slots = preset().max_controlled
    env_cfg = preset(max_rel_pos=cfg.max_rel_pos, edge_dropout=cfg.edge_dropout,
                     control_slots=slots)
    return ((lambda: MergeEnv(env_cfg)), MergeEnv.obs_dim, env_cfg.num_classes,
            MergeEnv.action_dim, env_cfg)


def build_model(cfg: ExperimentConfig, seed: int):
    _, n, num_classes, action_dim, env_cfg = build_env_factory(cfg)
    rng = Rng(seed).split("init")
    if cfg.arch == "attentional":
        return AttentionModel.init(rng, n=n, num_classes=num_classes,
                                   action_dim=action_dim)
    capacity = env_cfg.max_controlled if env_cfg is not None else 1
    return MlpModel.init(rng, capacity=capacity, n=n, action_dim=action_dim)


def checkpoint_doc(cfg: ExperimentConfig, model, iteration: int) -> dict:
    doc = model.checkpoint_dict()
    doc["scenario"] = cfg.scenario
    doc["max_rel_pos"] = cfg.max_rel_pos
    doc["edge_dropout"] = cfg.edge_dropout
    doc["iteration"] = iteration
    return doc


def metrics_path(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"metrics_seed{seed}.csv"


def train_one_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Full training run for one seed; returns summary paths."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env_factory = build_env_factory(cfg)[0]
    model = build_model(cfg, seed)
    ppo_cfg = build_ppo_config(cfg)
    state = init_train_state(model, ppo_cfg)
    rng = Rng(seed).split("train")
    mpath = metrics_path(cfg.out_dir, seed)
    t0 = time.time()
    with open(mpath, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for it in range(cfg.iterations):
            state, stats = train_iteration(env_factory, state, ppo_cfg, rng)
            writer.writerow({
                "iteration": it, "seed": seed,
                "mean_episode_reward": repr(stats.mean_episode_reward),
                "surrogate": repr(stats.surrogate),
                "value_loss": repr(stats.value_loss),
                "entropy": repr(stats.entropy),
                "kl": repr(stats.kl), "beta": repr(stats.beta),
                "grad_norm": repr(stats.grad_norm),
                "n_timesteps": stats.n_timesteps,
                "wall_clock_s": round(time.time() - t0, 3),
            })
            fh.flush()
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                _write_checkpoint(cfg, state.model, it, seed)
    ckpt = _write_checkpoint(cfg, state.model, cfg.iterations - 1, seed, final=True)
    return {"seed": seed, "metrics": str(mpath), "checkpoint": str(ckpt)}


def _write_checkpoint(cfg, model, iteration, seed, final=False):
    name = f"checkpoint_seed{seed}" + ("_final" if final else f"_it{iteration}")
    path = Path(cfg.out_dir) / f"{name}.json"
    with open(path, "w") as fh:
        json.dump(checkpoint_doc(cfg, model, iteration), fh)
    return path


@contextmanager
def _blas_single_thread():
    """Pin BLAS to one thread for the enclosed computation.

    Every seed job runs under this regardless of worker count, so results
    never depend on parallelism or core count.
    """
    try:
        import threadpoolctl
    except ImportError:
        yield
        return
    with threadpoolctl.threadpool_limits(1):
        yield


def _seed_worker(args):
    cfg_doc, seed = args
    with _blas_single_thread():
        return train_one_seed(parse_config(cfg_doc), seed)


def max_workers() -> int:
    cap = os.environ.get("ATTN_MARL_THREADS")
    if cap:
        return max(1, int(cap))
    return max(1, os.cpu_count() or 1)


def run_train(cfg: ExperimentConfig) -> list:
    """Train every seed (process-parallel), then persist the resolved config
    next to the outputs. Returns one summary dict per seed."""
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(cfg.out_dir) / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
    jobs = [(config_to_dict(cfg), seed) for seed in cfg.seeds]
    results = _run_jobs(_seed_worker, jobs)
    return results


def _run_jobs(worker, jobs):
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [worker(job) for job in jobs]
    ctx = get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(worker, jobs))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _env_from_checkpoint(doc: dict):
    scenario = doc.get("scenario")
    if scenario == "quadratic-bandit":
        return QuadraticBanditEnv(), None
    if scenario not in ("mini-merge-0", "mini-merge-2"):
        raise ValueError(f"checkpoint carries unknown scenario {scenario!r}")
    preset = mini_merge_0 if scenario == "mini-merge-0" else mini_merge_2
    slots = preset().max_controlled if doc.get("arch") == "mlp" else None
    env_cfg = preset(max_rel_pos=int(doc.get("max_rel_pos", 3)),
                     edge_dropout=float(doc.get("edge_dropout", 0.0)),
                     control_slots=slots)
    return MergeEnv(env_cfg), env_cfg


def _episode_metrics(env, model, rng, trace_path=None):
    """One deterministic (mean-action) episode; returns reward and speed."""
    from .merge_env import vehicle_records

    obs, g = env.reset(rng)
    total_reward = 0.0
    speeds = []
    traces = []
    for _ in range(env.horizon):
        if model is not None and model.n_act_rows(obs.n_valid) > 0:
            means, _ = model.act_stats(obs, g)
            actions = means
        else:
            actions = np.zeros((0, env.action_dim))
        obs, g, reward, done = env.step(actions)
        total_reward += reward
        if hasattr(env, "state"):
            if env.state.vehicles:
                speeds.append(float(np.mean([v.speed for v in env.state.vehicles])))
            if trace_path is not None:
                traces.extend(vehicle_records(env.state))
        if done:
            break
    if trace_path is not None:
        with open(trace_path, "w") as fh:
            for row in traces:
                fh.write(json.dumps(row) + "\n")
    mean_speed = float(np.mean(speeds)) if speeds else 0.0
    return total_reward, mean_speed


def run_eval(checkpoint_path, episodes: int, seed: int, trace_dir=None) -> dict:
    """Deterministic evaluation of a checkpoint: mean actions, fixed seeds."""
    with open(checkpoint_path) as fh:
        doc = json.load(fh)
    model = model_from_checkpoint_dict(doc)
    return _eval_loop(lambda: _env_from_checkpoint(doc)[0], model, episodes, seed,
                      trace_dir, label=doc.get("arch", "model"))


def run_idm_eval(scenario: str, episodes: int, seed: int, trace_dir=None) -> dict:
    """Pure-IDM reference: identical demand, zero autonomous penetration."""
    if scenario not in ("mini-merge-0", "mini-merge-2"):
        raise ValueError(f"no IDM baseline for scenario {scenario!r}")
    preset = mini_merge_0 if scenario == "mini-merge-0" else mini_merge_2
    env_cfg = preset(penetration=0.0)
    return _eval_loop(lambda: MergeEnv(env_cfg), None, episodes, seed, trace_dir,
                      label="idm-baseline")


def _eval_loop(env_factory, model, episodes, seed, trace_dir, label):
    rows = []
    for ep in range(episodes):
        env = env_factory()
        trace_path = None
        if trace_dir is not None:
            Path(trace_dir).mkdir(parents=True, exist_ok=True)
            trace_path = Path(trace_dir) / f"trace_{label}_ep{ep}.jsonl"
        reward, speed = _episode_metrics(env, model, Rng(seed).split(f"eval{ep}"),
                                         trace_path)
        rows.append({"episode": ep, "reward": reward, "mean_system_speed": speed})
    rewards = [r["reward"] for r in rows]
    speeds = [r["mean_system_speed"] for r in rows]
    return {
        "label": label, "episodes": rows, "n_episodes": episodes,
        "mean_reward": float(np.mean(rewards)) if rows else 0.0,
        "std_reward": float(np.std(rewards)) if rows else 0.0,
        "mean_system_speed": float(np.mean(speeds)) if rows else 0.0,
    }


# ---------------------------------------------------------------------------
# canned experiment matrices (architecture / relational-bias / edge-dropout)
# ---------------------------------------------------------------------------

FIG3_PRESETS = ("mlp-comparison", "relpos", "dropout")


def fig3_matrix(preset: str, scenario: str = "mini-merge-2", seeds=(0, 1, 2, 3, 4),
                iterations: int = 30, out_dir: str = "runs/fig3",
                ppo_overrides: dict | None = None) -> list:
    """Experiment configs for the three canned studies: architecture
    comparison, relational-bias ablation (p in {3,1,0}) and edge dropout
    (rate in {0, 0.2, 0.5, 0.8} at p=1)."""
    ppo_overrides = dict(ppo_overrides or {})
    base = dict(scenario=scenario, seeds=list(seeds), iterations=iterations,
                ppo=ppo_overrides)
    if preset == "mlp-comparison":
        members = [("attentional", dict(arch="attentional", max_rel_pos=3)),
                   ("mlp", dict(arch="mlp"))]
    elif preset == "relpos":
        members = [(f"p{p}", dict(arch="attentional", max_rel_pos=p))
                   for p in (3, 1, 0)]
    elif preset == "dropout":
        members = [(f"drop{rate:g}", dict(arch="attentional", max_rel_pos=1,
                                          edge_dropout=rate))
                   for rate in (0.0, 0.2, 0.5, 0.8)]
    else:
        raise ConfigError(f"unknown fig3 preset {preset!r}; choose from {FIG3_PRESETS}")
    configs = []
    for label, over in members:
        doc = dict(base)
        doc.update(over)
        doc["out_dir"] = str(Path(out_dir) / label)
        configs.append((label, parse_config(doc)))
    return configs


def run_fig3(preset: str, **kwargs) -> dict:
    """Train every member config of a canned study and aggregate its curves."""
    results = {}
    for label, cfg in fig3_matrix(preset, **kwargs):
        seed_results = run_train(cfg)
        paths = [r["metrics"] for r in seed_results]
        curve_rows = emit_curves(paths, Path(cfg.out_dir) / "agg") if paths else []
        results[label] = {"config": config_to_dict(cfg), "metrics": paths,
                          "final_median_reward": float(np.median(
                              [final_reward(read_metrics(p)) for p in paths])),
                          "curve_iterations": len(curve_rows)}
    return results


# ---------------------------------------------------------------------------
# improvement-to-threshold experiment (learning-trend studies)
# ---------------------------------------------------------------------------

def improvement_experiment(seed: int, bar: float = 0.15, budget: int = 150,
                           eval_every: int = 5, eval_episodes: int = 6,
                           scenario: str = "mini-merge-0") -> dict:
    """Train the attentional policy and measure mean-system-speed improvement
    over the pure-IDM baseline on fixed demand seeds, stopping at the bar.

    The baseline uses penetration 0 with the same arrival streams, so the
    comparison is paired. Returns the hit iteration (or None), the best
    improvement seen, and the evaluation history.
    """
    cfg = parse_config({"scenario": scenario, "arch": "attentional",
                        "seeds": [seed], "iterations": budget,
                        "out_dir": "unused"})
    preset = mini_merge_0 if scenario == "mini-merge-0" else mini_merge_2
    env_cfg = preset()
    base = np.array([_idm_episode_speed(env_cfg, 7000 + e)
                     for e in range(eval_episodes)])
    model = build_model(cfg, seed)
    ppo_cfg = build_ppo_config(cfg)
    state = init_train_state(model, ppo_cfg)
    rng = Rng(seed).split("train")
    history = []
    best = -np.inf
    hit = None
    for it in range(budget):
        state, _ = train_iteration(lambda: MergeEnv(env_cfg), state, ppo_cfg, rng)
        if (it + 1) % eval_every:
            continue
        ev = np.array([_policy_episode_speed(env_cfg, state.model, 7000 + e)
                       for e in range(eval_episodes)])
        imp = float(ev.mean() / base.mean() - 1.0)
        history.append((it, imp))
        best = max(best, imp)
        if imp >= bar:
            hit = it
            break
    return {"seed": seed, "hit_iteration": hit, "best_improvement": float(best),
            "baseline_speed": float(base.mean()), "history": history}


def _idm_episode_speed(env_cfg, seed: int) -> float:
    from . import merge_env as me

    state = me.reset(dataclasses.replace(env_cfg, penetration=0.0), Rng(seed))
    speeds = []
    for _ in range(env_cfg.horizon):
        me.step(state, None, build_outputs=False)
        if state.vehicles:
            speeds.append(float(np.mean([v.speed for v in state.vehicles])))
    return float(np.mean(speeds)) if speeds else 0.0


def _policy_episode_speed(env_cfg, model, seed: int) -> float:
    env = MergeEnv(env_cfg)
    obs, g = env.reset(Rng(seed))
    speeds = []
    for _ in range(env_cfg.horizon):
        if model.n_act_rows(obs.n_valid) > 0:
            means, _ = model.act_stats(obs, g)
            actions = means
        else:
            actions = np.zeros((0, env.action_dim))
        obs, g, _, done = env.step(actions)
        if env.state.vehicles:
            speeds.append(float(np.mean([v.speed for v in env.state.vehicles])))
        if done:
            break
    return float(np.mean(speeds)) if speeds else 0.0


def _improvement_worker(args):
    seed, kwargs = args
    with _blas_single_thread():
        return improvement_experiment(seed, **kwargs)


def run_improvement_suite(seeds, **kwargs) -> list:
    """improvement_experiment across seeds, process-parallel like run_train."""
    return _run_jobs(_improvement_worker, [(seed, kwargs) for seed in seeds])


def final_reward(metrics_rows, tail: int = 5) -> float:
    """End-of-training reward: mean over the last `tail` iterations, which
    smooths single-iteration PPO noise."""
    vals = [float(r["mean_episode_reward"]) for r in metrics_rows]
    if not vals:
        raise ValueError("empty metrics")
    return float(np.mean(vals[-tail:]))


def iterations_to_threshold(metrics_rows, threshold: float):
    """First iteration whose reward reaches the threshold; None if never."""
    for r in metrics_rows:
        if float(r["mean_episode_reward"]) >= threshold:
            return int(r["iteration"])
    return None


# ---------------------------------------------------------------------------
# curves and comparisons
# ---------------------------------------------------------------------------

def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_curves(metrics_paths, out_dir, value_field: str = "mean_episode_reward"):
    """Aggregate per-seed metrics into mean and 95% CI per iteration; writes
    curve.csv and curve.png under out_dir and returns the rows."""
    per_seed = {}
    for path in sorted(str(p) for p in metrics_paths):
        rows = read_metrics(path)
        if not rows:
            continue
        seed = int(rows[0]["seed"])
        iters = [int(r["iteration"]) for r in rows]
        vals = [float(r[value_field]) for r in rows]
        per_seed[seed] = (iters, vals)
    rows = aggregate_curves(per_seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "curve.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iteration", "mean", "ci_low", "ci_high", "n"))
        for row in rows:
            writer.writerow((row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]))
    _plot_curve(rows, out_dir / "curve.png", value_field)
    return rows


def _plot_curve(rows, png_path, value_field):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    its = [r[0] for r in rows]
    mean = [r[1] for r in rows]
    lo = [r[2] for r in rows]
    hi = [r[3] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(its, mean, label="mean")
    ax.fill_between(its, lo, hi, alpha=0.25, label="95% CI")
    ax.set_xlabel("iteration")
    ax.set_ylabel(value_field)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def final_rewards_by_seed(metrics_paths) -> dict:
    out = {}
    for path in metrics_paths:
        rows = read_metrics(path)
        if not rows:
            continue
        last = rows[-1]
        out[int(last["seed"])] = float(last["mean_episode_reward"])
    return out


def compare_runs(metrics_a, metrics_b) -> dict:
    """Welch t-test on final-iteration rewards across seeds of two runs."""
    a = list(final_rewards_by_seed(metrics_a).values())
    b = list(final_rewards_by_seed(metrics_b).values())
    if len(a) < 2 or len(b) < 2:
        raise ValueError("compare_runs needs at least two seeds per side")
    res = welch_t_test(a, b)
    return {"n_a": len(a), "n_b": len(b), "mean_a": float(np.mean(a)),
            "mean_b": float(np.mean(b)), "statistic": res.statistic,
            "dof": res.dof, "p_value": res.p_value}
