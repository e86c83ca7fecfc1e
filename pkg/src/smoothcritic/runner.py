"""Experiment orchestration: config, seeding, train/eval loop, matrix runs.

Seeding scheme: one master seed feeds numpy's SeedSequence; children are
spawned in a fixed documented order (env resets, agent init, agent noise,
replay sampling, eval resets, seed-phase actions). Reruns with the same
config are bitwise identical, including the metrics CSV.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .agents import Agent
from .diagnostics import MetricsWriter, crash_hold
from .envs import env_ids, make_env
from .errors import ConfigError
from .layers import NetworkSpec, load_arrays, save_arrays
from .replay import ReplayBuffer, Transition
from .specnorm import singular_value_report

RUN_ROOT_ENV_VAR = "SMOOTHCRITIC_RUN_ROOT"


@dataclass
class AgentConfig:
    algorithm: str = "sac"
    env_id: str = "pendulum_swingup"
    actor: NetworkSpec = field(default_factory=lambda: NetworkSpec(depth=2))
    critic: NetworkSpec = field(default_factory=lambda: NetworkSpec(depth=4))
    gamma: float = 0.99
    tau: float = 0.01
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 512
    seed_steps: int = 1000           # env control steps of random collection
    actor_update_freq: int = 2
    target_update_freq: int = 2
    num_critics: int = 2
    nstep: int = 0                   # 0 -> algorithm default (1 SAC, 3 DDPG)
    initial_temperature: float = 0.1
    ddpg_noise_start: float = 0.2
    ddpg_noise_end: float = 0.05
    replay_capacity: int = 100_000
    total_steps: int = 30_000        # env control steps
    eval_interval: int = 2_000       # env control steps between evaluations
    eval_episodes: int = 5
    log_interval: int = 10           # agent decisions between metric rows
    sv_interval: int = 1000          # decisions between exact-SVD reports
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.algorithm not in ("sac", "ddpg"):
            problems.append(f"algorithm must be sac|ddpg, got {self.algorithm!r}")
        if self.env_id not in env_ids():
            problems.append(f"unknown env_id {self.env_id!r}")
        for name, spec in (("actor", self.actor), ("critic", self.critic)):
            try:
                spec.validate()
            except ConfigError as e:
                problems.append(f"{name} spec: {e}")
        if not 0.0 < self.gamma < 1.0:
            problems.append("gamma must be in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            problems.append("tau must be in (0, 1]")
        if self.lr < 0.0:
            problems.append("lr must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.num_critics not in (1, 2):
            problems.append("num_critics must be 1 or 2")
        if self.nstep < 0:
            problems.append("nstep must be >= 0 (0 = algorithm default)")
        for name in ("seed_steps", "total_steps", "eval_interval", "eval_episodes",
                     "actor_update_freq", "target_update_freq", "replay_capacity",
                     "log_interval", "sv_interval"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor"] = self.actor.to_dict()
        d["critic"] = self.critic.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        if "actor" in d:
            d["actor"] = NetworkSpec.from_dict(d["actor"])
        if "critic" in d:
            d["critic"] = NetworkSpec.from_dict(d["critic"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "AgentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def apply_override(self, dotted: str, raw: str) -> None:
        """Set a field by dotted path, e.g. 'critic.depth=4'."""
        parts = dotted.split(".")
        target = self
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"no config field {dotted!r}")
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise ConfigError(f"no config field {dotted!r}")
        current = getattr(target, leaf)
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(target, leaf, value)


def build_agent(config: AgentConfig, init_rng: np.random.Generator,
                noise_rng: np.random.Generator, feature_dim: int,
                action_dim: int) -> Agent:
    return Agent(
        algorithm=config.algorithm, actor_spec=config.actor,
        critic_spec=config.critic, feature_dim=feature_dim,
        action_dim=action_dim, rng=init_rng, noise_rng=noise_rng,
        gamma=config.gamma, tau=config.tau, lr=config.lr,
        adam_betas=(config.adam_beta1, config.adam_beta2),
        adam_eps=config.adam_eps, num_critics=config.num_critics,
        nstep=config.nstep if config.nstep > 0 else None,
        initial_temperature=config.initial_temperature,
        actor_update_freq=config.actor_update_freq,
        target_update_freq=config.target_update_freq,
        ddpg_noise_start=config.ddpg_noise_start,
        ddpg_noise_end=config.ddpg_noise_end)


def _spawn_rngs(master_seed: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [np.random.default_rng(s) for s in children]


def evaluate_policy(agent: Agent, env_id: str, episodes: int,
                    seed_rng: np.random.Generator) -> float:
    """Mean undiscounted return over `episodes` with deterministic actions."""
    env = make_env(env_id)
    returns = []
    for _ in range(episodes):
        obs = env.reset(int(seed_rng.integers(2**31)))
        total, done = 0.0, False
        while not done:
            action = agent.act(obs, stochastic=False)
            obs, r, done = env.step(action)
            total += r
        returns.append(total)
    return float(np.mean(returns))


def random_policy_baseline(env_id: str, episodes: int, seed: int
                           ) -> tuple[float, float]:
    """Monte-Carlo mean and std of episode returns under uniform actions."""
    env = make_env(env_id)
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(episodes):
        obs = env.reset(int(rng.integers(2**31)))
        total, done = 0.0, False
        while not done:
            _, r, done = env.step(rng.uniform(-1.0, 1.0, env.spec.action_dim))
            total += r
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


@dataclass
class RunResult:
    run_dir: str
    final_return: float
    eval_steps: list[int]
    eval_returns: list[float]     # crash-held
    crash_step: int | None
    max_actor_grad_norm: float
    max_critic_grad_norm: float


def run_experiment(config: AgentConfig, run_dir: str,
                   progress_cb=None) -> RunResult:
    """Full training run; writes config, metrics, eval series, singular-value
    reports, and a final checkpoint into `run_dir`."""
    config.validate()
    os.makedirs(run_dir, exist_ok=True)
    config.save_json(os.path.join(run_dir, "config.json"))

    (env_seed_rng, init_rng, noise_rng, replay_rng,
     eval_seed_rng, seed_action_rng) = _spawn_rngs(config.seed, 6)

    env = make_env(config.env_id)
    action_repeat = env.spec.action_repeat
    feature_dim = env.spec.observation_dim
    action_dim = env.spec.action_dim
    agent = build_agent(config, init_rng, noise_rng, feature_dim, action_dim)
    replay = ReplayBuffer(config.replay_capacity, replay_rng)

    total_decisions = config.total_steps // action_repeat
    seed_transitions = -(-config.seed_steps // action_repeat)  # ceil division
    eval_every = max(1, config.eval_interval // action_repeat)

    eval_steps: list[int] = []
    eval_returns: list[float] = []
    crash_step: int | None = None
    max_actor_g = 0.0
    max_critic_g = 0.0
    episode_id, step_in_ep, episode_return = 0, 0, 0.0
    last_episode_return = 0.0
    obs = env.reset(int(env_seed_rng.integers(2**31)))

    t_start = time.monotonic()
    metrics_path = os.path.join(run_dir, "metrics.csv")
    sv_path = os.path.join(run_dir, "singular_values.csv")
    sv_file = open(sv_path, "w")
    sv_file.write("step,head,layer,sn_active,sigma_hat,sigma_exact_raw,"
                  "sigma_exact_effective\n")

    def write_sv_rows(decision: int) -> None:
        heads = [("actor", agent.policy.actor)] + [
            (f"critic{i}", c) for i, c in enumerate(agent.critics.critics)]
        for name, head in heads:
            for row in singular_value_report(head):
                sv_file.write(
                    f"{decision * action_repeat},{name},{row['layer']},"
                    f"{int(row['sn_active'])},{row['sigma_hat']!r},"
                    f"{row['sigma_exact_raw']!r},{row['sigma_exact_effective']!r}\n")

    with MetricsWriter(metrics_path) as writer:
        for decision in range(total_decisions):
            env_step = decision * action_repeat
            progress = decision / max(1, total_decisions)
            if env_step < config.seed_steps:
                action = seed_action_rng.uniform(-1.0, 1.0, action_dim)
            else:
                action = agent.act(obs, progress=progress, stochastic=True)
            if not np.all(np.isfinite(action)):
                crash_step = env_step
                break
            next_obs, reward, done = env.step(action)
            replay.push(Transition(obs, action, reward, next_obs, done,
                                   episode_id, step_in_ep))
            episode_return += reward
            obs = next_obs
            step_in_ep += 1
            if done:
                last_episode_return = episode_return
                episode_id += 1
                step_in_ep = 0
                episode_return = 0.0
                obs = env.reset(int(env_seed_rng.integers(2**31)))

            metrics = agent.train_step(replay, decision, config.batch_size,
                                       seed_transitions)
            if metrics["updated"]:
                losses = [metrics["critic_loss"], metrics["actor_loss"]]
                if not np.all(np.isfinite(losses)):
                    crash_step = env_step
                    break
                max_actor_g = max(max_actor_g, metrics["actor_grad_norm"])
                max_critic_g = max(max_critic_g, metrics["critic_grad_norm"])

            if decision % config.log_interval == 0:
                row = {"step": env_step, "episode_return": last_episode_return,
                       "crash": 0}
                if metrics["updated"]:
                    row.update({k: metrics[k] for k in
                                ("critic_loss", "actor_loss", "alpha_loss",
                                 "alpha", "critic_grad_norm", "actor_grad_norm")})
                    hats = metrics["sigma_hats"]
                    row["sigma_hat_max"] = max(hats) if hats else 0.0
                writer.write(row)
            if decision % config.sv_interval == 0:
                write_sv_rows(decision)

            if (decision + 1) % eval_every == 0:
                # child generator keyed by eval index keeps evals comparable
                mean_ret = evaluate_policy(
                    agent, config.env_id, config.eval_episodes,
                    np.random.default_rng(
                        np.random.SeedSequence((config.seed, len(eval_steps)))))
                eval_steps.append((decision + 1) * action_repeat)
                eval_returns.append(mean_ret)
                if progress_cb is not None:
                    progress_cb(env_step, mean_ret)
                if not np.isfinite(mean_ret):
                    crash_step = env_step
                    break
        if crash_step is not None:
            writer.write({"step": crash_step + 1, "crash": 1})
    sv_file.close()

    # pad the evaluation grid to the full schedule, then apply crash-hold
    full_steps = [s * action_repeat for s in
                  range(eval_every, total_decisions + 1, eval_every)]
    padded = list(eval_returns) + [float("nan")] * (len(full_steps) - len(eval_returns))
    effective_crash = crash_step
    if effective_crash is None and len(eval_returns) < len(full_steps):
        effective_crash = eval_steps[-1] if eval_steps else -1
    held = crash_hold(full_steps, [0.0 if np.isnan(r) else r for r in padded],
                      effective_crash)

    with open(os.path.join(run_dir, "eval.csv"), "w") as f:
        f.write("step,mean_return\n")
        for s, r in zip(full_steps, held):
            f.write(f"{s},{r!r}\n")
    with open(os.path.join(run_dir, "timing.txt"), "w") as f:
        f.write(f"wall_clock_seconds={time.monotonic() - t_start:.3f}\n")

    save_agent_checkpoint(os.path.join(run_dir, "checkpoint.npz"), agent, config)
    final_return = held[-1] if held else 0.0
    return RunResult(run_dir, final_return, full_steps, held, crash_step,
                     max_actor_g, max_critic_g)


# -- agent checkpoints ---------------------------------------------------------

def save_agent_checkpoint(path, agent: Agent, config: AgentConfig) -> None:
    meta = {"kind": "agent", "config": config.to_dict(),
            "feature_dim": agent.feature_dim, "action_dim": agent.action_dim}
    save_arrays(path, meta, agent.state_arrays())


def load_agent_checkpoint(path) -> tuple[Agent, AgentConfig]:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "agent":
        raise ConfigError("checkpoint does not contain an agent")
    config = AgentConfig.from_dict(meta["config"])
    rngs = _spawn_rngs(config.seed, 6)
    init_rng, noise_rng = rngs[1], rngs[2]
    agent = build_agent(config, init_rng, noise_rng,
                        meta["feature_dim"], meta["action_dim"])
    agent.load_state_arrays(arrays)
    return agent, config


# -- experiment matrix ---------------------------------------------------------

def run_matrix(template: AgentConfig, run_root: str,
               archs: list[str] | None = None,
               depths: list[int] | None = None,
               sn: list[bool] | None = None,
               seeds: list[int] | None = None,
               progress_cb=None) -> list[dict]:
    """Cross product of (arch, depth, sn, seed) cells around a template
    config. Returns one summary row per (arch, depth, sn) cell with the
    mean and standard error of the final return; writes summary.csv."""
    archs = archs or [template.critic.kind]
    depths = depths or [template.critic.depth]
    sn = sn if sn is not None else [template.critic.sn_policy == "intermediate"]
    seeds = seeds or [template.seed]
    os.makedirs(run_root, exist_ok=True)

    summary = []
    for arch in archs:
        for depth in depths:
            for use_sn in sn:
                finals, crashes = [], 0
                for seed in seeds:
                    cfg = AgentConfig.from_dict(template.to_dict())
                    cfg.actor.kind = cfg.critic.kind = arch
                    cfg.critic.depth = depth
                    policy = "intermediate" if use_sn else "none"
                    cfg.actor.sn_policy = cfg.critic.sn_policy = policy
                    cfg.seed = seed
                    cell = f"{arch}_d{depth}_sn{int(use_sn)}_s{seed}"
                    try:
                        result = run_experiment(
                            cfg, os.path.join(run_root, cell))
                        finals.append(result.final_return)
                        if result.crash_step is not None:
                            crashes += 1
                    except Exception:  # a crashed cell must not kill the matrix
                        crashes += 1
                        finals.append(0.0)
                    if progress_cb is not None:
                        progress_cb(cell, finals[-1])
                mean = float(np.mean(finals))
                stderr = (float(np.std(finals, ddof=1) / np.sqrt(len(finals)))
                          if len(finals) > 1 else 0.0)
                summary.append({"arch": arch, "depth": depth, "sn": int(use_sn),
                                "seeds": len(seeds), "mean_final_return": mean,
                                "stderr": stderr, "crashes": crashes})
    with open(os.path.join(run_root, "summary.csv"), "w") as f:
        f.write("arch,depth,sn,seeds,mean_final_return,stderr,crashes\n")
        for row in summary:
            f.write(f"{row['arch']},{row['depth']},{row['sn']},{row['seeds']},"
                    f"{row['mean_final_return']!r},{row['stderr']!r},"
                    f"{row['crashes']}\n")
    return summary


def default_run_root() -> str:
    return os.environ.get(RUN_ROOT_ENV_VAR, "runs")
