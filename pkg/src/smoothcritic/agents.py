"""SAC and DDPG actor-critic agents on top of the autodiff heads.

Separation of concerns during updates: each loss backward is preceded by a
zero_grad over every parameter, and each Adam instance only ever steps its
own parameter list, so actor updates cannot touch critic parameters and
vice versa.

Target critics store EFFECTIVE weights (spectral normalization already
folded in) and never run their own power iterations; the EMA averages the
function the online critic actually computes.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, zero_grads
from .errors import ContractError
from .layers import Head, NetworkSpec, build_actor_head, build_critic_head
from .replay import Batch, ReplayBuffer

LOG_SIGMA_BOUNDS = (-10.0, 2.0)
LOG_2PI = float(np.log(2.0 * np.pi))
TANH_CORRECTION_EPS = 1e-6


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.asarray(float(self.t))}
        for i in range(len(self.params)):
            out[f"{prefix}.m{i}"] = self.m[i].copy()
            out[f"{prefix}.v{i}"] = self.v[i].copy()
        return out

    def load_state_arrays(self, prefix: str, arrays: dict) -> None:
        self.t = int(arrays[f"{prefix}.t"])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(arrays[f"{prefix}.m{i}"], dtype=np.float64)
            self.v[i] = np.asarray(arrays[f"{prefix}.v{i}"], dtype=np.float64)


class Policy:
    """Tanh-squashed Gaussian (SAC) or deterministic-with-noise (DDPG)
    policy over an actor head emitting (mu, log_sigma)."""

    def __init__(self, actor: Head, action_dim: int, mode: str,
                 log_sigma_bounds: tuple = LOG_SIGMA_BOUNDS):
        if mode not in ("sac_stochastic", "ddpg_deterministic"):
            raise ContractError(f"unknown policy mode {mode!r}")
        self.actor = actor
        self.action_dim = action_dim
        self.mode = mode
        self.log_sigma_bounds = log_sigma_bounds

    def mu_log_sigma(self, feature: Tensor) -> tuple[Tensor, Tensor]:
        out = self.actor.forward(feature)
        n = self.action_dim
        lo, hi = self.log_sigma_bounds
        return out.cols(0, n), out.cols(n, 2 * n).clip(lo, hi)

    def sample_sac(self, feature: Tensor, rng: np.random.Generator
                   ) -> tuple[Tensor, Tensor]:
        """Reparameterized sample and its log-density (both differentiable).

        log pi(a|s) = Gaussian log-density at the pre-tanh value minus the
        tanh change-of-variables term sum(log(1 - a^2 + 1e-6)).
        """
        mu, log_sigma = self.mu_log_sigma(feature)
        sigma = log_sigma.exp()
        eps = Tensor(rng.standard_normal(mu.shape))
        pre = mu + eps * sigma
        action = pre.tanh()
        z = (pre - mu) / sigma
        gauss = (z.square() * -0.5 - log_sigma - 0.5 * LOG_2PI).sum(axis=1, keepdims=True)
        correction = ((1.0 - action.square()) + TANH_CORRECTION_EPS).log().sum(
            axis=1, keepdims=True)
        return action, gauss - correction

    def mean_action(self, feature: np.ndarray) -> np.ndarray:
        mu, _ = self.mu_log_sigma(Tensor(feature))
        return np.tanh(mu.data)

    def act(self, obs: np.ndarray, rng: np.random.Generator,
            noise_std: float = 0.0, stochastic: bool = True) -> np.ndarray:
        """Single-observation action for environment interaction (numpy)."""
        feature = obs.reshape(1, -1)
        if self.mode == "sac_stochastic":
            if not stochastic:
                return self.mean_action(feature)[0]
            action, _ = self.sample_sac(Tensor(feature), rng)
            return action.data[0]
        base = self.mean_action(feature)[0]
        if noise_std > 0.0 and stochastic:
            base = base + noise_std * rng.standard_normal(base.shape)
        return np.clip(base, -1.0, 1.0)


class Temperature:
    """Trainable entropy temperature alpha = exp(log_alpha)."""

    def __init__(self, initial: float, target_entropy: float):
        self.log_alpha = Tensor(np.log(initial), requires_grad=True)
        self.target_entropy = float(target_entropy)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def loss(self, log_probs: np.ndarray) -> Tensor:
        """-alpha * mean(log_prob + target_entropy), log_probs detached."""
        drive = float(np.mean(log_probs) + self.target_entropy)
        return self.log_alpha.exp() * -drive


class CriticEnsemble:
    def __init__(self, critics: list[Head], ema_tau: float):
        self.critics = critics
        self.ema_tau = ema_tau
        self.targets = [c.snapshot_effective() for c in critics]

    @property
    def k(self) -> int:
        return len(self.critics)

    def q_values(self, feature: Tensor, action: Tensor) -> list[Tensor]:
        x = concat(feature, action, axis=1)
        return [c.forward(x) for c in self.critics]

    def q_min(self, feature: Tensor, action: Tensor) -> Tensor:
        qs = self.q_values(feature, action)
        out = qs[0]
        for q in qs[1:]:
            out = out.minimum(q)
        return out

    def target_q_min(self, feature: np.ndarray, action: np.ndarray) -> np.ndarray:
        x = np.concatenate([feature, action], axis=1)
        qs = [t.forward(x) for t in self.targets]
        return np.min(np.stack(qs), axis=0)

    def update_targets(self, tau: float | None = None) -> None:
        tau = self.ema_tau if tau is None else tau
        for target, online in zip(self.targets, self.critics):
            target.ema_update(online.snapshot_effective(), tau)

    def parameters(self) -> list[Tensor]:
        return [p for c in self.critics for p in c.parameters()]


def grad_l2_norm(params: list[Tensor]) -> float:
    total = 0.0
    seen = False
    for p in params:
        if p.grad is not None:
            seen = True
            total += float(np.sum(p.grad * p.grad))
    if not seen:
        raise ContractError("no gradients populated")
    return float(np.sqrt(total))


class Agent:
    """One SAC or DDPG learner (actor, critic ensemble, temperature,
    optimizers, exploration schedule)."""

    def __init__(self, algorithm: str, actor_spec: NetworkSpec,
                 critic_spec: NetworkSpec, feature_dim: int, action_dim: int,
                 rng: np.random.Generator, noise_rng: np.random.Generator,
                 gamma: float = 0.99, tau: float = 0.01,
                 lr: float = 1e-3, adam_betas: tuple = (0.9, 0.999),
                 adam_eps: float = 1e-8, num_critics: int = 2,
                 nstep: int | None = None, initial_temperature: float = 0.1,
                 target_entropy: float | None = None,
                 actor_update_freq: int = 2, target_update_freq: int = 2,
                 ddpg_noise_start: float = 0.2, ddpg_noise_end: float = 0.05):
        if algorithm not in ("sac", "ddpg"):
            raise ContractError(f"unknown algorithm {algorithm!r}")
        self.algorithm = algorithm
        self.feature_dim = feature_dim
        self.action_dim = action_dim
        self.gamma = gamma
        self.tau = tau
        self.nstep = nstep if nstep is not None else (1 if algorithm == "sac" else 3)
        self.actor_update_freq = actor_update_freq
        self.target_update_freq = target_update_freq
        self.ddpg_noise_start = ddpg_noise_start
        self.ddpg_noise_end = ddpg_noise_end
        self.noise_rng = noise_rng

        mode = "sac_stochastic" if algorithm == "sac" else "ddpg_deterministic"
        actor = build_actor_head(actor_spec, feature_dim, action_dim, rng)
        self.policy = Policy(actor, action_dim, mode)
        critics = [build_critic_head(critic_spec, feature_dim, action_dim, rng)
                   for _ in range(num_critics)]
        self.critics = CriticEnsemble(critics, tau)
        self.temperature = Temperature(
            initial_temperature,
            -float(action_dim) if target_entropy is None else target_entropy)

        b1, b2 = adam_betas
        self.actor_opt = Adam(actor.parameters(), lr, b1, b2, adam_eps)
        self.critic_opt = Adam(self.critics.parameters(), lr, b1, b2, adam_eps)
        self.alpha_opt = Adam([self.temperature.log_alpha], lr, b1, b2, adam_eps)
        self._all_params = (actor.parameters() + self.critics.parameters()
                            + [self.temperature.log_alpha])
        self._last_actor_metrics = {"actor_loss": 0.0, "actor_grad_norm": 0.0,
                                    "alpha_loss": 0.0}

    # -- exploration ------------------------------------------------------

    def ddpg_noise_std(self, progress: float) -> float:
        """Linear decay from start to end over the first half of training."""
        frac = min(max(progress, 0.0), 0.5) / 0.5
        return self.ddpg_noise_start + frac * (self.ddpg_noise_end - self.ddpg_noise_start)

    def act(self, obs: np.ndarray, progress: float = 0.0,
            stochastic: bool = True) -> np.ndarray:
        noise = self.ddpg_noise_std(progress) if self.algorithm == "ddpg" else 0.0
        return self.policy.act(obs, self.noise_rng, noise_std=noise,
                               stochastic=stochastic)

    # -- losses -----------------------------------------------------------

    def critic_targets(self, batch: Batch) -> np.ndarray:
        """Stop-gradient regression targets (plain numpy)."""
        next_feat = batch.next_obs
        if self.algorithm == "sac":
            a_next, logp_next = self.policy.sample_sac(Tensor(next_feat), self.noise_rng)
            q_next = self.critics.target_q_min(next_feat, a_next.data)
            q_next = q_next - self.temperature.alpha * logp_next.data
        else:
            a_next = self.policy.mean_action(next_feat)
            q_next = self.critics.target_q_min(next_feat, a_next)
        return batch.reward.reshape(-1, 1) + batch.discount.reshape(-1, 1) * q_next

    def critic_loss(self, batch: Batch, targets: np.ndarray | None = None) -> Tensor:
        if len(batch) == 0:
            raise ContractError("empty batch")
        y = self.critic_targets(batch) if targets is None else targets
        qs = self.critics.q_values(Tensor(batch.obs), Tensor(batch.action))
        terms = [(q - y).square().mean() for q in qs]
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        return loss * (1.0 / len(terms))

    def actor_loss(self, obs: np.ndarray) -> tuple[Tensor, Tensor | None]:
        """Returns (loss, detached log-probs or None for ddpg)."""
        feature = Tensor(obs)
        if self.algorithm == "sac":
            action, logp = self.policy.sample_sac(feature, self.noise_rng)
            q = self.critics.q_min(feature, action)
            loss = (logp * self.temperature.alpha - q).mean()
            return loss, Tensor(logp.data.copy())
        mu, _ = self.policy.mu_log_sigma(feature)
        action = mu.tanh()
        q = self.critics.q_min(feature, action)
        return (-q).mean(), None

    # -- one training step --------------------------------------------------

    def train_step(self, replay: ReplayBuffer, step_index: int,
                   batch_size: int, seed_steps: int) -> dict:
        if len(replay) < max(seed_steps, batch_size):
            return {"updated": False}

        for c in self.critics.critics:
            c.power_step()
        self.policy.actor.power_step()

        metrics: dict = {"updated": True}
        batch = replay.sample_nstep(batch_size, self.nstep, self.gamma)

        zero_grads(self._all_params)
        c_loss = self.critic_loss(batch)
        c_loss.backward()
        metrics["critic_loss"] = c_loss.item()
        metrics["critic_grad_norm"] = grad_l2_norm(self.critic_opt.params)
        self.critic_opt.step()

        if step_index % self.actor_update_freq == 0:
            zero_grads(self._all_params)
            a_loss, logp = self.actor_loss(batch.obs)
            a_loss.backward()
            am = {"actor_loss": a_loss.item(),
                  "actor_grad_norm": grad_l2_norm(self.actor_opt.params)}
            self.actor_opt.step()
            if self.algorithm == "sac":
                zero_grads(self._all_params)
                t_loss = self.temperature.loss(logp.data)
                t_loss.backward()
                self.alpha_opt.step()
                am["alpha_loss"] = t_loss.item()
            else:
                am["alpha_loss"] = 0.0
            self._last_actor_metrics = am
        metrics.update(self._last_actor_metrics)

        if step_index % self.target_update_freq == 0:
            self.critics.update_targets()

        metrics["alpha"] = self.temperature.alpha
        metrics["sigma_hats"] = self.sigma_hats()
        return metrics

    def sigma_hats(self) -> list[float]:
        out = []
        for head in [self.policy.actor] + self.critics.critics:
            for layer in head.linear_layers():
                if layer.sn is not None:
                    out.append(layer.sn.sigma_hat)
        return out

    # -- checkpoint ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, arr in self.policy.actor.state_arrays().items():
            arrays[f"actor.{name}"] = arr
        for i, c in enumerate(self.critics.critics):
            for name, arr in c.state_arrays().items():
                arrays[f"critic{i}.{name}"] = arr
        for i, t in enumerate(self.critics.targets):
            for j, arr in enumerate(t.arrays()):
                arrays[f"target{i}.arr{j}"] = arr.copy()
        arrays["log_alpha"] = self.temperature.log_alpha.data.copy()
        arrays.update(self.actor_opt.state_arrays("actor_opt"))
        arrays.update(self.critic_opt.state_arrays("critic_opt"))
        arrays.update(self.alpha_opt.state_arrays("alpha_opt"))
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        self.policy.actor.load_state_arrays(
            {k[len("actor."):]: v for k, v in arrays.items() if k.startswith("actor.")
             and not k.startswith("actor_opt")})
        for i, c in enumerate(self.critics.critics):
            prefix = f"critic{i}."
            c.load_state_arrays(
                {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        for i, t in enumerate(self.critics.targets):
            fresh = self.critics.critics[i].snapshot_effective()
            self.critics.targets[i] = fresh
            for j, arr in enumerate(fresh.arrays()):
                arr[...] = arrays[f"target{i}.arr{j}"]
        self.temperature.log_alpha.data = np.asarray(arrays["log_alpha"], dtype=np.float64)
        self.actor_opt.load_state_arrays("actor_opt", arrays)
        self.critic_opt.load_state_arrays("critic_opt", arrays)
        self.alpha_opt.load_state_arrays("alpha_opt", arrays)
