"""Desk-scale state-based continuous-control tasks.

All tasks share the same conventions:

* actions live in [-1, 1]^action_dim (out-of-range inputs are clipped and
  flagged on the env as ``clipped_last_step``)
* one ``step()`` call applies ``action_repeat`` physics control steps of
  ``dt`` seconds each and sums their rewards; per-control-step rewards are
  in [0, 1], so an episode return is in [0, episode_length]
* episodes always run the full ``episode_length`` control steps (1000 by
  default -> 500 agent decisions at action repeat 2); no early termination
* observations use (cos, sin) angle encodings so there is no wrap
  discontinuity

Physics constants are fixed and documented per class. Pendulum integrates
with velocity Verlet (second order, good energy behavior for the undamped
test case); the cart-pole and reacher use semi-implicit Euler.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


class EnvSpec:
    def __init__(self, env_id: str, action_dim: int, observation_dim: int,
                 episode_length: int = 1000, action_repeat: int = 2, dt: float = 0.02):
        self.env_id = env_id
        self.action_dim = action_dim
        self.observation_dim = observation_dim
        self.episode_length = episode_length
        self.action_repeat = action_repeat
        self.dt = dt


class _BaseEnv:
    """Common episode/action-repeat bookkeeping."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self._rng = np.random.default_rng(0)
        self._steps = 0  # control steps elapsed
        self.clipped_last_step = False

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._steps = 0
        self.clipped_last_step = False
        self._reset_state(self._rng)
        return self.observation()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if np.any(np.isnan(action)):
            raise ContractError("NaN action")
        clipped = np.clip(action, -1.0, 1.0)
        self.clipped_last_step = bool(np.any(clipped != action))
        reward = 0.0
        for _ in range(self.spec.action_repeat):
            self._physics_step(clipped)
            reward += self._reward()
            self._steps += 1
            if self._steps >= self.spec.episode_length:
                break
        done = self._steps >= self.spec.episode_length
        return self.observation(), reward, done

    # subclasses implement:
    def _reset_state(self, rng):  # pragma: no cover - abstract
        raise NotImplementedError

    def _physics_step(self, action):  # pragma: no cover - abstract
        raise NotImplementedError

    def _reward(self) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def observation(self) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


class Pendulum(_BaseEnv):
    """Torque-limited rod pendulum, theta measured from upright.

    Constants: m = 1 kg, l = 1 m, g = 9.81 m/s^2, torque limit 2 N*m,
    dt = 0.02 s, angular velocity clamped to +-8 rad/s, damping 0 by
    default. Dynamics (rod, inertia m*l^2/3):

        theta_dd = (3 g / (2 l)) sin(theta) + 3 u / (m l^2) - damping * theta_d

    Reset hangs down: theta = pi + U(-0.08, 0.08), theta_d = U(-0.05, 0.05).
    Dense reward per control step: (1 + cos(theta)) / 2.
    Sparse reward: 1 when |theta| < 0.25 rad AND |theta_d| < 1.5 rad/s
    (strict inequalities), else 0.
    """

    GRAVITY = 9.81
    MASS = 1.0
    LENGTH = 1.0
    MAX_TORQUE = 2.0
    MAX_SPEED = 8.0
    SPARSE_ANGLE = 0.25
    SPARSE_SPEED = 1.5

    def __init__(self, sparse: bool = False, damping: float = 0.0):
        suffix = "_sparse" if sparse else ""
        super().__init__(EnvSpec(f"pendulum_swingup{suffix}", 1, 3))
        self.sparse = sparse
        self.damping = damping
        self.theta = np.pi
        self.theta_dot = 0.0

    def _reset_state(self, rng):
        self.theta = wrap_angle(np.pi + rng.uniform(-0.08, 0.08))
        self.theta_dot = rng.uniform(-0.05, 0.05)

    def _accel(self, torque: float) -> float:
        g, m, l = self.GRAVITY, self.MASS, self.LENGTH
        return (1.5 * g / l * np.sin(self.theta)
                + 3.0 * torque / (m * l * l)
                - self.damping * self.theta_dot)

    def _physics_step(self, action):
        torque = float(action[0]) * self.MAX_TORQUE
        dt = self.spec.dt
        acc = self._accel(torque)
        half = self.theta_dot + 0.5 * dt * acc
        self.theta = wrap_angle(self.theta + dt * half)
        self.theta_dot = half + 0.5 * dt * self._accel(torque)
        self.theta_dot = float(np.clip(self.theta_dot, -self.MAX_SPEED, self.MAX_SPEED))

    def _reward(self) -> float:
        if self.sparse:
            upright = abs(wrap_angle(self.theta)) < self.SPARSE_ANGLE
            slow = abs(self.theta_dot) < self.SPARSE_SPEED
            return 1.0 if (upright and slow) else 0.0
        return 0.5 * (1.0 + np.cos(self.theta))

    def energy(self) -> float:
        """Mechanical energy (diagnostic; exact invariant when undamped
        and undriven). Zero reference: pendulum at rest hanging down."""
        m, l, g = self.MASS, self.LENGTH, self.GRAVITY
        inertia = m * l * l / 3.0
        return 0.5 * inertia * self.theta_dot ** 2 + m * g * (l / 2.0) * (1.0 + np.cos(self.theta))

    def observation(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])


class CartpoleSwingup(_BaseEnv):
    """Cart-pole swing-up, theta measured from upright.

    Constants: cart mass 1 kg, pole mass 0.1 kg, pole half-length 0.5 m,
    g = 9.81, force limit 10 N, dt = 0.02, track limit +-2.4 m (walls stop
    the cart), velocity clamps: |x_d| <= 10, |theta_d| <= 15. Semi-implicit
    Euler integration of the standard frictionless dynamics.

    Dense reward: ((1 + cos theta) / 2) * centered, where
    centered = 1 - (x / 2.4)^2. Sparse: 1 when cos(theta) > 0.95, else 0.
    """

    GRAVITY = 9.81
    CART_MASS = 1.0
    POLE_MASS = 0.1
    HALF_LENGTH = 0.5
    MAX_FORCE = 10.0
    X_LIMIT = 2.4
    MAX_XDOT = 10.0
    MAX_THETADOT = 15.0
    SPARSE_COS = 0.95

    def __init__(self, sparse: bool = False):
        suffix = "_sparse" if sparse else ""
        super().__init__(EnvSpec(f"cartpole_swingup{suffix}", 1, 5))
        self.sparse = sparse
        self.state = np.zeros(4)  # x, x_dot, theta, theta_dot

    def _reset_state(self, rng):
        self.state = np.array([
            rng.uniform(-0.05, 0.05),
            rng.uniform(-0.02, 0.02),
            wrap_angle(np.pi + rng.uniform(-0.08, 0.08)),
            rng.uniform(-0.05, 0.05)])

    def _physics_step(self, action):
        x, x_dot, theta, theta_dot = self.state
        force = float(action[0]) * self.MAX_FORCE
        mc, mp, l, g = self.CART_MASS, self.POLE_MASS, self.HALF_LENGTH, self.GRAVITY
        sin, cos = np.sin(theta), np.cos(theta)
        total = mc + mp
        tmp = (force + mp * l * theta_dot ** 2 * sin) / total
        theta_acc = (g * sin - cos * tmp) / (l * (4.0 / 3.0 - mp * cos ** 2 / total))
        x_acc = tmp - mp * l * theta_acc * cos / total
        dt = self.spec.dt
        x_dot = np.clip(x_dot + dt * x_acc, -self.MAX_XDOT, self.MAX_XDOT)
        theta_dot = np.clip(theta_dot + dt * theta_acc,
                            -self.MAX_THETADOT, self.MAX_THETADOT)
        x = x + dt * x_dot
        if abs(x) > self.X_LIMIT:  # wall: stop the cart
            x = np.clip(x, -self.X_LIMIT, self.X_LIMIT)
            x_dot = 0.0
        theta = wrap_angle(theta + dt * theta_dot)
        self.state = np.array([x, x_dot, theta, theta_dot])

    def _reward(self) -> float:
        x, _, theta, _ = self.state
        if self.sparse:
            return 1.0 if np.cos(theta) > self.SPARSE_COS else 0.0
        upright = 0.5 * (1.0 + np.cos(theta))
        centered = 1.0 - (x / self.X_LIMIT) ** 2
        return float(upright * max(0.0, centered))

    def observation(self) -> np.ndarray:
        x, x_dot, theta, theta_dot = self.state
        return np.array([x, x_dot, np.cos(theta), np.sin(theta), theta_dot])


class ReacherEasy(_BaseEnv):
    """Two-joint planar reacher with a per-episode random target.

    Constants: link lengths 0.12 m and 0.10 m, joint velocity limit
    20 rad/s, torque limits 0.05 N*m, viscous damping 2.0, dt = 0.02.
    Target sampled uniformly in the annulus reachable by the arm; target
    radius 0.05 m ("easy").

    Reward per control step: 1 inside the target radius, otherwise a
    linear falloff max(0, 1 - (dist - radius) / 0.3) * 0.5 (so the shaped
    part never reaches the in-target value).
    """

    L1, L2 = 0.12, 0.10
    MAX_SPEED = 20.0
    MAX_TORQUE = 0.05
    DAMPING = 2.0
    TARGET_RADIUS = 0.05
    FALLOFF = 0.3
    INERTIA = 0.005

    def __init__(self):
        super().__init__(EnvSpec("reacher_easy", 2, 10))
        self.q = np.zeros(2)
        self.q_dot = np.zeros(2)
        self.target = np.zeros(2)

    def _reset_state(self, rng):
        self.q = rng.uniform(-np.pi, np.pi, size=2)
        self.q_dot = np.zeros(2)
        radius = rng.uniform(0.05, self.L1 + self.L2)
        angle = rng.uniform(-np.pi, np.pi)
        self.target = radius * np.array([np.cos(angle), np.sin(angle)])

    def fingertip(self) -> np.ndarray:
        x = self.L1 * np.cos(self.q[0]) + self.L2 * np.cos(self.q[0] + self.q[1])
        y = self.L1 * np.sin(self.q[0]) + self.L2 * np.sin(self.q[0] + self.q[1])
        return np.array([x, y])

    def _physics_step(self, action):
        torque = np.asarray(action) * self.MAX_TORQUE
        acc = (torque - self.DAMPING * self.INERTIA * self.q_dot) / self.INERTIA
        dt = self.spec.dt
        self.q_dot = np.clip(self.q_dot + dt * acc, -self.MAX_SPEED, self.MAX_SPEED)
        self.q = wrap_angle(self.q + dt * self.q_dot)

    def _reward(self) -> float:
        dist = float(np.linalg.norm(self.fingertip() - self.target))
        if dist < self.TARGET_RADIUS:
            return 1.0
        return 0.5 * max(0.0, 1.0 - (dist - self.TARGET_RADIUS) / self.FALLOFF)

    def observation(self) -> np.ndarray:
        tip = self.fingertip()
        return np.concatenate([
            np.cos(self.q), np.sin(self.q), self.q_dot / self.MAX_SPEED,
            self.target, tip - self.target])


_REGISTRY = {
    "pendulum_swingup": lambda: Pendulum(sparse=False),
    "pendulum_swingup_sparse": lambda: Pendulum(sparse=True),
    "cartpole_swingup": lambda: CartpoleSwingup(sparse=False),
    "cartpole_swingup_sparse": lambda: CartpoleSwingup(sparse=True),
    "reacher_easy": ReacherEasy,
}


def env_ids() -> list[str]:
    return sorted(_REGISTRY)


def make_env(env_id: str) -> _BaseEnv:
    try:
        factory = _REGISTRY[env_id]
    except KeyError:
        raise ConfigError(f"unknown env id {env_id!r}; known: {env_ids()}") from None
    return factory()
