"""Uniform experience replay with n-step return assembly.

Windows never cross episode boundaries: accumulation stops at a done flag,
at an episode-id change, or where the ring buffer has overwritten the
continuation.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Transition:
    __slots__ = ("obs", "action", "reward", "next_obs", "done", "episode", "step")

    def __init__(self, obs, action, reward, next_obs, done, episode, step):
        self.obs = np.asarray(obs, dtype=np.float64)
        self.action = np.asarray(action, dtype=np.float64)
        self.reward = float(reward)
        self.next_obs = np.asarray(next_obs, dtype=np.float64)
        self.done = bool(done)
        self.episode = int(episode)
        self.step = int(step)


class Batch:
    """n-step sample: rewards are pre-accumulated, `discount` = gamma^m
    masked by the done flag at the end of each window."""

    __slots__ = ("obs", "action", "reward", "next_obs", "discount")

    def __init__(self, obs, action, reward, next_obs, discount):
        self.obs = obs
        self.action = action
        self.reward = reward
        self.next_obs = next_obs
        self.discount = discount

    def __len__(self):
        return self.obs.shape[0]


class ReplayBuffer:
    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self._items: list[Transition | None] = [None] * capacity
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, tr: Transition) -> None:
        fields = np.concatenate([tr.obs.ravel(), tr.action.ravel(),
                                 [tr.reward], tr.next_obs.ravel()])
        if not np.all(np.isfinite(fields)):
            raise ContractError("non-finite transition rejected")
        self._items[self._cursor] = tr
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _get(self, idx: int) -> Transition:
        return self._items[idx]

    def _chain_ok(self, a: Transition, b: Transition) -> bool:
        return (not a.done) and b.episode == a.episode and b.step == a.step + 1

    def sample_nstep(self, batch_size: int, n: int, gamma: float) -> Batch:
        if self._size < batch_size:
            raise ContractError(f"buffer has {self._size} < batch {batch_size}")
        if n < 1:
            raise ContractError("n must be >= 1")
        idx = self.rng.integers(0, self._size, size=batch_size)
        obs, act, rew, nxt, disc = [], [], [], [], []
        for start in idx:
            tr = self._items[start]
            total = tr.reward
            last = tr
            g = gamma
            for _k in range(1, n):
                j = (start + _k) % self.capacity
                nxt_tr = self._items[j]
                if nxt_tr is None or not self._chain_ok(last, nxt_tr):
                    break
                total += g * nxt_tr.reward
                g *= gamma
                last = nxt_tr
            obs.append(tr.obs)
            act.append(tr.action)
            rew.append(total)
            nxt.append(last.next_obs)
            disc.append(0.0 if last.done else g)
        return Batch(np.stack(obs), np.stack(act), np.asarray(rew),
                     np.stack(nxt), np.asarray(disc))

    # -- snapshot ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        live = [self._items[i] for i in range(self._size)]
        return {
            "obs": np.stack([t.obs for t in live]) if live else np.zeros((0,)),
            "action": np.stack([t.action for t in live]) if live else np.zeros((0,)),
            "reward": np.asarray([t.reward for t in live]),
            "next_obs": np.stack([t.next_obs for t in live]) if live else np.zeros((0,)),
            "done": np.asarray([float(t.done) for t in live]),
            "episode": np.asarray([float(t.episode) for t in live]),
            "step": np.asarray([float(t.step) for t in live]),
            "cursor": np.asarray(float(self._cursor)),
        }

    def load_state_arrays(self, arrays: dict) -> None:
        count = int(arrays["reward"].shape[0])
        self._items = [None] * self.capacity
        for i in range(count):
            self._items[i] = Transition(
                arrays["obs"][i], arrays["action"][i], arrays["reward"][i],
                arrays["next_obs"][i], arrays["done"][i] > 0.5,
                int(arrays["episode"][i]), int(arrays["step"][i]))
        self._size = count
        self._cursor = int(arrays["cursor"]) % self.capacity
