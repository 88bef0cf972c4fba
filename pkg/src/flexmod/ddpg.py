"""DDPG agent that picks the quality/importance blend weight each round.

The state is the concatenation ``(importance, quality)`` of the two
normalised per-modality index vectors; the action is a scalar in ``[0, 1]``
produced by a sigmoid on the actor's output.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import Adam, Mlp, Tensor, concat, init_mlp, mean, mse, neg, no_grad, sigmoid

CHECKPOINT_VERSION = 1


@dataclass
class DdpgConfig:
    hidden: tuple[int, ...] = (64, 64, 64)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    tau: float = 1e-3
    discount: float = 0.99
    capacity: int = 10000
    batch_size: int = 32
    noise_std: float = 0.2
    noise_decay: float = 0.995
    phi: float = 64.0
    target_acc: float = 0.68
    updates_per_round: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.phi <= 1.0:
            raise ValueError("phi must be > 1")
        if self.capacity < 1 or self.batch_size < 1:
            raise ValueError("capacity and batch_size must be >= 1")
        if self.noise_std < 0 or not 0.0 < self.noise_decay <= 1.0:
            raise ValueError("noise_std must be >= 0 and noise_decay in (0, 1]")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.action <= 1.0:
            raise ValueError(f"action {self.action} outside [0, 1]")


def compute_reward(acc: float, config: DdpgConfig) -> float:
    """``phi ** (acc - target) - 1``, clamped at 0 from above."""
    return min(0.0, float(config.phi ** (acc - config.target_acc) - 1.0))


def policy(actor: Mlp, states: np.ndarray) -> Tensor:
    return sigmoid(actor(Tensor(np.atleast_2d(states))))


def q_value(critic: Mlp, states, actions: Tensor | np.ndarray) -> Tensor:
    s = Tensor(np.atleast_2d(states))
    a = actions if isinstance(actions, Tensor) else Tensor(np.asarray(actions, float).reshape(-1, 1))
    return critic(concat([s, a], axis=1))


def select_action(actor: Mlp, state, noise_std: float = 0.0,
                  rng: np.random.Generator | None = None) -> float:
    with no_grad():
        beta = float(policy(actor, np.asarray(state, float)).data[0, 0])
    if noise_std > 0:
        if rng is None:
            raise ValueError("an rng is required when noise_std > 0")
        beta += rng.normal(0.0, noise_std)
    return float(min(1.0, max(0.0, beta)))


def target_q(rewards, next_states, target_actor: Mlp, target_critic: Mlp, discount: float) -> np.ndarray:
    """``R + discount * Q'(s', A'(s'))`` for a batch."""
    with no_grad():
        a = policy(target_actor, next_states)
        q = q_value(target_critic, next_states, a).data[:, 0]
    return np.asarray(rewards, dtype=np.float64) + discount * q


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    for t, s in zip(target.parameters(), source.parameters()):
        t.data = tau * s.data + (1.0 - tau) * t.data


class ReplayBuffer:
    """FIFO experience store with uniform sampling."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.items: deque[Transition] = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.items)

    def push(self, t: Transition) -> None:
        self.items.append(t)

    def sample(self, batch: int, rng: np.random.Generator | int) -> list[Transition]:
        if batch > len(self.items):
            raise ValueError(f"cannot sample {batch} transitions from a buffer of {len(self.items)}")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        idx = rng.choice(len(self.items), size=batch, replace=False)
        return [self.items[i] for i in idx]


class DdpgAgent:
    def __init__(self, state_dim: int, config: DdpgConfig, rng: np.random.Generator,
                 noise_rng: np.random.Generator | None = None):
        self.state_dim = int(state_dim)
        self.config = config
        self.rng = rng
        self.noise_rng = noise_rng if noise_rng is not None else rng
        hidden = list(config.hidden)
        self.actor = init_mlp([state_dim, *hidden, 1], "relu", rng)
        self.critic = init_mlp([state_dim + 1, *hidden, 1], "relu", rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.parameters(), lr=config.actor_lr)
        self.critic_opt = Adam(self.critic.parameters(), lr=config.critic_lr)
        self.buffer = ReplayBuffer(config.capacity)
        self.noise_std = config.noise_std

    def act(self, state, explore: bool = True) -> float:
        std = self.noise_std if explore else 0.0
        return select_action(self.actor, state, std, self.noise_rng)

    def decay_noise(self) -> None:
        self.noise_std *= self.config.noise_decay

    def observe(self, t: Transition) -> None:
        self.buffer.push(t)

    def learn(self) -> None:
        """Run ``updates_per_round`` updates on sampled batches (if any data)."""
        if len(self.buffer) == 0:
            return
        for _ in range(self.config.updates_per_round):
            batch = self.buffer.sample(min(self.config.batch_size, len(self.buffer)), self.rng)
            self.update(batch)

    def update(self, batch: Sequence[Transition]) -> None:
        if not batch:
            raise ValueError("update needs a non-empty batch")
        cfg = self.config
        s = np.stack([t.state for t in batch])
        a = np.array([t.action for t in batch])
        r = np.array([t.reward for t in batch])
        s2 = np.stack([t.next_state for t in batch])

        y = target_q(r, s2, self.target_actor, self.target_critic, cfg.discount)
        critic_loss = mse(q_value(self.critic, s, a), y)
        critic_loss.backward()
        self.critic_opt.step()

        actor_loss = neg(mean(q_value(self.critic, s, policy(self.actor, s))))
        actor_loss.backward()
        for p in self.critic.parameters():
            p.grad = None
        self.actor_opt.step()

        soft_update(self.target_critic, self.critic, cfg.tau)
        soft_update(self.target_actor, self.actor, cfg.tau)

    # -- checkpointing

    def save(self, path) -> None:
        state: dict[str, np.ndarray] = {
            "version": np.asarray(CHECKPOINT_VERSION),
            "state_dim": np.asarray(self.state_dim),
            "noise_std": np.asarray(self.noise_std),
            "hidden": np.asarray(self.config.hidden),
        }
        for name in ("actor", "critic", "target_actor", "target_critic"):
            for i, p in enumerate(getattr(self, name).parameters()):
                state[f"{name}.{i}"] = p.data
        for name in ("actor_opt", "critic_opt"):
            for k, v in getattr(self, name).state().items():
                state[f"{name}.{k}"] = v
        items = list(self.buffer.items)
        state["buf.state"] = np.array([t.state for t in items]).reshape(len(items), self.state_dim)
        state["buf.action"] = np.array([t.action for t in items], dtype=float)
        state["buf.reward"] = np.array([t.reward for t in items], dtype=float)
        state["buf.next_state"] = np.array([t.next_state for t in items]).reshape(len(items), self.state_dim)
        with open(path, "wb") as fh:
            np.savez(fh, **state)

    def load(self, path) -> None:
        with np.load(Path(path)) as z:
            state = {k: z[k] for k in z.files}
        if int(state.get("version", -1)) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported agent checkpoint version")
        if int(state["state_dim"]) != self.state_dim or tuple(state["hidden"]) != self.config.hidden:
            raise ValueError(f"{path}: agent checkpoint shape does not match configuration")
        for name in ("actor", "critic", "target_actor", "target_critic"):
            for i, p in enumerate(getattr(self, name).parameters()):
                p.data = state[f"{name}.{i}"].copy()
        for name in ("actor_opt", "critic_opt"):
            prefix = f"{name}."
            getattr(self, name).load_state({k[len(prefix):]: v for k, v in state.items()
                                             if k.startswith(prefix)})
        self.noise_std = float(state["noise_std"])
        self.buffer = ReplayBuffer(self.config.capacity)
        for s, a, r, s2 in zip(state["buf.state"], state["buf.action"], state["buf.reward"],
                               state["buf.next_state"]):
            self.buffer.push(Transition(s.copy(), float(a), float(r), s2.copy()))
