"""Monte-Carlo rollouts and return bookkeeping."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .policy import forward


@dataclass
class EpisodeBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    thinning: int = 1
    raw_steps: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.actions)
        if n < 1 or self.states.shape[0] != n or self.rewards.shape != (n,):
            raise ValueError("states, actions and rewards must be non-empty and equally long")
        if self.thinning < 1:
            raise ValueError("thinning must be a positive integer")
        if not self.raw_steps:
            self.raw_steps = n * self.thinning

    def __len__(self):
        return len(self.actions)


def sample_action(probs, u: float) -> int:
    """Inverse-CDF draw from one probability row with a single uniform ``u``."""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def rollout(env, net, rng: np.random.Generator, max_steps: int, thinning: int = 1) -> EpisodeBatch:
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    s = env.reset(rng)
    states, actions, rewards = [], [], []
    for _ in range(max_steps):
        p = forward(net, s).probs[0]
        a = sample_action(p, rng.random())
        nxt, r, done = env.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        s = nxt
        if done:
            break
    raw = len(actions)
    states, actions, rewards = np.array(states), np.array(actions), np.array(rewards)
    if thinning > 1:
        keep = np.arange(0, raw, thinning)
        # rewards of dropped steps are credited to the kept step before them
        rewards = np.add.reduceat(rewards, keep)
        states, actions = states[keep], actions[keep]
    return EpisodeBatch(states, actions, rewards, thinning=thinning, raw_steps=raw)


def compute_returns(rewards, gamma: float, convention: str = "paper") -> np.ndarray:
    """Discounted future rewards per step.

    ``paper``: G(k) = sum_{j>k} gamma^(j-k) r(j), so the step's own reward is
    excluded and the final return is 0. ``classic``: G(k) = sum_{j>=k}
    gamma^(j-k) r(j).
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    acc = 0.0
    if convention == "paper":
        for k in range(len(r) - 2, -1, -1):
            acc = gamma * (r[k + 1] + acc)
            out[k] = acc
    elif convention == "classic":
        for k in range(len(r) - 1, -1, -1):
            acc = r[k] + gamma * acc
            out[k] = acc
    else:
        raise ValueError(f"unknown return convention {convention!r}")
    return out


def expand_returns(per_step, actions, n_actions: int) -> np.ndarray:
    """Place each step's return at its taken action inside an n_A-block."""
    per_step = np.asarray(per_step, dtype=np.float64)
    actions = np.asarray(actions, dtype=int)
    if per_step.shape != actions.shape:
        raise ValueError("per_step and actions must have the same length")
    out = np.zeros((len(actions), n_actions))
    out[np.arange(len(actions)), actions] = per_step
    return out.ravel()


def write_batch_csv(path, batch: EpisodeBatch, returns) -> None:
    n_n = batch.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *[f"s_{i}" for i in range(n_n)], "action", "reward", "return"])
        for k in range(len(batch)):
            w.writerow([k * batch.thinning, *map(repr, batch.states[k]), int(batch.actions[k]),
                        repr(float(batch.rewards[k])), repr(float(returns[k]))])
