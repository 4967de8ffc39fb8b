"""Empirical NTK of the policy network and the policy-change predictions built on it.

All predictions are gradient-flow rates (change per unit episode time). A
discrete step with learning rate ``alpha`` is predicted to move the policy
by ``alpha`` times these rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episodes import EpisodeBatch, compute_returns, expand_returns
from .policy import clamp_probs, forward, output_jacobian

UNDEFINED_CHANGE = 1e-14


@dataclass
class KernelBundle:
    """Per-episode kernel quantities.

    ``theta`` is the (n_A n_B)^2 NTK; ``pi_inv`` the clamped inverse
    probabilities of every channel at the batch states; ``flow`` the
    parameter velocity J diag(pi_inv) G shared by every cross-kernel product.
    """

    theta: np.ndarray
    pi_inv: np.ndarray
    expanded_returns: np.ndarray
    jacobian: np.ndarray
    probs: np.ndarray
    flow: np.ndarray
    n_actions: int

    @property
    def n_batch(self) -> int:
        return self.probs.shape[0]


def kernel_from_jacobian(J, probs, expanded_returns, n_actions):
    pi_inv = 1.0 / clamp_probs(np.asarray(probs)).ravel()
    G = np.asarray(expanded_returns, dtype=np.float64)
    theta = J.T @ J
    flow = J @ (pi_inv * G)
    return KernelBundle(theta=theta, pi_inv=pi_inv, expanded_returns=G, jacobian=J,
                        probs=np.asarray(probs), flow=flow, n_actions=n_actions)


def build_kernel(net, batch: EpisodeBatch, gamma: float, convention: str = "paper",
                 returns=None) -> KernelBundle:
    """Assemble the kernel bundle for ``batch``.

    ``returns`` overrides the per-step returns (otherwise computed from the
    batch rewards with ``gamma`` and ``convention``).
    """
    if returns is None:
        returns = compute_returns(batch.rewards, gamma, convention)
    J = output_jacobian(net, batch.states)
    probs = forward(net, batch.states).probs
    G = expand_returns(returns, batch.actions, net.output_dim)
    return kernel_from_jacobian(J, probs, G, net.output_dim)


def predicted_change_batch(kb: KernelBundle) -> np.ndarray:
    return kb.theta @ (kb.pi_inv * kb.expanded_returns)


def cross_kernel(net, kb: KernelBundle, probe_states) -> np.ndarray:
    """theta(s_e, s_probe): (n_A n_P) x (n_A n_B) block matrix."""
    return output_jacobian(net, probe_states).T @ kb.jacobian


def predicted_change_at(net, kb: KernelBundle, probe_states) -> np.ndarray:
    """Predicted flow of every channel at ``probe_states``; probes carry zero return."""
    return output_jacobian(net, probe_states).T @ kb.flow


def batch_average_change(kb: KernelBundle) -> np.ndarray:
    change = predicted_change_batch(kb).reshape(kb.n_batch, kb.n_actions)
    return change.mean(axis=0)


def realized_average_change(net_before, net_after, states) -> np.ndarray:
    """Per-channel batch mean of pi(after) - pi(before) at ``states``."""
    diff = forward(net_after, states).probs - forward(net_before, states).probs
    return diff.mean(axis=0)


def relative_error(predicted, actual) -> np.ndarray:
    """Percentage error per channel; NaN where |actual| is below 1e-14."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    out = np.full(actual.shape, np.nan)
    ok = np.abs(actual) >= UNDEFINED_CHANGE
    out[ok] = (predicted[ok] - actual[ok]) / actual[ok] * 100.0
    return out

