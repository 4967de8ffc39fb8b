"""Two-layer ReLU policy network with a softmax head.

Parameters are held as four arrays; whenever a flat parameter vector is
needed (Jacobian rows, checkpoints) the order is W1 row-major, b1, W2
row-major, b2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonFinite

POLICY_FLOOR = 1e-6
BIAS_STD = 0.1


@dataclass
class WideReluNet:
    """Raw parameters plus fixed per-tensor multipliers.

    The network computes with effective weights ``scale * raw``. Under the
    ``standard`` parametrization every multiplier is 1 and the raw weights
    carry the 1/sqrt(fan_in) init scale; under ``ntk`` the raw weights are
    N(0, 1) and the multipliers carry it. Both give the same function
    distribution at init, but gradients (and so the NTK) are taken with
    respect to the raw parameters.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int | None = None
    parametrization: str = "standard"

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def n_params(self) -> int:
        h, n = self.W1.shape
        a = self.W2.shape[0]
        return h * n + h + a * h + a

    @property
    def scales(self) -> tuple:
        if self.parametrization == "standard":
            return 1.0, 1.0, 1.0, 1.0
        if self.parametrization == "ntk":
            return (1.0 / np.sqrt(self.input_dim), BIAS_STD,
                    1.0 / np.sqrt(self.hidden_width), BIAS_STD)
        raise ValueError(f"unknown parametrization {self.parametrization!r}")

    def effective(self):
        c1, cb1, c2, cb2 = self.scales
        return c1 * self.W1, cb1 * self.b1, c2 * self.W2, cb2 * self.b2

    def flat_scales(self) -> np.ndarray:
        c1, cb1, c2, cb2 = self.scales
        h, n, a = self.hidden_width, self.input_dim, self.output_dim
        return np.concatenate([np.full(h * n, c1), np.full(h, cb1), np.full(a * h, c2), np.full(a, cb2)])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_flat_params(self, theta) -> "WideReluNet":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        h, n, a = self.hidden_width, self.input_dim, self.output_dim
        i = 0
        W1 = theta[i:i + h * n].reshape(h, n); i += h * n
        b1 = theta[i:i + h]; i += h
        W2 = theta[i:i + a * h].reshape(a, h); i += a * h
        b2 = theta[i:i + a]
        return WideReluNet(W1.copy(), b1.copy(), W2.copy(), b2.copy(), seed=self.seed,
                           parametrization=self.parametrization)

    def copy(self) -> "WideReluNet":
        return self.with_flat_params(self.flat_params())


@dataclass(frozen=True)
class PolicyEval:
    probs: np.ndarray
    logits: np.ndarray


def init(input_dim: int, hidden_width: int, output_dim: int, seed: int,
         parametrization: str = "ntk") -> WideReluNet:
    """Gaussian init.

    Effective weights have std 1/sqrt(fan_in) and effective biases std 0.1
    under either parametrization, and one seed gives the same effective
    network under both.
    """
    if min(input_dim, hidden_width, output_dim) < 1:
        raise ValueError("network dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((hidden_width, input_dim))
    b1 = rng.standard_normal(hidden_width)
    W2 = rng.standard_normal((output_dim, hidden_width))
    b2 = rng.standard_normal(output_dim)
    net = WideReluNet(W1, b1, W2, b2, seed=seed, parametrization="ntk")
    if parametrization == "ntk":
        return net
    if parametrization == "standard":
        W1, b1, W2, b2 = net.effective()
        return WideReluNet(W1, b1, W2, b2, seed=seed, parametrization="standard")
    raise ValueError(f"unknown parametrization {parametrization!r}")


def _as_states(net, states):
    s = np.asarray(states, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2 or s.shape[1] != net.input_dim:
        raise ValueError(f"states must have {net.input_dim} columns, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("states contain non-finite values")
    return s


def _hidden(W1, b1, s):
    pre = s @ W1.T + b1
    return pre, np.maximum(pre, 0.0)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(net: WideReluNet, states) -> PolicyEval:
    s = _as_states(net, states)
    W1, b1, W2, b2 = net.effective()
    _, h = _hidden(W1, b1, s)
    logits = h @ W2.T + b2
    return PolicyEval(probs=_softmax(logits), logits=logits)


def output_jacobian(net: WideReluNet, states, actions=None) -> np.ndarray:
    """Parameter Jacobian of the action probabilities.

    Returns an ``(n_params, n_A * n_B)`` array whose column ``k * n_A + i``
    is d pi(a^i | s_k) / d theta. If ``actions`` is given, only the column of
    the listed action per state is returned, giving ``(n_params, n_B)``.
    """
    s = _as_states(net, states)
    nb = s.shape[0]
    h_dim, n_in, n_a = net.hidden_width, net.input_dim, net.output_dim
    W1, b1, W2, b2 = net.effective()
    c1, cb1, c2, cb2 = net.scales
    pre, h = _hidden(W1, b1, s)
    p = _softmax(h @ W2.T + b2)
    # dp_i/dz_j = p_i (delta_ij - p_j), shape (nb, n_A, n_A)
    D = p[:, :, None] * (np.eye(n_a)[None] - p[:, None, :])
    if actions is not None:
        actions = np.asarray(actions, dtype=int)
        D = D[np.arange(nb), actions][:, None, :]
    n_out = D.shape[1]
    gate = (pre > 0.0).astype(np.float64)
    # dp_i/dh_m through W2, masked by the ReLU gate
    dh = (D @ W2) * gate[:, None, :]
    cols = nb * n_out
    J = np.empty((net.n_params, cols))
    i = 0
    dh_t = dh.transpose(2, 0, 1)
    J[i:i + h_dim * n_in] = (dh_t[:, None] * (c1 * s.T)[None, :, :, None]).reshape(h_dim * n_in, cols)
    i += h_dim * n_in
    J[i:i + h_dim] = cb1 * dh_t.reshape(h_dim, cols)
    i += h_dim
    D_t = D.transpose(2, 0, 1)
    J[i:i + n_a * h_dim] = (D_t[:, None] * (c2 * h.T)[None, :, :, None]).reshape(n_a * h_dim, cols)
    i += n_a * h_dim
    J[i:] = cb2 * D_t.reshape(n_a, cols)
    return J


def log_policy_gradient(net: WideReluNet, states, actions, returns):
    """Return (flat gradient of sum_k G_k log pi(a_k|s_k), loss, probs)."""
    s = _as_states(net, states)
    actions = np.asarray(actions, dtype=int)
    G = np.asarray(returns, dtype=np.float64)
    if G.shape != (s.shape[0],) or actions.shape != (s.shape[0],):
        raise ValueError("states, actions and returns must share the batch length")
    W1, b1, W2, b2 = net.effective()
    c1, cb1, c2, cb2 = net.scales
    pre, h = _hidden(W1, b1, s)
    logits = h @ W2.T + b2
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    rows = np.arange(s.shape[0])
    loss = -float(G @ log_p[rows, actions])
    g_z = -p * G[:, None]
    g_z[rows, actions] += G
    gW2 = c2 * (g_z.T @ h)
    gb2 = cb2 * g_z.sum(axis=0)
    g_h = (g_z @ W2) * (pre > 0.0)
    gW1 = c1 * (g_h.T @ s)
    gb1 = cb1 * g_h.sum(axis=0)
    grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return grad, loss, p


def apply_gradient_ascent(net: WideReluNet, states, actions, returns, alpha: float):
    """One full-batch REINFORCE step; returns ``(new_net, loss)``.

    ``loss`` is ``-sum_k G_k log pi(a_k|s_k)`` evaluated before the update.
    """
    grad, loss, _ = log_policy_gradient(net, states, actions, returns)
    if not np.all(np.isfinite(grad)):
        raise NonFinite("policy gradient has non-finite entries")
    h, n, a = net.hidden_width, net.input_dim, net.output_dim
    i = 0
    W1 = net.W1 + alpha * grad[i:i + h * n].reshape(h, n); i += h * n
    b1 = net.b1 + alpha * grad[i:i + h]; i += h
    W2 = net.W2 + alpha * grad[i:i + a * h].reshape(a, h); i += a * h
    b2 = net.b2 + alpha * grad[i:]
    return WideReluNet(W1, b1, W2, b2, seed=net.seed, parametrization=net.parametrization), loss


def clamp_probs(p):
    return np.clip(p, POLICY_FLOOR, 1.0 - POLICY_FLOOR)


def save_checkpoint(net: WideReluNet, path) -> None:
    doc = {
        "format": "ntkcpg-policy/1",
        "input_dim": net.input_dim,
        "hidden_width": net.hidden_width,
        "output_dim": net.output_dim,
        "seed": net.seed,
        "parametrization": net.parametrization,
        "params": net.flat_params().tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> WideReluNet:
    doc = json.loads(Path(path).read_text())
    try:
        n, h, a = int(doc["input_dim"]), int(doc["hidden_width"]), int(doc["output_dim"])
        params = np.asarray(doc["params"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: not a policy checkpoint ({exc})") from None
    shell = WideReluNet(np.zeros((h, n)), np.zeros(h), np.zeros((a, h)), np.zeros(a),
                        seed=doc.get("seed"), parametrization=doc.get("parametrization", "standard"))
    return shell.with_flat_params(params)
