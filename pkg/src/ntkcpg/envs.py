"""Cartpole dynamics and the state-space region samplers.

Only Cartpole is simulated. ``make_env("lunarlander")`` exists so configs
naming it fail with a clear message instead of a KeyError.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SteppedAfterDone


@dataclass(frozen=True)
class CartpoleParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02
    phi_limit: float = 12 * 2 * math.pi / 360
    x_limit: float = 2.4
    max_steps: int = 200
    integrator: str = "euler"

    def __post_init__(self):
        for name in ("gravity", "cart_mass", "pole_mass", "half_length", "force_mag",
                     "dt", "phi_limit", "x_limit", "max_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.integrator not in ("euler", "semi-implicit"):
            raise ValueError(f"unknown integrator {self.integrator!r}")


def cartpole_reset(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=4)


def cartpole_dynamics(state, action: int, params: CartpoleParams = CartpoleParams()) -> np.ndarray:
    """One integration step of the classic cart-pole equations (no termination logic)."""
    x, x_dot, phi, phi_dot = (float(v) for v in state)
    if action not in (0, 1):
        raise ValueError(f"cartpole action must be 0 or 1, got {action!r}")
    force = params.force_mag if action == 1 else -params.force_mag
    total = params.cart_mass + params.pole_mass
    pml = params.pole_mass * params.half_length
    cos, sin = math.cos(phi), math.sin(phi)
    temp = (force + pml * phi_dot * phi_dot * sin) / total
    phi_acc = (params.gravity * sin - cos * temp) / (
        params.half_length * (4.0 / 3.0 - params.pole_mass * cos * cos / total)
    )
    x_acc = temp - pml * phi_acc * cos / total
    dt = params.dt
    if params.integrator == "euler":
        x, x_dot = x + dt * x_dot, x_dot + dt * x_acc
        phi, phi_dot = phi + dt * phi_dot, phi_dot + dt * phi_acc
    else:
        x_dot += dt * x_acc
        x += dt * x_dot
        phi_dot += dt * phi_acc
        phi += dt * phi_dot
    return np.array([x, x_dot, phi, phi_dot])


class Cartpole:
    """Stateful episode wrapper around :func:`cartpole_dynamics`.

    Action 0 pushes the cart left, action 1 pushes it right; every step taken
    earns reward 1.
    """

    name = "cartpole"
    state_dim = 4
    n_actions = 2

    def __init__(self, params: CartpoleParams | None = None):
        self.params = params or CartpoleParams()
        self.state = None
        self.steps = 0
        self.done = True

    def reset(self, rng):
        self.state = cartpole_reset(rng)
        self.steps = 0
        self.done = False
        return self.state.copy()

    def step(self, action):
        if self.done:
            raise SteppedAfterDone("episode is over; call reset() first")
        p = self.params
        self.state = cartpole_dynamics(self.state, int(action), p)
        self.steps += 1
        x, _, phi, _ = self.state
        self.done = bool(abs(phi) > p.phi_limit or abs(x) > p.x_limit or self.steps >= p.max_steps)
        return self.state.copy(), 1.0, self.done


def cartpole_step(state, action, params: CartpoleParams = CartpoleParams(), steps_taken: int = 0):
    """Pure step: ``(next_state, reward, done)`` after ``steps_taken`` prior steps."""
    nxt = cartpole_dynamics(state, action, params)
    done = bool(abs(nxt[2]) > params.phi_limit or abs(nxt[0]) > params.x_limit
                or steps_taken + 1 >= params.max_steps)
    return nxt, 1.0, done


def make_env(name: str, **kwargs):
    key = name.lower().replace("-", "").replace("_", "")
    if key == "cartpole":
        return Cartpole(CartpoleParams(**kwargs) if kwargs else None)
    if key == "lunarlander":
        raise NotImplementedError(
            "lunar lander physics are not implemented; its constraint tables can be "
            "loaded but no environment can be constructed"
        )
    raise ValueError(f"unknown environment {name!r}")


@dataclass(frozen=True)
class RegionSampler:
    """Parametric family of states ``f(t_i)``, i = 0..n_t-1.

    ``disk``: points on the circle of ``radius`` around ``center`` in the
    coordinate ``plane`` (two state indices), spaced evenly by angle from 0.
    ``rectangle``: even grid over the quadrilateral with ``corners`` (listed
    in order around the boundary) in ``plane``, optionally crossed with
    ``spans`` ({dim: (lo, hi)}) on further coordinates.
    ``halfplane_band``: evenly spaced points on the segment between
    ``endpoints`` in ``plane``.
    Coordinates not mentioned are taken from ``center``.
    """

    kind: str
    center: tuple
    n_t: int
    plane: tuple = (2, 3)
    radius: float = 0.0
    corners: tuple = ()
    endpoints: tuple = ()
    spans: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("disk", "rectangle", "halfplane_band"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.n_t < 2:
            raise ValueError("a region needs n_t >= 2")
        if len(self.plane) != 2:
            raise ValueError("plane must name two state coordinates")
        if self.kind == "disk" and not self.radius > 0:
            raise ValueError("disk radius must be positive")
        if self.kind == "rectangle" and len(self.corners) != 4:
            raise ValueError("rectangle needs four corners")
        if self.kind == "halfplane_band" and len(self.endpoints) != 2:
            raise ValueError("halfplane_band needs two endpoints")


def _even_grid(axes_counts, n_t):
    """Row-major grid indices, evenly thinned to exactly n_t points."""
    mesh = np.stack(np.meshgrid(*[np.linspace(0.0, 1.0, c) for c in axes_counts], indexing="ij"), -1)
    flat = mesh.reshape(-1, len(axes_counts))
    pick = np.round(np.linspace(0, len(flat) - 1, n_t)).astype(int)
    return flat[pick]


def sample_region(rs: RegionSampler) -> np.ndarray:
    base = np.asarray(rs.center, dtype=np.float64)
    out = np.tile(base, (rs.n_t, 1))
    i, j = rs.plane
    if rs.kind == "disk":
        ang = 2.0 * np.pi * np.arange(rs.n_t) / rs.n_t
        out[:, i] = base[i] + rs.radius * np.cos(ang)
        out[:, j] = base[j] + rs.radius * np.sin(ang)
        # exact cardinal points where cos/sin should vanish
        out[:, i] = np.where(np.isclose(np.cos(ang), 0.0, atol=1e-15), base[i], out[:, i])
        out[:, j] = np.where(np.isclose(np.sin(ang), 0.0, atol=1e-15), base[j], out[:, j])
    elif rs.kind == "halfplane_band":
        a, b = (np.asarray(e, dtype=np.float64) for e in rs.endpoints)
        t = np.linspace(0.0, 1.0, rs.n_t)[:, None]
        seg = (1 - t) * a + t * b
        out[:, i], out[:, j] = seg[:, 0], seg[:, 1]
    else:
        spans = sorted(rs.spans.items())
        dims = 2 + len(spans)
        per_axis = max(2, math.ceil(rs.n_t ** (1.0 / dims)))
        grid = _even_grid([per_axis] * dims, rs.n_t)
        for col, (d, (lo, hi)) in enumerate(spans):
            out[:, int(d)] = lo + (hi - lo) * grid[:, col]
        u, v = grid[:, -2:-1], grid[:, -1:]
        c = [np.asarray(p, dtype=np.float64) for p in rs.corners]
        pts = (1 - u) * (1 - v) * c[0] + u * (1 - v) * c[1] + u * v * c[2] + (1 - u) * v * c[3]
        out[:, i], out[:, j] = pts[:, 0], pts[:, 1]
    return out
