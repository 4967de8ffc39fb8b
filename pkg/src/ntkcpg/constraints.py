"""Safe returns that steer the policy toward prescribed action probabilities.

Each constraint pins pi(a_s | s_s) against a target. The NTK predicts how a
gradient step on the batch plus a set of extra (s_s, a_s, G_s) tuples moves
the policy at the constrained pairs; the safe returns G_s are solved so that
this predicted one-step change meets the targets.

Sign convention: every row is written in ``>=`` form. An ``at_most`` row has
sign -1 and residual ``pi - c``; ``at_least`` and ``equal`` rows have sign +1
and residual ``c - pi``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .envs import RegionSampler, sample_region
from .errors import ConfigError, DegenerateKernel, Infeasible, IterationLimit
from .linalg import QpProblem, lu_solve, solve_qp_min_norm
from .policy import clamp_probs, forward, output_jacobian

RELATIONS = {"equal": "equal", "==": "equal", "=": "equal",
             "at_least": "at_least", ">=": "at_least",
             "at_most": "at_most", "<=": "at_most"}
STRATEGIES = ("max_return", "max_deviation")
EQUALITY_BAND = 0.005
DEGENERATE_KERNEL = 1e-10
TIE_TOL = 1e-9


@dataclass(frozen=True)
class PointConstraint:
    state: tuple
    action: int
    relation: str
    target: float
    label: str = ""

    def __post_init__(self):
        rel = RELATIONS.get(self.relation)
        if rel is None:
            raise ValueError(f"unknown relation {self.relation!r}")
        object.__setattr__(self, "relation", rel)
        object.__setattr__(self, "state", tuple(float(v) for v in self.state))
        if not 0.0 < self.target < 1.0:
            raise ValueError(f"target {self.target} must lie strictly inside (0, 1)")
        if not np.all(np.isfinite(self.state)):
            raise ValueError("constraint state must be finite")
        if int(self.action) != self.action or self.action < 0:
            raise ValueError(f"invalid action index {self.action!r}")

    @property
    def sign(self) -> int:
        return -1 if self.relation == "at_most" else 1


@dataclass(frozen=True)
class RegionConstraint:
    sampler: RegionSampler
    action: int
    relation: str
    target: float
    strategy: str = "max_deviation"
    per_region_k: int = 1
    label: str = ""

    def __post_init__(self):
        rel = RELATIONS.get(self.relation)
        if rel not in ("at_least", "at_most"):
            raise ValueError(f"regions take at_least/at_most relations, got {self.relation!r}")
        object.__setattr__(self, "relation", rel)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.target < 1.0:
            raise ValueError(f"target {self.target} must lie strictly inside (0, 1)")
        if not 1 <= self.per_region_k <= self.sampler.n_t:
            raise ValueError("per_region_k must be between 1 and n_t")

    @property
    def sign(self) -> int:
        return -1 if self.relation == "at_most" else 1


@dataclass
class SafeReturns:
    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    gaps: np.ndarray
    violations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    @classmethod
    def empty(cls, n_n):
        z = np.zeros(0)
        return cls(np.zeros((0, n_n)), np.zeros(0, dtype=int), z, z, z, [])


def _stack(constraints):
    states = np.array([c.state for c in constraints], dtype=np.float64)
    actions = np.array([c.action for c in constraints], dtype=int)
    return states, actions


def _signed_gap(p, target, sign):
    return sign * (target - p)


def residuals(net, constraints):
    """Signed gaps ``delta`` (positive = violated) and row signs."""
    if not constraints:
        raise ValueError("residuals needs at least one constraint")
    states, actions = _stack(constraints)
    p = forward(net, states).probs[np.arange(len(actions)), actions]
    signs = np.array([c.sign for c in constraints])
    targets = np.array([c.target for c in constraints])
    return _signed_gap(p, targets, signs), signs


def _system(net, kb, states, actions):
    """Kernel pieces restricted to the constrained channels.

    Returns ``(M, cross, p)`` where the predicted flow at the constrained
    pairs is ``cross + M @ G_s``.
    """
    J_s = output_jacobian(net, states, actions)
    p = forward(net, states).probs[np.arange(len(actions)), actions]
    M = (J_s.T @ J_s) / clamp_probs(p)[None, :]
    cross = J_s.T @ kb.flow
    return M, cross, p


def _clip(G, g_max):
    return G if g_max is None else np.clip(G, -g_max, g_max)


def solve_equality(net, kb, constraints, alpha: float, g_max=None) -> SafeReturns:
    """Safe returns making the predicted step land exactly on every target."""
    if any(c.relation != "equal" for c in constraints):
        raise ValueError("solve_equality takes only equality constraints")
    states, actions = _stack(constraints)
    M, cross, p = _system(net, kb, states, actions)
    delta = np.array([c.target for c in constraints]) - p
    G = _clip(lu_solve(M, delta / alpha - cross), g_max)
    return SafeReturns(states, actions, G, delta, np.zeros(len(G)),
                       [c.label for c in constraints])


def inequality_rows(net, kb, constraints, alpha: float, band: float = EQUALITY_BAND):
    """``(A, b, row_owner)`` with ``A @ G_s >= b`` encoding every constraint.

    An equality becomes two rows, ``>= c - band`` and ``<= c + band``.
    """
    states, actions = _stack(constraints)
    M, cross, p = _system(net, kb, states, actions)
    rows_A, rows_b, owner = [], [], []
    for i, c in enumerate(constraints):
        if c.relation == "equal":
            pieces = [(1, c.target - band), (-1, c.target + band)]
        else:
            pieces = [(c.sign, c.target)]
        for sign, target in pieces:
            rows_A.append(sign * M[i])
            rows_b.append(_signed_gap(p[i], target, sign) / alpha - sign * cross[i])
            owner.append(i)
    return np.array(rows_A), np.array(rows_b), np.array(owner), p


def solve_inequality(net, kb, constraints, alpha: float, slack_weight=None,
                     g_max=None, band: float = EQUALITY_BAND) -> SafeReturns:
    """Minimum-norm safe returns satisfying every predicted inequality.

    With ``slack_weight`` set, the slack-relaxed QP is used only when the hard
    problem fails.
    """
    states, actions = _stack(constraints)
    A, b, owner, p = inequality_rows(net, kb, constraints, alpha, band)
    try:
        res = solve_qp_min_norm(QpProblem(A, b))
    except (Infeasible, IterationLimit) as exc:
        if slack_weight is not None:
            res = solve_qp_min_norm(QpProblem(A, b, slack_weight=slack_weight))
        elif isinstance(exc, IterationLimit):
            raise
        else:
            labels = sorted({constraints[owner[r]].label or str(owner[r]) for r in exc.rows})
            raise Infeasible(f"inequality constraints are infeasible: {', '.join(labels)}",
                             rows=exc.rows) from None
    G = _clip(res.x, g_max)
    gaps = np.array([_signed_gap(p[i], c.target, c.sign) for i, c in enumerate(constraints)])
    viol = np.zeros(len(constraints))
    np.maximum.at(viol, owner, res.violations)
    return SafeReturns(states, actions, G, gaps, viol, [c.label for c in constraints])


def solve_safe_returns(net, kb, constraints, alpha, slack_weight=None, g_max=None):
    """Dispatch: a pure equality set uses the linear solve, anything else the QP."""
    if not constraints:
        return SafeReturns.empty(net.input_dim)
    if all(c.relation == "equal" for c in constraints):
        return solve_equality(net, kb, constraints, alpha, g_max)
    return solve_inequality(net, kb, constraints, alpha, slack_weight, g_max)


def region_scores(net, kb, region: RegionConstraint, alpha: float):
    """Sampled states, the strategy's score per t_i, and a validity mask.

    ``max_return`` scores each point by the smallest safe return that would
    satisfy it on its own (sign-normalized, so larger means more demanding);
    ``max_deviation`` scores it by its signed gap to the target.
    """
    states = sample_region(region.sampler)
    n = len(states)
    actions = np.full(n, region.action)
    p = forward(net, states).probs[:, region.action]
    gap = _signed_gap(p, region.target, region.sign)
    if region.strategy == "max_deviation":
        return states, gap, np.ones(n, dtype=bool)
    J_t = output_jacobian(net, states, actions)
    self_kernel = np.einsum("ij,ij->j", J_t, J_t) / clamp_probs(p)
    cross = J_t.T @ kb.flow
    valid = self_kernel > DEGENERATE_KERNEL
    scores = np.full(n, -np.inf)
    scores[valid] = (gap[valid] / alpha - region.sign * cross[valid]) / self_kernel[valid]
    return states, scores, valid


def top_k_indices(scores, k, valid=None, tol=TIE_TOL):
    """Indices of the k largest scores; near-ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    remaining = list(np.flatnonzero(valid)) if valid is not None else list(range(len(scores)))
    picked = []
    while remaining and len(picked) < k:
        best = max(scores[i] for i in remaining)
        i = min(i for i in remaining if scores[i] >= best - tol)
        picked.append(i)
        remaining.remove(i)
    return picked


def select_regional_points(net, kb, region: RegionConstraint, alpha: float):
    states, scores, valid = region_scores(net, kb, region, alpha)
    if not np.any(valid):
        raise DegenerateKernel(f"region {region.label or '?'}: kernel vanishes at every sample")
    idx = top_k_indices(scores, region.per_region_k, valid)
    return [PointConstraint(states[i], region.action, region.relation, region.target,
                            label=f"{region.label}[t{i}]") for i in idx]


def region_deviation(net, region: RegionConstraint) -> float:
    """Largest signed gap over all sampled points of the region."""
    states = sample_region(region.sampler)
    p = forward(net, states).probs[:, region.action]
    return float(np.max(_signed_gap(p, region.target, region.sign)))


def augment_batch(batch, safe: SafeReturns, batch_returns):
    """Concatenate batch tuples followed by the safe tuples."""
    states = np.concatenate([batch.states, np.asarray(safe.states).reshape(-1, batch.states.shape[1])])
    actions = np.concatenate([batch.actions, np.asarray(safe.actions, dtype=int)])
    returns = np.concatenate([np.asarray(batch_returns, dtype=np.float64), safe.returns])
    return states, actions, returns


# --- constraint tables -------------------------------------------------------

BUNDLED_TABLES = {
    "table1": "table1_cartpole_points.json",
    "table1-corrected": "table1_cartpole_points_corrected.json",
    "table2": "table2_lunarlander_points.json",
    "table3": "table3_cartpole_regions.json",
    "table4": "table4_cartpole_disks.json",
    "bands": "cartpole_band_boundaries.json",
}

_REGION_KINDS = {"disk": "disk", "rectangle": "rectangle",
                 "halfplane-band": "halfplane_band", "halfplane_band": "halfplane_band"}
_POINT_KEYS = {"state", "action", "relation", "target", "label"}
_REGION_KEYS = {"kind", "center", "radius", "plane", "corners", "endpoints", "spans", "n_t",
                "action", "relation", "target", "strategy", "per_region_k", "label"}


def _parse_point(doc, where):
    unknown = set(doc) - _POINT_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return PointConstraint(doc["state"], int(doc["action"]), doc["relation"],
                               float(doc["target"]), doc.get("label", ""))
    except KeyError as exc:
        raise ConfigError(f"{where}: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_region(doc, where, strategy=None, per_region_k=None):
    unknown = set(doc) - _REGION_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        kind = _REGION_KINDS[doc["kind"]]
        sampler = RegionSampler(
            kind=kind,
            center=tuple(float(v) for v in doc["center"]),
            n_t=int(doc["n_t"]),
            plane=tuple(int(v) for v in doc.get("plane", (2, 3))),
            radius=float(doc.get("radius", 0.0)),
            corners=tuple(tuple(map(float, c)) for c in doc.get("corners", ())),
            endpoints=tuple(tuple(map(float, c)) for c in doc.get("endpoints", ())),
            spans={int(k): tuple(map(float, v)) for k, v in doc.get("spans", {}).items()},
        )
        return RegionConstraint(
            sampler, int(doc["action"]), doc["relation"], float(doc["target"]),
            strategy=strategy or doc.get("strategy", "max_deviation"),
            per_region_k=int(per_region_k or doc.get("per_region_k", 1)),
            label=doc.get("label", ""),
        )
    except KeyError as exc:
        raise ConfigError(f"{where}: missing or unknown key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_constraint_table(doc, strategy=None, per_region_k=None):
    """Return ``(points, regions)`` from a decoded table document.

    ``strategy`` / ``per_region_k`` override the per-region settings.
    """
    if not isinstance(doc, dict):
        raise ConfigError("constraint table must be a JSON object")
    unknown = set(doc) - {"points", "regions", "env", "description", "note"}
    if unknown:
        raise ConfigError(f"constraint table: unknown keys {sorted(unknown)}")
    points = [_parse_point(p, f"points[{i}]") for i, p in enumerate(doc.get("points", []))]
    regions = [_parse_region(r, f"regions[{i}]", strategy, per_region_k)
               for i, r in enumerate(doc.get("regions", []))]
    return points, regions


def read_table_document(source):
    """Decode a table from a path, a bundled name (``table1`` ...) or a dict."""
    if isinstance(source, dict):
        return source
    if source in BUNDLED_TABLES:
        text = resources.files("ntkcpg.tables").joinpath(BUNDLED_TABLES[source]).read_text()
        return json.loads(text)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read constraint table {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_constraint_table(source, strategy=None, per_region_k=None):
    return parse_constraint_table(read_table_document(source), strategy, per_region_k)
