"""Episode loop for NTK-constrained REINFORCE, plus evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import constraints as cons
from .envs import make_env
from .episodes import compute_returns, expand_returns, rollout
from .errors import ConfigError, DegenerateKernel, Infeasible, IterationLimit, NtkCpgError, SingularMatrix
from .linalg import DEFAULT_SLACK_WEIGHT
from .ntk import batch_average_change as ntk_batch_average
from .ntk import kernel_from_jacobian, realized_average_change, relative_error
from .policy import apply_gradient_ascent, forward, init, output_jacobian

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    env: str = "cartpole"
    hidden_width: int = 5000
    alpha: float = 1e-4
    gamma: float = 0.99
    max_episodes: int = 100
    max_steps: int = 200
    eval_episodes: int = 100
    eval_every: int = 5
    pass_score: float = 195.0
    stop_on_pass: bool = True
    seed: int = 0
    thinning: int = 1
    return_convention: str = "paper"
    parametrization: str = "ntk"
    constraint_table: str | None = None
    qp_mode: str = "hard"
    slack_weight: float = DEFAULT_SLACK_WEIGHT
    g_max: float | None = None
    per_region_k: int | None = None
    region_strategy: str | None = None

    def validate(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        for name in ("hidden_width", "max_episodes", "max_steps", "eval_episodes", "eval_every", "thinning"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.return_convention not in ("paper", "classic"):
            raise ConfigError("return_convention must be 'paper' or 'classic'")
        if self.parametrization not in ("ntk", "standard"):
            raise ConfigError("parametrization must be 'ntk' or 'standard'")
        if self.qp_mode not in ("hard", "slack"):
            raise ConfigError("qp_mode must be 'hard' or 'slack'")
        if not self.slack_weight > 0:
            raise ConfigError("slack_weight must be positive")
        if self.g_max is not None and not self.g_max > 0:
            raise ConfigError("g_max must be positive")
        if self.region_strategy not in (None, *cons.STRATEGIES):
            raise ConfigError(f"region_strategy must be one of {cons.STRATEGIES}")
        return self

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc).validate()


@dataclass
class EpisodeLog:
    episode: int
    score: int
    batch_len: int
    loss: float
    safe_return_max: float
    max_residual: float
    residuals: dict = field(default_factory=dict)
    selected: dict = field(default_factory=dict)
    eval_score: float | None = None
    solver_failed: bool = False
    wall_time: float = 0.0


class TrainingError(NtkCpgError):
    def __init__(self, episode, cause):
        super().__init__(f"episode {episode}: {cause}")
        self.episode = episode
        self.cause = cause


def split_seeds(seed: int):
    """Independent generators for net init, rollouts and evaluation."""
    init_ss, roll_ss, eval_ss = np.random.SeedSequence(seed).spawn(3)
    return (int(init_ss.generate_state(1)[0]), np.random.default_rng(roll_ss),
            np.random.default_rng(eval_ss))


def evaluate(net, env, n_episodes: int, rng, max_steps: int = 10**9) -> float:
    """Mean raw episode length with actions sampled from the policy."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    return float(np.mean([rollout(env, net, rng, max_steps).raw_steps for _ in range(n_episodes)]))


def _constraint_gaps(net, points, regions):
    out = {}
    if points:
        gaps, _ = cons.residuals(net, points)
        for i, (c, g) in enumerate(zip(points, gaps)):
            out[c.label or f"p{i}"] = float(g)
    for j, r in enumerate(regions):
        out[r.label or f"r{j}"] = cons.region_deviation(net, r)
    return out


def train(config: TrainerConfig, points=None, regions=None, progress=None):
    """Run constrained REINFORCE; returns ``(net, logs)``.

    ``points`` / ``regions`` default to the config's constraint table. With
    neither, every episode is a plain REINFORCE update.
    """
    config.validate()
    if points is None and regions is None and config.constraint_table:
        points, regions = cons.load_constraint_table(
            config.constraint_table, config.region_strategy, config.per_region_k)
    points, regions = list(points or []), list(regions or [])
    env = make_env(config.env, max_steps=config.max_steps)
    eval_env = make_env(config.env, max_steps=config.max_steps)
    init_seed, roll_rng, eval_rng = split_seeds(config.seed)
    net = init(env.state_dim, config.hidden_width, env.n_actions, init_seed, config.parametrization)
    slack = config.slack_weight if config.qp_mode == "slack" else None

    logs = []
    for episode in range(1, config.max_episodes + 1):
        t0 = time.perf_counter()
        batch = rollout(env, net, roll_rng, config.max_steps, config.thinning)
        G = compute_returns(batch.rewards, config.gamma, config.return_convention)
        active = list(points)
        selected = {}
        solver_failed = False
        try:
            if active or regions:
                J = output_jacobian(net, batch.states)
                kb = kernel_from_jacobian(J, forward(net, batch.states).probs,
                                          expand_returns(G, batch.actions, net.output_dim),
                                          net.output_dim)
                # regional selection needs this episode's batch, so it runs after the rollout
                for j, region in enumerate(regions):
                    picked = cons.select_regional_points(net, kb, region, config.alpha)
                    selected[region.label or f"r{j}"] = {
                        "state": [float(v) for v in picked[0].state],
                        "deviation": float(cons.residuals(net, picked[:1])[0][0]),
                    }
                    active += picked
                safe = cons.solve_safe_returns(net, kb, active, config.alpha, slack, config.g_max)
            else:
                safe = cons.SafeReturns.empty(net.input_dim)
        except (Infeasible, SingularMatrix, IterationLimit, DegenerateKernel) as exc:
            if config.qp_mode == "hard":
                raise TrainingError(episode, exc) from exc
            log.warning("episode %d: constraint solve failed (%s); training on the batch only", episode, exc)
            safe = cons.SafeReturns.empty(net.input_dim)
            solver_failed = True
        states, actions, returns = cons.augment_batch(batch, safe, G)
        net, loss = apply_gradient_ascent(net, states, actions, returns, config.alpha)

        gaps = _constraint_gaps(net, points, regions)
        entry = EpisodeLog(
            episode=episode,
            score=batch.raw_steps,
            batch_len=len(batch),
            loss=loss,
            safe_return_max=float(np.abs(safe.returns).max()) if len(safe) else 0.0,
            max_residual=max(gaps.values()) if gaps else 0.0,
            residuals=gaps,
            selected=selected,
            solver_failed=solver_failed,
        )
        if episode % config.eval_every == 0:
            entry.eval_score = evaluate(net, eval_env, config.eval_episodes, eval_rng, config.max_steps)
        entry.wall_time = time.perf_counter() - t0
        logs.append(entry)
        if progress is not None:
            progress(entry)
        if config.stop_on_pass and entry.eval_score is not None and entry.eval_score >= config.pass_score:
            break
    return net, logs


def pass_episode(logs, pass_score):
    for entry in logs:
        if entry.eval_score is not None and entry.eval_score >= pass_score:
            return entry.episode
    return None


LOG_COLUMNS = ["episode", "score", "batch_len", "loss", "safe_return_max", "max_residual",
               "eval_score", "solver_failed", "residuals", "selected"]


def write_logs_csv(path, logs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for e in logs:
            row = asdict(e)
            row["residuals"] = json.dumps(row["residuals"], sort_keys=True)
            row["selected"] = json.dumps(row["selected"], sort_keys=True)
            row["eval_score"] = "" if row["eval_score"] is None else repr(row["eval_score"])
            w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in LOG_COLUMNS])


def format_progress(e: EpisodeLog) -> str:
    msg = (f"episode {e.episode:4d}  score {e.score:4d}  loss {e.loss:11.4g}  "
           f"|G_s|max {e.safe_return_max:9.4g}  residual {e.max_residual:+.4f}")
    if e.eval_score is not None:
        msg += f"  eval {e.eval_score:.2f}"
    return msg


@dataclass
class PredictionRecord:
    alpha: float
    episode: int
    channel: int
    predicted: float
    actual: float
    epsilon_percent: float


def ntk_prediction_run(config: TrainerConfig, alpha: float, n_episodes: int = 50):
    """Unconstrained training at ``alpha``, comparing each step's realized
    batch-average policy change with ``alpha`` times the kernel prediction."""
    config.validate()
    env = make_env(config.env, max_steps=config.max_steps)
    init_seed, roll_rng, _ = split_seeds(config.seed)
    net = init(env.state_dim, config.hidden_width, env.n_actions, init_seed, config.parametrization)
    out = []
    for episode in range(1, n_episodes + 1):
        batch = rollout(env, net, roll_rng, config.max_steps, config.thinning)
        G = compute_returns(batch.rewards, config.gamma, config.return_convention)
        kb = kernel_from_jacobian(output_jacobian(net, batch.states), forward(net, batch.states).probs,
                                  expand_returns(G, batch.actions, net.output_dim), net.output_dim)
        predicted = alpha * ntk_batch_average(kb)
        new_net, _ = apply_gradient_ascent(net, batch.states, batch.actions, G, alpha)
        actual = realized_average_change(net, new_net, batch.states)
        eps = relative_error(predicted, actual)
        out += [PredictionRecord(alpha, episode, c, float(predicted[c]), float(actual[c]), float(eps[c]))
                for c in range(net.output_dim)]
        net = new_net
    return out


def mean_abs_error(records) -> float:
    eps = np.array([r.epsilon_percent for r in records])
    eps = eps[np.isfinite(eps)]
    return float(np.mean(np.abs(eps))) if len(eps) else float("nan")
