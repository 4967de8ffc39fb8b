"""``ntkcpg`` command line: train, eval, validate-ntk, export-slice.

Exit codes: 0 success, 1 user error (bad config, grid or checkpoint),
2 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
import typing
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .envs import make_env
from .errors import ConfigError, NtkCpgError
from .policy import forward, init, load_checkpoint, save_checkpoint
from .trainer import (
    TrainerConfig,
    TrainingError,
    evaluate,
    format_progress,
    mean_abs_error,
    ntk_prediction_run,
    pass_episode,
    split_seeds,
    train,
    write_logs_csv,
)

OUT_KEY = "out"


class UserError(Exception):
    """Reported on stderr with exit code 1."""


def _key_line(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _check_type(name, value, hint):
    optional = typing.get_origin(hint) is typing.Union or " | " in str(hint)
    base = str(hint).replace(" | None", "")
    if value is None:
        return optional
    if base == "bool":
        return isinstance(value, bool)
    if base == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if base == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if base == "str":
        return isinstance(value, str)
    return True


def parse_run_config(text: str, source: str = "<config>"):
    """JSON text -> (TrainerConfig, out dir or None). Errors carry ``source:line``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UserError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise UserError(f"{source}:1: config must be a JSON object")
    hints = {f.name: f.type for f in fields(TrainerConfig)}
    out = doc.pop(OUT_KEY, None)
    if out is not None and not isinstance(out, str):
        raise UserError(f"{source}:{_key_line(text, OUT_KEY)}: '{OUT_KEY}' must be a string")
    for key, value in doc.items():
        if key not in hints:
            raise UserError(f"{source}:{_key_line(text, key)}: unknown key '{key}'")
        if not _check_type(key, value, hints[key]):
            raise UserError(f"{source}:{_key_line(text, key)}: '{key}' has the wrong type "
                            f"({type(value).__name__}, expected {hints[key]})")
    try:
        cfg = TrainerConfig(**doc).validate()
    except ConfigError as exc:
        raise UserError(f"{source}: {exc}") from None
    return cfg, out


def load_run_config(path, seed=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc.strerror}") from None
    cfg, out = parse_run_config(text, str(path))
    if cfg.constraint_table and not cfg.constraint_table.startswith("table") and cfg.constraint_table != "bands":
        # relative table paths are resolved next to the config file
        table = Path(cfg.constraint_table)
        if not table.is_absolute():
            cfg.constraint_table = str(Path(path).parent / table)
    if seed is not None:
        cfg.seed = seed
    return cfg, out


def _out_dir(args_out, cfg_out) -> Path:
    out = Path(args_out or cfg_out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg, cfg_out = load_run_config(args.config, args.seed)
    from .constraints import load_constraint_table

    points = regions = None
    if cfg.constraint_table:
        try:
            points, regions = load_constraint_table(cfg.constraint_table, cfg.region_strategy,
                                                    cfg.per_region_k)
        except (ConfigError, OSError, ValueError) as exc:
            raise UserError(str(exc)) from None
    out = _out_dir(args.out, cfg_out)
    try:
        net, logs = train(cfg, points, regions,
                          progress=None if args.quiet else lambda e: print(format_progress(e), flush=True))
    except (TrainingError, NtkCpgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_logs_csv(out / "logs.csv", logs)
    save_checkpoint(net, out / "checkpoint.json")
    evals = [e.eval_score for e in logs if e.eval_score is not None]
    summary = {
        "episodes": len(logs),
        "final_eval": evals[-1] if evals else None,
        "pass_episode": pass_episode(logs, cfg.pass_score),
        "pass_score": cfg.pass_score,
        "final_max_residual": logs[-1].max_residual,
        "config": asdict(cfg),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"pass episode: {summary['pass_episode']}  final eval: {summary['final_eval']}")
    return 0


def _load_net(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise UserError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    cfg, cfg_out = load_run_config(args.config, args.seed)
    net = _load_net(args.checkpoint)
    env = make_env(cfg.env, max_steps=cfg.max_steps)
    if net.input_dim != env.state_dim or net.output_dim != env.n_actions:
        raise UserError(f"checkpoint is {net.input_dim}->{net.output_dim} but {cfg.env} needs "
                        f"{env.state_dim}->{env.n_actions}")
    out = _out_dir(args.out, cfg_out)
    _, _, eval_rng = split_seeds(cfg.seed)
    score = evaluate(net, env, cfg.eval_episodes, eval_rng, cfg.max_steps)
    (out / "eval.json").write_text(json.dumps({"episodes": cfg.eval_episodes, "mean_score": score}) + "\n")
    print(f"mean score over {cfg.eval_episodes} episodes: {score:.2f}")
    return 0


def _parse_alphas(spec):
    try:
        alphas = [float(a) for a in spec.split(",") if a.strip()]
    except ValueError:
        raise UserError(f"bad --alpha-sweep {spec!r}: expected comma-separated numbers") from None
    if not alphas or any(not a > 0 for a in alphas):
        raise UserError("--alpha-sweep needs at least one positive value")
    return alphas


def cmd_validate_ntk(args) -> int:
    cfg, cfg_out = load_run_config(args.config, args.seed)
    alphas = _parse_alphas(args.alpha_sweep) if args.alpha_sweep else [cfg.alpha]
    out = _out_dir(args.out, cfg_out)
    rows, summary = [], []
    try:
        for a in alphas:
            recs = ntk_prediction_run(cfg, a, args.episodes)
            rows += recs
            summary.append((a, mean_abs_error(recs), len(recs)))
            print(f"alpha {a:g}: mean |eps| = {summary[-1][1]:.4f}%", flush=True)
    except NtkCpgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    with open(out / "validate_ntk.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "episode", "channel", "predicted", "actual", "epsilon_percent"])
        for r in rows:
            w.writerow([repr(r.alpha), r.episode, r.channel, repr(r.predicted), repr(r.actual),
                        repr(r.epsilon_percent)])
    with open(out / "validate_ntk_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "mean_abs_epsilon_percent", "n_records"])
        for a, m, n in summary:
            w.writerow([repr(a), repr(m), n])
    return 0


def parse_grid(spec: str, n_dims: int):
    """``"i:lo:hi:n,j:lo:hi:n"`` -> [(i, values), (j, values)]."""
    axes = []
    for part in spec.split(","):
        bits = part.strip().split(":")
        if len(bits) != 4:
            raise UserError(f"bad grid axis {part!r}: expected dim:lo:hi:n")
        try:
            dim, lo, hi, n = int(bits[0]), float(bits[1]), float(bits[2]), int(bits[3])
        except ValueError:
            raise UserError(f"bad grid axis {part!r}: expected dim:lo:hi:n") from None
        if not 0 <= dim < n_dims:
            raise UserError(f"grid dimension {dim} outside 0..{n_dims - 1}")
        if n < 1 or (n == 1 and lo != hi) or hi < lo:
            raise UserError(f"bad grid axis {part!r}: need n >= 1, lo <= hi, and lo == hi when n == 1")
        axes.append((dim, np.linspace(lo, hi, n)))
    if len(axes) != 2 or axes[0][0] == axes[1][0]:
        raise UserError("--grid needs exactly two distinct dimensions")
    return axes


def _parse_base(spec, n_dims):
    if spec is None:
        return np.zeros(n_dims)
    try:
        base = np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise UserError(f"bad --base {spec!r}") from None
    if base.shape != (n_dims,):
        raise UserError(f"--base needs {n_dims} values")
    return base


def cmd_export_slice(args) -> int:
    net = _load_net(args.checkpoint)
    (i, xs), (j, ys) = parse_grid(args.grid, net.input_dim)
    base = _parse_base(args.base, net.input_dim)
    out = _out_dir(args.out, None)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    states = np.tile(base, (X.size, 1))
    states[:, i], states[:, j] = X.ravel(), Y.ravel()
    probs = forward(net, states).probs
    with open(out / "slice.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"s_{i}", f"s_{j}", *[f"pi_{a}" for a in range(net.output_dim)]])
        for s, p in zip(states, probs):
            w.writerow([repr(float(s[i])), repr(float(s[j])), *map(repr, map(float, p))])
    print(f"wrote {len(states)} rows to {out / 'slice.csv'}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="ntkcpg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides the config's 'out')")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="run constrained REINFORCE")
    common(p)
    p.add_argument("--quiet", action="store_true", help="no per-episode progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean score of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate-ntk", help="kernel prediction error per learning rate")
    common(p)
    p.add_argument("--alpha-sweep", help="comma-separated learning rates")
    p.add_argument("--episodes", type=int, default=50)
    p.set_defaults(func=cmd_validate_ntk)

    p = sub.add_parser("export-slice", help="policy on a 2-D grid of states")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", required=True, help="dim:lo:hi:n,dim:lo:hi:n")
    p.add_argument("--base", help="comma-separated values of the fixed coordinates (default 0)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_export_slice)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("NTKCPG_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"error: NTKCPG_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
