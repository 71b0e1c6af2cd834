"""``invlp`` command-line interface.

Exit codes: 0 on success, 2 on a configuration or input error, 3 on an
internal failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, ipm
from .grad import (
    Loss,
    Method,
    aoe_coefficient_grads,
    aoe_implicit_grads,
    finite_difference_grads,
    sde_implicit_grads,
)
from .lp import load_lp
from .models import build_model, generate_observations, save_observations

EXIT_OK, EXIT_CONFIG, EXIT_INTERNAL = 0, 2, 3


class ConfigError(Exception):
    pass


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _emit(obj, out):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _settings(tol):
    return ipm.IpmSettings.tight(tol) if tol else ipm.DEFAULT_SETTINGS


def cmd_solve(args):
    try:
        lp = load_lp(args.lp)
    except (FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read LP {args.lp}: {exc}") from exc
    sol = ipm.solve(lp, _settings(args.tol))
    _emit(sol.to_dict(), args.out)


def _vector_arg(text):
    """A JSON list given inline or as a path to a JSON file."""
    path = Path(text)
    if path.exists():
        return np.asarray(json.loads(path.read_text()), dtype=float)
    return np.asarray(json.loads(text), dtype=float)


def cmd_grad(args):
    try:
        lp = load_lp(args.lp)
        x_obs = _vector_arg(args.x_obs)
    except (FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc)) from exc
    if x_obs.shape != (lp.D,):
        raise ConfigError(f"x_obs must have {lp.D} entries")
    loss, method = Loss(args.loss), Method(args.method)
    settings = ipm.IpmSettings.tight(args.tol or 1e-10)
    if method is Method.FINITE_DIFFERENCE:
        grads = finite_difference_grads(lp, x_obs, loss, settings=settings)
    else:
        sol = ipm.solve(lp, settings)
        if not sol.optimal:
            raise ConfigError(f"LP is {sol.status.value}; gradients need an optimum")
        if method is Method.DIRECT:
            if loss is not Loss.AOE:
                raise ConfigError("direct gradients are only defined for the aoe loss")
            grads = aoe_coefficient_grads(lp, sol, x_obs)
        elif loss is Loss.AOE:
            grads = aoe_implicit_grads(lp, sol, x_obs)
        else:
            grads = sde_implicit_grads(lp, sol, x_obs)
    _emit({"loss": loss.value, "method": method.value, **grads.to_dict()}, args.out)


def cmd_generate(args):
    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc}") from exc
    if not isinstance(params, dict):
        raise ConfigError("--params must be a JSON object")
    try:
        model = build_model(args.family, **params)
    except TypeError as exc:
        raise ConfigError(f"bad generator parameters: {exc}") from exc
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = generate_observations(model, model.sample_u(rng, args.n_train))
    test = generate_observations(model, model.sample_u(rng, args.n_test))
    save_observations(train, out / "train.json")
    save_observations(test, out / "test.json")
    (out / "model.json").write_text(json.dumps(model.describe(), indent=1) + "\n")
    print(f"wrote {len(train)} train and {len(test)} test observations to {out}")


def _trial_config(d):
    try:
        return bench.TrialConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid trial config: {exc}") from exc


def cmd_learn(args):
    cfg = _trial_config(_read_json(args.config))
    res = bench.run_trial(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.json", "w") as fh:
        json.dump(res.to_dict(), fh, indent=1, sort_keys=True)
    bench.write_trace(res.trace, out / f"trace_{cfg.name}_{cfg.seed}.csv")
    print(f"success={res.success} train_aoe={res.train_aoe:.3g} test_mean={res.test_loss_mean:.3g}")
    if res.error:
        print(f"trial failed: {res.error}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def cmd_bench(args):
    suite = _read_json(args.suite)
    if not isinstance(suite, dict) or "configs" not in suite:
        raise ConfigError("suite JSON needs a 'configs' list")
    configs = [_trial_config(c) for c in suite["configs"]]
    trials = int(suite.get("trials", 1))
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    try:
        report = bench.run_suite(configs, trials, workers=args.workers, out_dir=args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for name, rate in report.success_rate.items():
        print(f"{name}: success rate {rate:.2f}")


def cmd_figure5(args):
    rep = bench.figure5_reproduction(args.out, grid=args.grid)
    ref = rep["reference"]
    print(f"learned w = {rep['learned_w']} (reference {ref['w_learned']})")
    print(f"train AOE = {rep['train_aoe']:.3g}, test AOE = {rep['test_aoe']:.3f} "
          f"(reference {ref['test_aoe']:.3f}), test SOE = {rep['test_soe']:.3f} "
          f"(reference {ref['test_soe']:.3f})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invlp", description="Learn parametric LPs from observed decisions.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve an LP stored as JSON")
    s.add_argument("lp")
    s.add_argument("--tol", type=float, default=None, help="tight tolerance (default solver settings)")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("grad", help="loss gradients with respect to the LP coefficients")
    s.add_argument("lp")
    s.add_argument("x_obs", help="observed decision: JSON file or inline JSON list")
    s.add_argument("--loss", choices=[v.value for v in Loss], default="aoe")
    s.add_argument("--method", choices=[v.value for v in Method], default="direct")
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_grad)

    s = sub.add_parser("generate", help="sample features and solve for target decisions")
    s.add_argument("--family", required=True,
                   choices=["figure1", "figure5", "synthetic", "nguyen", "full_coefficient"])
    s.add_argument("--params", default=None, help="generator parameters as a JSON object")
    s.add_argument("--n-train", type=int, default=20)
    s.add_argument("--n-test", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("learn", help="run one learning trial from a config JSON")
    s.add_argument("config")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("bench", help="run a suite of trials")
    s.add_argument("suite")
    s.add_argument("--out", default=".")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("figure5", help="generalization study on the unit-box family")
    s.add_argument("--out", default=".")
    s.add_argument("--grid", type=int, default=21)
    s.set_defaults(func=cmd_figure5)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"invlp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the internal-failure exit code
        print(f"invlp: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK if code is None else code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
