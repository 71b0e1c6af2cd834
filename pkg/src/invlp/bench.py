"""Experiment harness: learning trials, suites, and the generalization study.

A trial generates an instance, solves for targets at the true weights,
learns ``w`` with one outer solver and scores train and test losses. Test
objective error always uses the true cost.

Wall-clock values cannot be reproduced bit for bit, so every config has a
``deterministic`` switch: when set, time-to-success is measured in objective
evaluations and no wall-clock value enters the result JSON.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ipm
from .grad import Loss, Method, loss_of
from .ilop import IlopProblem, build_nlp, loss_value, true_cost_objective_error
from .models import Observation, build_model, generate_observations
from .nlp import TRACE_COLUMNS, SqpOptions, random_search, sqp_solve

__all__ = [
    "SOLVERS",
    "TrialConfig",
    "TrialResult",
    "run_trial",
    "SuiteReport",
    "run_suite",
    "write_suite",
    "box_stats",
    "success_curve",
    "figure5_reproduction",
    "write_trace",
]

SOLVERS = ("sqp_direct", "sqp_implicit", "sqp_fd", "random_search")
_METHOD = {"sqp_direct": Method.DIRECT, "sqp_implicit": Method.IMPLICIT,
           "sqp_fd": Method.FINITE_DIFFERENCE}


@dataclass(frozen=True)
class TrialConfig:
    family: str
    params: dict = field(default_factory=dict)
    n_train: int = 20
    n_test: int = 20
    loss: str = "aoe"
    solver: str = "sqp_direct"
    time_budget_s: float = 60.0
    max_evals: int | None = None
    success_tol: float = 1e-5
    feas_tol: float = 1e-6
    seed: int = 0
    multi_start: int = 1
    regularizer_weight: float = 0.0
    reduction: bool = True
    redundancy_budget: int = 0
    train_u: list | None = None
    test_u: list | None = None
    w_init: list | None = None
    solver_options: dict = field(default_factory=dict)
    deterministic: bool = False
    label: str | None = None

    def __post_init__(self):
        if self.n_train < 1:
            raise ValueError("n_train must be at least 1")
        if self.n_test < 0:
            raise ValueError("n_test must be non-negative")
        if not self.time_budget_s > 0:
            raise ValueError("time_budget_s must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.multi_start < 1:
            raise ValueError("multi_start must be at least 1")
        if self.deterministic and self.max_evals is None:
            raise ValueError("deterministic trials are budgeted in evaluations; set max_evals")
        Loss(self.loss)
        SqpOptions.from_dict(self.solver_options)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown trial config keys: {sorted(unknown)}")
        if "family" not in d:
            raise ValueError("trial config needs a 'family'")
        if isinstance(d.get("reduction"), str):
            if d["reduction"] not in ("on", "off"):
                raise ValueError("reduction must be 'on' or 'off'")
            d["reduction"] = d["reduction"] == "on"
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def name(self) -> str:
        return self.label or self.solver


@dataclass
class TrialResult:
    config: TrialConfig
    success: bool
    train_loss: float
    train_aoe: float
    train_violation: float
    test_loss_mean: float
    test_loss_median: float
    learned_w: list
    true_w: list | None
    starts: int
    evaluations: int
    evals_to_success: int | None
    reason: str
    time_to_success_s: float | None = None
    learning_time_s: float | None = None
    error: str | None = None
    trace: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {
            "config": self.config.to_dict(),
            "success": self.success,
            "train_loss": self.train_loss,
            "train_aoe": self.train_aoe,
            "train_violation": self.train_violation,
            "test_loss_mean": self.test_loss_mean,
            "test_loss_median": self.test_loss_median,
            "learned_w": self.learned_w,
            "true_w": self.true_w,
            "starts": self.starts,
            "evaluations": self.evaluations,
            "evals_to_success": self.evals_to_success,
            "reason": self.reason,
            "error": self.error,
        }
        if not self.config.deterministic:
            d["time_to_success_s"] = self.time_to_success_s
            d["learning_time_s"] = self.learning_time_s
        return d

    @property
    def success_at(self) -> float | None:
        """Time-to-success in the unit of the config (seconds or evaluations)."""
        if not self.success:
            return None
        if self.config.deterministic:
            return float(self.evals_to_success)
        return self.time_to_success_s


def _instance(cfg: TrialConfig):
    params = dict(cfg.params)
    if cfg.family in ("synthetic", "nguyen", "full_coefficient"):
        params.setdefault("seed", cfg.seed)
    model = build_model(cfg.family, **params)
    rng = np.random.default_rng([cfg.seed, 101])
    if cfg.train_u is not None:
        us = np.asarray(cfg.train_u, dtype=float).reshape(-1, model.dim_u)
    else:
        us = model.sample_u(rng, cfg.n_train)
    if cfg.test_u is not None:
        ut = np.asarray(cfg.test_u, dtype=float).reshape(-1, model.dim_u)
    else:
        ut = model.sample_u(rng, cfg.n_test)
    train = generate_observations(model, us)
    test = generate_observations(model, ut) if len(ut) else []
    return model, train, test, rng


def _score(model, problem, w_full, train, test, cfg):
    settings = problem.settings
    aoe, loss = [], []
    for o in train:
        lp = model.coeffs(o.u, w_full)
        sol = ipm.solve(lp, settings)
        loss.append(loss_value(sol, o.x_obs, lp, cfg.loss))
        aoe.append(loss_value(sol, o.x_obs, lp, Loss.AOE))
    tl = true_cost_objective_error(model, w_full, test) if test else np.zeros(0)
    return float(np.mean(loss)), float(np.mean(aoe)), tl


def _failed(cfg, reason, error, true_w=None):
    return TrialResult(cfg, False, math.nan, math.nan, math.nan, math.nan, math.nan, [],
                       true_w, 0, 0, None, reason, None, None, error)


def run_trial(cfg: TrialConfig | dict) -> TrialResult:
    """Generate, learn and score one trial; failures are recorded, not raised."""
    cfg = cfg if isinstance(cfg, TrialConfig) else TrialConfig.from_dict(cfg)
    try:
        model, train, test, rng = _instance(cfg)
    except Exception as exc:  # noqa: BLE001 - reported in the result
        return _failed(cfg, "generation_failed", f"{type(exc).__name__}: {exc}")
    true_w = None if model.true_w is None else model.true_w.tolist()
    try:
        return _learn(cfg, model, train, test, rng, true_w)
    except Exception as exc:  # noqa: BLE001
        return _failed(cfg, "solver_failed", f"{type(exc).__name__}: {exc}", true_w)


def _learn(cfg, model, train, test, rng, true_w):
    method = _METHOD.get(cfg.solver)
    problem = IlopProblem(model, train, Loss(cfg.loss), cfg.regularizer_weight, method=method)
    built = build_nlp(problem, reduction=cfg.reduction, redundancy_budget=cfg.redundancy_budget)
    nlp = built.nlp
    W = model.admissible_set
    target = cfg.success_tol if Loss(cfg.loss) is Loss.AOE else None
    t0 = time.perf_counter()
    evals = 0
    starts = 0
    trace: list[dict] = []
    best = None
    success_evals = success_time = None
    reason = "budget"
    # deterministic trials ignore the clock entirely
    time_budget = None if cfg.deterministic else cfg.time_budget_s
    if cfg.solver == "random_search":
        sampler = W.sampler(rng)

        def sample_reduced():
            return built.from_full(sampler())

        res = random_search(nlp, sample_reduced, time_budget=time_budget,
                            max_evals=cfg.max_evals, feas_tol=cfg.feas_tol, f_target=target)
        best = (res.w, res.f, res.violation)
        evals, starts, reason = res.evaluations, 1, res.reason
        for row in res.trace:
            trace.append({"start": 0, "iter": row["iter"], "wall_time_s": row["wall_time_s"],
                          "f": row["f"], "max_g": row["violation"], "norm_h": 0.0,
                          "step_alpha": math.nan})
            if success_evals is None and row["best_f"] <= cfg.success_tol \
                    and row["best_violation"] <= cfg.feas_tol:
                success_evals, success_time = row["iter"], row["wall_time_s"]
    else:
        base = SqpOptions.from_dict(cfg.solver_options)
        while starts < cfg.multi_start:
            elapsed = time.perf_counter() - t0
            remaining_t = None if time_budget is None else time_budget - elapsed
            remaining_e = None if cfg.max_evals is None else cfg.max_evals - evals
            if (remaining_t is not None and remaining_t <= 0) or (remaining_e is not None and remaining_e <= 0):
                break
            if starts > 0:
                # restart only when the failure came within half the budget
                used = evals / cfg.max_evals if cfg.max_evals else elapsed / cfg.time_budget_s
                if used >= 0.5:
                    break
            if starts == 0 and cfg.w_init is not None:
                w0_full = np.asarray(cfg.w_init, dtype=float)
            else:
                w0_full = W.sample(rng)
            opts = SqpOptions(**{**asdict(base), "f_target": target,
                                 "feas_tol": cfg.feas_tol, "time_budget_s": remaining_t,
                                 "max_evals": remaining_e})
            res = sqp_solve(nlp, built.from_full(w0_full), opts)
            for row in res.trace:
                trace.append({"start": starts, **{k: row[k] for k in TRACE_COLUMNS},
                              "wall_time_s": elapsed + row["wall_time_s"],
                              "evals": evals + row["evals"]})
            cand = (res.w, res.f, res.violation)
            if best is None or _better(cand, best, cfg.feas_tol):
                best = cand
            starts += 1
            reason = res.reason
            ok = res.f <= cfg.success_tol and res.violation <= cfg.feas_tol
            if ok and success_evals is None:
                hit = next(r for r in res.trace
                           if r["f"] <= cfg.success_tol and max(r["max_g"], r["norm_h"]) <= cfg.feas_tol)
                success_evals = evals + hit["evals"]
                success_time = elapsed + hit["wall_time_s"]
            evals += res.evaluations
            if ok:
                break
    learning_time = time.perf_counter() - t0
    w_full = built.full_w(best[0])
    train_loss, train_aoe, test_losses = _score(model, problem, w_full, train, test, cfg)
    violation = built.outer_violation(best[0])
    in_budget = success_evals is not None and (
        cfg.deterministic or success_time <= cfg.time_budget_s)
    success = train_aoe <= cfg.success_tol and violation <= cfg.feas_tol and in_budget
    if not success:
        success_evals = success_time = None
    return TrialResult(
        cfg, bool(success), train_loss, train_aoe, float(violation),
        float(np.mean(test_losses)) if test_losses.size else math.nan,
        float(np.median(test_losses)) if test_losses.size else math.nan,
        [float(v) for v in w_full], true_w, starts, int(evals),
        None if success_evals is None else int(success_evals), reason,
        success_time, learning_time, None, trace,
    )


def _better(a, b, tol):
    ka = (0, a[1]) if a[2] <= tol else (1, a[2])
    kb = (0, b[1]) if b[2] <= tol else (1, b[2])
    return ka < kb


# -- suites -------------------------------------------------------------------

def box_stats(values) -> dict:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {k: math.nan for k in ("min", "q1", "median", "q3", "max", "mean")}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": float(v.max()), "mean": float(v.mean())}


def success_curve(times: Sequence, n_trials: int, grid) -> list[float]:
    """Fraction of trials with time-to-success ``<= t`` for each ``t`` in ``grid``."""
    hits = np.sort([t for t in times if t is not None])
    return [float(np.searchsorted(hits, t, side="right") / n_trials) for t in grid]


def _grid(configs, deterministic):
    if deterministic:
        top = max(c.max_evals or 1000 for c in configs)
        return [float(v) for v in np.unique(np.round(np.logspace(0, math.log10(max(top, 2)), 25)))]
    top = max(c.time_budget_s for c in configs)
    return [float(v) for v in np.logspace(-3, math.log10(top), 25)]


@dataclass
class SuiteReport:
    grid: list
    unit: str
    curves: dict
    train_box: dict
    test_box: dict
    success_rate: dict
    trials: dict
    complete: bool

    def to_dict(self) -> dict:
        return {
            "unit": self.unit, "grid": self.grid, "curves": self.curves,
            "train_box": self.train_box, "test_box": self.test_box,
            "success_rate": self.success_rate,
            "trials": {k: [r.to_dict() for r in v] for k, v in self.trials.items()},
            "complete": self.complete,
        }


def _trial_configs(configs, trials):
    out = []
    for c in configs:
        for t in range(trials):
            out.append(TrialConfig(**{**asdict(c), "seed": c.seed + t}))
    return out


def run_suite(configs: Sequence[TrialConfig | dict], trials: int = 1, workers: int | None = None,
              out_dir=None) -> SuiteReport:
    """Run ``trials`` seeds of every config and aggregate per config label.

    Trials are distributed over ``workers`` processes (``INVLP_THREADS`` by
    default). Results are keyed by (label, seed) before aggregation so the
    report does not depend on completion order.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    configs = [c if isinstance(c, TrialConfig) else TrialConfig.from_dict(c) for c in configs]
    labels = [c.name for c in configs]
    if len(set(labels)) != len(labels):
        raise ValueError("configs need distinct labels (set 'label' when solvers repeat)")
    deterministic = all(c.deterministic for c in configs)
    jobs = _trial_configs(configs, trials)
    workers = workers or ipm.n_threads()
    results: list[TrialResult] = []
    complete = True
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_trial, jobs))
        else:
            results = [run_trial(j) for j in jobs]
    except KeyboardInterrupt:  # pragma: no cover - interactive use
        complete = False
    grid = _grid(configs, deterministic)
    by_label: dict[str, list[TrialResult]] = {c.name: [] for c in configs}
    for r in sorted(results, key=lambda r: (labels.index(r.config.name), r.config.seed)):
        by_label[r.config.name].append(r)
    curves, train_box, test_box, rate = {}, {}, {}, {}
    for name, rs in by_label.items():
        n = max(len(rs), 1)
        curves[name] = success_curve([r.success_at for r in rs], n, grid)
        train_box[name] = box_stats([r.train_aoe for r in rs])
        test_box[name] = box_stats([r.test_loss_mean for r in rs])
        rate[name] = sum(r.success for r in rs) / n
        if len(rs) < trials:
            complete = False
    report = SuiteReport(grid, "evaluations" if deterministic else "seconds", curves, train_box,
                         test_box, rate, by_label, complete)
    if out_dir is not None:
        write_suite(report, out_dir)
    return report


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_trace(rows: list, path) -> None:
    cols = ["start", *TRACE_COLUMNS] if rows and "start" in rows[0] else list(TRACE_COLUMNS)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, math.nan)) for c in cols])


def write_suite(report: SuiteReport, out_dir) -> None:
    """``results.json``, ``success_curve.csv``, ``loss_box.csv`` and per-trial traces.

    Floats are written with ``repr`` so CSV values parse back to the exact
    doubles stored in the JSON.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    with open(out / "success_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["solver", report.unit, "success_probability"])
        for name, curve in report.curves.items():
            for t, p in zip(report.grid, curve):
                w.writerow([name, _fmt(t), _fmt(p)])
    with open(out / "loss_box.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        keys = ["min", "q1", "median", "q3", "max", "mean"]
        w.writerow(["solver", "split", *keys])
        for name in report.curves:
            for split, box in (("train", report.train_box[name]), ("test", report.test_box[name])):
                w.writerow([name, split, *(_fmt(box[k]) for k in keys)])
    for name, rs in report.trials.items():
        for r in rs:
            write_trace(r.trace, out / f"trace_{name}_{r.config.seed}.csv")


# -- generalization study -----------------------------------------------------

FIGURE5_REFERENCE = {"test_soe": 8.0 / 9.0, "test_aoe": 2.0 / 9.0, "w_learned": [35.0 / 9.0, 4.0 / 3.0]}


def figure5_reproduction(out_dir=None, grid: int = 21, w_ini=(4.0, 1.0),
                         train_u=((1.0, 1.0 / 3.0), (1.0, 1.0 / 3.0)), u_test=(0.5, 5.0 / 6.0),
                         solver: str = "sqp_implicit") -> dict:
    """Learn the unit-box family from two points and report its test error.

    The default training points are taken literally (both at
    ``u = (1, 1/3)``). Decision maps list ``x*`` over a ``grid x grid``
    lattice of ``u`` at the true and learned weights. ``test_soe`` is the
    unhalved squared decision error.
    """
    cfg = TrialConfig("figure5", n_train=len(train_u), n_test=1, solver=solver,
                      train_u=[list(u) for u in train_u], test_u=[list(u_test)],
                      w_init=list(w_ini), time_budget_s=60.0, max_evals=2000,
                      deterministic=True)
    res = run_trial(cfg)
    if res.error:
        raise RuntimeError(res.error)
    model = build_model("figure5")
    w = np.asarray(res.learned_w)
    settings = ipm.IpmSettings.tight(1e-10)
    x_true = ipm.solve(model.coeffs(u_test, model.true_w), settings).x
    x_learn = ipm.solve(model.coeffs(u_test, w), settings).x
    test_aoe = float(true_cost_objective_error(model, w, [Observation(np.asarray(u_test), x_true)])[0])
    train = generate_observations(model, [np.asarray(u) for u in train_u])
    train_soe = float(np.mean([2 * loss_of(model.coeffs(o.u, w),
                                           ipm.solve(model.coeffs(o.u, w), settings).x, o.x_obs,
                                           Loss.SDE) for o in train]))
    axis = np.linspace(0.0, 1.0, grid)
    rows = []
    for u1 in axis:
        for u2 in axis:
            u = np.array([u1, u2])
            xt = ipm.solve(model.coeffs(u, model.true_w), settings).x
            xl = ipm.solve(model.coeffs(u, w), settings).x
            rows.append([u1, u2, xt[0], xt[1], xl[0], xl[1]])
    report = {
        "w_ini": list(w_ini),
        "train_u": [list(u) for u in train_u],
        "u_test": list(u_test),
        "learned_w": res.learned_w,
        "train_aoe": res.train_aoe,
        "train_soe": train_soe,
        "test_aoe": test_aoe,
        "test_soe": float(np.sum((x_learn - x_true) ** 2)),
        "x_test_true": x_true.tolist(),
        "x_test_learned": x_learn.tolist(),
        "reference": FIGURE5_REFERENCE,
        "decision_map_columns": ["u1", "u2", "x1_true", "x2_true", "x1_learned", "x2_learned"],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "figure5.json", "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
        with open(out / "decision_map.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(report["decision_map_columns"])
            for r in rows:
                wr.writerow([_fmt(v) for v in r])
    report["decision_map"] = rows
    return report

