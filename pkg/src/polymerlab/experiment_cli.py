"""Experiment drivers and the command line interface.

Every experiment is a list of independent seeded tasks; task seeds derive
from (master seed, task index), never from worker identity, so reruns are
reproducible at any parallelism.  Drivers are plain functions returning
ResultRecord lists, shared between the CLI and the acceptance tests.

Usage:
    polymerlab run config.yaml [--seed S] [--workers W] [--out DIR]
    polymerlab summarize DIR [--criterion SUBSTRING]
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .charge_field import charge_distribution, sample_charges
from .energy import decompose, hamiltonian
from .estimates import clopper_pearson_upper
from .gibbs_sampler import GibbsConfig, log_partition, mean_energy, phase_scan
from .green_function import (
    green_table,
    mc_never_return_fraction,
    mc_return_partial_sum,
    return_probabilities,
)
from .lattice_walk import sample_walk
from .records import ResultRecord, read_records, write_records
from .rng import spawn_rng
from .tail_estimators import (
    _batch_occupation,
    default_strategy_config,
    double_visit_strategy,
    exact_energy_distribution,
    distribution_mean_variance,
    exponent_fit,
    level_set_tail_probe,
    naive_tail,
    strategy_lower_bound,
    tilted_upper_bound,
)

__all__ = ["main", "run_experiment", "EXPERIMENT_KINDS"]


def _pool_map(fn, payloads, workers: int):
    if workers <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, payloads))


class _Guarded:
    """Isolate per-task failures into an error payload.

    A class (not a closure) so the wrapper pickles into worker processes.
    """

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, payload):
        t0 = time.time()
        try:
            rows = self.fn(payload)
        except Exception as exc:
            return [
                {
                    "metric": "error",
                    "value": math.nan,
                    "extra": {"message": f"{type(exc).__name__}: {exc}"},
                    "task_index": payload.get("task_index", -1),
                    "wall_clock": time.time() - t0,
                }
            ]
        for r in rows:
            r.setdefault("task_index", payload.get("task_index", -1))
            r.setdefault("wall_clock", time.time() - t0)
        return rows


def _guarded(fn):
    return _Guarded(fn)


def _records_from_rows(experiment: str, seed: int, params: dict, rows) -> list[ResultRecord]:
    out = []
    for row in rows:
        out.append(
            ResultRecord(
                experiment=experiment,
                task_index=row.get("task_index", -1),
                metric=row["metric"],
                value=row.get("value"),
                stderr=row.get("stderr"),
                seed=seed,
                params=row.get("params", params),
                extra=row.get("extra", {}),
                wall_clock=row.get("wall_clock"),
            )
        )
    return out


@lru_cache(maxsize=None)
def _pair_coincidence_variance(d: int, n: int) -> float:
    """Var H = 4 sum_{m<n} (n-m) P_m(0): ordered monomer pairs sharing a
    site, each contributing unit-variance charge products."""
    series = return_probabilities(d, n - 1)  # probs start at m = 1
    m = np.arange(1, n)
    return float(4.0 * np.sum((n - m) * series.probs))


def _task_identity(payload):
    n, d, kind = payload["n"], payload["d"], payload["kind"]
    samples, direct_samples = payload["samples"], payload["direct_samples"]
    rng = spawn_rng(payload["seed"], payload["task_index"])
    dist = charge_distribution(kind)
    sign_charges = kind == "rademacher"
    max_dev = 0.0  # double-sum oracle vs per-site formula
    split_dev = 0.0  # double sum vs interaction + diagonal decomposition
    y_dev = 0.0  # diagonal part, identically zero for sign charges
    floor_violations = 0
    for _ in range(direct_samples):
        traj = sample_walk(n, d, rng)
        charges = sample_charges(n, dist, rng)
        h_direct = hamiltonian(traj, charges, method="direct")
        h_site = hamiltonian(traj, charges, method="per_site")
        br = decompose(traj, charges)
        recombined = float(br.interaction_part) + float(br.diagonal_part)
        if sign_charges:
            # integer arithmetic end to end: demands exact agreement
            max_dev = max(max_dev, abs(int(h_direct) - int(h_site)))
            split_dev = max(split_dev, abs(int(h_direct) - int(recombined)))
            y_dev = max(y_dev, abs(float(br.diagonal_part)))
            if int(h_direct) < -n:
                floor_violations += 1
        else:
            scale = max(1.0, abs(float(h_direct)))
            max_dev = max(max_dev, abs(float(h_direct) - float(h_site)) / scale)
            split_dev = max(split_dev, abs(float(h_direct) - recombined) / scale)
        # the interaction part is bounded below by -n for every charge law
        if float(br.interaction_part) < -n:
            floor_violations += 1
    dev_tol = 0.0 if sign_charges else 1e-10
    tag = f"n={n}/d={d}/kind={kind}"
    rows = [
        {"metric": f"identity_max_dev/{tag}", "value": max_dev, "extra": {"target": 0.0, "tol": dev_tol}},
        {"metric": f"split_consistency/{tag}", "value": split_dev, "extra": {"target": 0.0, "tol": dev_tol}},
        {"metric": f"floor_violations/{tag}", "value": floor_violations, "extra": {"target": 0, "tol": 0}},
    ]
    if sign_charges:
        rows.append({"metric": f"diagonal_zero/{tag}", "value": y_dev, "extra": {"target": 0.0, "tol": 0.0}})
    if samples > 0 and d == 3:
        # moment cross-check against the pair-coincidence variance; the
        # return-probability quadrature oracle is only cheap in d=3
        values = np.empty(samples)
        done = 0
        batch = max(64, min(8192, 2_000_000 // n))
        while done < samples:
            b = min(batch, samples - done)
            walk_ids, counts, inverse = _batch_occupation(n, d, b, rng)
            charges = sample_charges(b * n, dist, rng)
            qhat = np.bincount(inverse, weights=charges.astype(float), minlength=counts.shape[0])
            per_site = qhat**2 - counts
            inter = np.bincount(walk_ids, weights=per_site, minlength=b)
            diag = n - (charges.reshape(b, n) ** 2).sum(axis=1)
            values[done : done + b] = inter + diag
            done += b
        var_theory = _pair_coincidence_variance(d, n)
        var_emp = float(values.var(ddof=1))
        ratio_se = float(np.std(values**2, ddof=1) / math.sqrt(samples)) / var_theory
        mean_se = float(values.std(ddof=1) / math.sqrt(samples))
        rows.append(
            {
                "metric": f"var_ratio/{tag}",
                "value": var_emp / var_theory,
                "stderr": ratio_se,
                "extra": {"target": 1.0, "tol": 4.0 * ratio_se, "var_theory": var_theory},
            }
        )
        rows.append(
            {"metric": f"mean_z/{tag}", "value": float(values.mean()) / mean_se, "extra": {"target": 0.0, "tol": 4.0}}
        )
    return rows


def run_identity_suite(params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    n_values = params.get("n_values", [32, 128, 512])
    d_values = params.get("d_values", [params.get("d", 3)])
    kinds = params.get("charge_kinds", ["rademacher", "gaussian", "centered_uniform"])
    payloads = []
    idx = 0
    for n in n_values:
        for d in d_values:
            for kind in kinds:
                payloads.append(
                    {
                        "task_index": idx,
                        "seed": master_seed,
                        "n": n,
                        "d": d,
                        "kind": kind,
                        "samples": params.get("samples", 4000),
                        "direct_samples": params.get("direct_samples", 32),
                    }
                )
                idx += 1
    rows = [r for chunk in _pool_map(_guarded(_task_identity), payloads, workers) for r in chunk]
    return _records_from_rows("identity_suite", master_seed, params, rows)


def _task_oracle(payload):
    n, d, samples = payload["n"], payload["d"], payload["samples"]
    rng = spawn_rng(payload["seed"], payload["task_index"])
    law = exact_energy_distribution(n, d)
    mean_exact, var_exact = distribution_mean_variance(law)
    dist = charge_distribution("rademacher")
    walk_ids, counts, inverse = _batch_occupation(n, d, samples, rng)
    charges = sample_charges(samples * n, dist, rng)
    qhat = np.bincount(inverse, weights=charges.astype(float), minlength=counts.shape[0])
    h = np.bincount(walk_ids, weights=qhat**2 - counts, minlength=samples)
    h = np.rint(h).astype(np.int64)  # sign charges: energy is an even integer
    vals, cts = np.unique(h, return_counts=True)
    emp = {int(v): c / samples for v, c in zip(vals, cts)}
    support = set(emp) | set(law)
    tv = 0.5 * sum(abs(emp.get(k, 0.0) - float(law.get(k, 0))) for k in support)
    var_formula = _pair_coincidence_variance(d, n)
    tag = f"n={n}"
    return [
        {"metric": f"tv_distance/{tag}", "value": tv, "extra": {"target": 0.0, "tol": payload["tv_tol"]}},
        {"metric": f"mean_exact/{tag}", "value": float(mean_exact), "extra": {"target": 0.0, "tol": 0.0}},
        {
            "metric": f"var_formula_ratio/{tag}",
            "value": var_formula / float(var_exact),
            "extra": {"target": 1.0, "tol": 1e-9},
        },
    ]


def run_oracle_compare(params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    n_values = params.get("n_values", [2, 3, 4])
    payloads = [
        {
            "task_index": i,
            "seed": master_seed,
            "n": n,
            "d": params.get("d", 3),
            "samples": params.get("samples", 200_000),
            "tv_tol": params.get("tv_tol", 0.02),
        }
        for i, n in enumerate(n_values)
    ]
    rows = [r for chunk in _pool_map(_guarded(_task_oracle), payloads, workers) for r in chunk]
    return _records_from_rows("oracle_compare", master_seed, params, rows)


def _task_level_sets(payload):
    n, d, samples = payload["n"], payload["d"], payload["samples"]
    rng = spawn_rng(payload["seed"], payload["task_index"])
    windows = [tuple(w) for w in payload["windows"]]
    q_values = payload["q_values"]
    ranges = np.zeros(samples)
    win_counts = {w: np.zeros(samples) for w in windows}
    q_sums = {q: np.zeros(samples) for q in q_values}
    batch = max(64, min(8192, 2_000_000 // n))
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        walk_ids, counts, _ = _batch_occupation(n, d, b, rng)
        ranges[done : done + b] = np.bincount(walk_ids, minlength=b)
        for w in windows:
            sel = (counts > w[0]) & (counts <= w[1])
            win_counts[w][done : done + b] = np.bincount(walk_ids[sel], minlength=b)
        for q in q_values:
            q_sums[q][done : done + b] = np.bincount(walk_ids, weights=counts.astype(float) ** q, minlength=b)
        done += b
    tag = f"n={n}"
    rows = [
        {
            "metric": f"range_over_n/{tag}",
            "value": float(ranges.mean()) / n,
            "stderr": float(ranges.std(ddof=1) / math.sqrt(samples)) / n,
        }
    ]
    for w in windows:
        v = win_counts[w]
        rows.append(
            {
                "metric": f"window_count/{tag}/l_in_({w[0]:g},{w[1]:g}]",
                "value": float(v.mean()),
                "stderr": float(v.std(ddof=1) / math.sqrt(samples)),
            }
        )
    for q in q_values:
        v = q_sums[q]
        rows.append(
            {
                "metric": f"occupation_power_sum/{tag}/q={q:g}",
                "value": float(v.mean()),
                "stderr": float(v.std(ddof=1) / math.sqrt(samples)),
            }
        )
    return rows


def run_level_sets(params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    n_values = params.get("n_values", [256, 1024])
    payloads = [
        {
            "task_index": i,
            "seed": master_seed,
            "n": n,
            "d": params.get("d", 3),
            "samples": params.get("samples", 2000),
            "windows": params.get("windows", [[1, 4], [4, 16]]),
            "q_values": params.get("q_values", [2.0]),
        }
        for i, n in enumerate(n_values)
    ]
    rows = [r for chunk in _pool_map(_guarded(_task_level_sets), payloads, workers) for r in chunk]
    return _records_from_rows("level_sets", master_seed, params, rows)


def _task_green(payload):
    d = payload["d"]
    rng = spawn_rng(payload["seed"], payload["task_index"])
    table = green_table(d, tol=payload["tol"], cache_dir=payload.get("cache_dir"))
    tag = f"d={d}"
    rows = [
        {
            "metric": f"green_constant/{tag}",
            "value": table["green_constant"],
            "extra": {"tail_bound": table["tail_bound"], "n_terms": table["n_terms"]},
        },
        {"metric": f"gamma0/{tag}", "value": table["gamma0"]},
    ]
    if payload.get("mc_walks"):
        n_partial = payload["n_partial"]
        # return_probs[k] is P0(S_{k+1} = 0): the series starts at m = 1
        probs = np.asarray(table["return_probs"])
        if probs.shape[0] < n_partial:
            probs = return_probabilities(d, n_partial).probs
        series_partial = float(probs[:n_partial].sum())
        mc_mean, mc_se = mc_return_partial_sum(d, n_partial, payload["mc_walks"], rng)
        rows.append(
            {
                "metric": f"partial_sum_rel_diff/{tag}",
                "value": (mc_mean - series_partial) / series_partial,
                "stderr": mc_se / series_partial,
                "extra": {"target": 0.0, "tol": payload["rel_tol"], "series_partial": series_partial},
            }
        )
        frac, frac_se = mc_never_return_fraction(d, payload["mc_length"], payload["mc_walks"], rng)
        rows.append(
            {
                "metric": f"never_return_fraction/{tag}",
                "value": frac,
                "stderr": frac_se,
                "extra": {"gamma0": table["gamma0"]},
            }
        )
    if payload.get("convolution_check"):
        nmax = payload["convolution_check"]
        quad = return_probabilities(d, nmax, method="quadrature").probs[1:]
        conv = return_probabilities(d, nmax, method="convolution").probs[1:]
        nonzero = quad > 0
        rel = np.abs(conv[nonzero] - quad[nonzero]) / quad[nonzero]
        rows.append(
            {
                "metric": f"convolution_vs_quadrature/{tag}",
                "value": float(rel.max()),
                "extra": {"target": 0.0, "tol": 1e-6, "n_max": nmax},
            }
        )
    return rows


def run_green(params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    d_values = params.get("d_values", [3, 4])
    payloads = [
        {
            "task_index": i,
            "seed": master_seed,
            "d": d,
            "tol": params.get("tol", 0.1),
            "cache_dir": params.get("cache_dir"),
            "mc_walks": params.get("mc_walks", 0),
            "mc_length": params.get("mc_length", 4000),
            "n_partial": params.get("n_partial", 200),
            "rel_tol": params.get("rel_tol", 0.01),
            "convolution_check": params.get("convolution_check", 0),
        }
        for i, d in enumerate(d_values)
    ]
    rows = [r for chunk in _pool_map(_guarded(_task_green), payloads, workers) for r in chunk]
    return _records_from_rows("green", master_seed, params, rows)


def _resolve_x(n: int, xi: float, rule: str) -> float:
    if rule == "xi_sqrt_n":
        return xi * math.sqrt(n)
    if rule == "xi_n23":
        return xi * n ** (2.0 / 3.0)
    if rule == "fixed":
        return xi
    raise ValueError(f"unknown x_rule {rule!r}")


def _task_tail(payload):
    n, d, xi = payload["n"], payload["d"], payload["xi"]
    x = payload["x"]
    est = payload["estimator"]
    p = payload["est_params"]
    rng = spawn_rng(payload["seed"], payload["task_index"])
    dist = charge_distribution(payload["kind"])
    if est == "naive":
        te = naive_tail(n, d, dist, x, p.get("samples", 100_000), rng)
    elif est == "strategy":
        cfg = default_strategy_config(
            n,
            d,
            x,
            min_occupancy_factor=p.get("min_occupancy_factor", 0.5),
            min_site_fraction=p.get("min_site_fraction", 0.25),
            slack=p.get("slack", 0.1),
            fold=p.get("fold"),
        )
        te = strategy_lower_bound(
            n,
            d,
            x,
            cfg,
            rng,
            dist=dist,
            particles=p.get("particles", 1024),
            replicates=p.get("replicates", 4),
            profile_cap=p.get("profile_cap", 24),
            charge_samples=p.get("charge_samples", 512),
        )
    elif est == "double_visit":
        te = double_visit_strategy(
            n,
            d,
            xi,
            rng,
            walks=p.get("walks", 160),
            slack=p.get("slack", 0.1),
            gamma1=p.get("gamma1"),
            cache_dir=p.get("cache_dir"),
        )
    elif est == "tilted":
        y = p.get("y") if p.get("y") is not None else xi**0.2 * n ** (1.0 / 3.0)
        te = tilted_upper_bound(n, d, x, p.get("lam", 0.08), y, p.get("walk_samples", 2000), rng, dist)
    else:
        raise ValueError(f"unknown estimator {est!r}")
    diag = {k: v for k, v in te.diagnostics.items() if not isinstance(v, np.ndarray)}
    return [
        {
            "metric": f"tail/{est}/n={n}/xi={xi:g}",
            "value": te.p_hat,
            "stderr": te.stderr,
            "extra": {
                "log_p": te.log_p,
                "x": x,
                "upper_bound_95": te.upper_bound_95,
                "diagnostics": diag,
            },
        }
    ]


def run_tails_scan(params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    n_values = params.get("n_values", [1024])
    xi_values = params.get("xi_values", [2.0, 4.0])
    x_rule = params.get("x_rule", "xi_sqrt_n")
    d = params.get("d", 3)
    kind = params.get("charge_kind", "rademacher")
    estimators = params.get("estimators", {"naive": {}})
    cells = params.get("cells") or [
        {"n": n, "xi": xi} for n in n_values for xi in xi_values
    ]
    payloads = []
    idx = 0
    for est, est_params in estimators.items():
        for cell in cells:
            n, xi = cell["n"], cell["xi"]
            payloads.append(
                {
                    "task_index": idx,
                    "seed": master_seed,
                    "estimator": est,
                    "est_params": est_params or {},
                    "n": n,
                    "d": d,
                    "xi": xi,
                    "x": _resolve_x(n, xi, x_rule),
                    "kind": kind,
                }
            )
            idx += 1
    chunks = _pool_map(_guarded(_task_tail), payloads, workers)
    rows = [r for chunk in chunks for r in chunk]
    by_cell = {}
    for payload, chunk in zip(payloads, chunks):
        row = chunk[0]
        if row["metric"] != "error":
            by_cell[(payload["estimator"], payload["n"], payload["xi"])] = row
    for fit_spec in params.get("fits", []):
        rows.append(_fit_row(fit_spec, by_cell, idx))
        idx += 1
    return _records_from_rows("tails_scan", master_seed, params, rows)


def _fit_row(fit_spec: dict, by_cell: dict, task_index: int) -> dict:
    est = fit_spec["estimator"]
    vary = fit_spec["vary"]  # "xi" or "n"
    absc, ordv = [], []
    skipped = []
    for (e, n, xi), row in sorted(by_cell.items(), key=lambda kv: (kv[0][1], kv[0][2])):
        if e != est:
            continue
        if vary == "xi" and fit_spec.get("fixed_n") is not None and n != fit_spec["fixed_n"]:
            continue
        if vary == "n" and fit_spec.get("fixed_xi") is not None and xi != fit_spec["fixed_xi"]:
            continue
        log_p = row["extra"]["log_p"]
        if not math.isfinite(log_p):
            skipped.append([n, xi])
            continue
        absc.append(xi if vary == "xi" else n)
        ordv.append(-log_p)
    extra = {
        "target": fit_spec.get("target"),
        "tol": fit_spec.get("tol"),
        "points": len(absc),
        "skipped_cells": skipped,
        "abscissas": absc,
        "neg_log_p": ordv,
    }
    name = fit_spec.get("name", f"{est}_{vary}_slope")
    if len(absc) < 4:
        return {
            "metric": f"fit/{name}",
            "value": math.nan,
            "task_index": task_index,
            "extra": {**extra, "note": "insufficient finite points for a slope"},
        }
    ef = exponent_fit(absc, ordv, log_x=True, log_y=True)
    return {
        "metric": f"fit/{name}",
        "value": ef.slope,
        "stderr": ef.conf_halfwidth / 1.96,
        "task_index": task_index,
        "extra": {**extra, "conf_halfwidth": ef.conf_halfwidth, "residual_rms": ef.residual_rms},
    }


def _task_gibbs_cell(payload):
    obs = phase_scan(
        [payload["n"]],
        [payload["beta"]],
        d=payload["d"],
        master_seed=payload["seed"],
        scaling_exponent=payload["scaling_exponent"],
        steps=payload["steps"],
        level_width=payload["level_width"],
        peak_factor=payload["peak_factor"],
        task_offset=payload["task_index"],
    )[0]
    return _gibbs_rows(obs)


def _gibbs_rows(obs):
    tag = f"n={obs.n}/beta={obs.beta_raw:g}"
    if obs.error is not None:
        return [{"metric": f"error", "value": math.nan, "extra": {"cell": tag, "message": obs.error}}]
    return [
        {
            "metric": f"mean_energy/{tag}",
            "value": obs.mean_energy,
            "stderr": obs.mean_energy_stderr,
            "extra": {"beta_eff": obs.beta_eff, "equilibrated": obs.equilibrated, "acceptance": obs.acceptance},
        },
        {"metric": f"energy_per_monomer/{tag}", "value": obs.mean_energy / obs.n, "stderr": obs.mean_energy_stderr / obs.n},
        {
            "metric": f"level_event_freq/{tag}",
            "value": obs.level_event_freq,
            "extra": {"window": list(obs.level_window), "threshold": obs.level_threshold},
        },
        {
            "metric": f"peak_event_freq/{tag}",
            "value": obs.peak_event_freq,
            "extra": {"threshold": obs.peak_threshold},
        },
    ]


def run_gibbs_scan(params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    n_values = params.get("n_values", [1000])
    beta_values = params.get("beta_values", [0.5, 2.0])
    d = params.get("d", 3)
    common = {
        "d": d,
        "scaling_exponent": params.get("scaling_exponent", 0.4),
        "steps": params.get("steps", 150_000),
        "level_width": params.get("level_width", 8.0),
        "peak_factor": params.get("peak_factor", 4.0),
    }
    payloads = []
    idx = 0
    for n in n_values:
        for beta in beta_values:
            payloads.append({"task_index": idx, "seed": master_seed, "n": n, "beta": beta, **common})
            idx += 1
    chunks = _pool_map(_guarded(_task_gibbs_cell), payloads, workers)
    rows = [r for chunk in chunks for r in chunk]
    if params.get("partition"):
        pp = params["partition"]
        cfg = GibbsConfig(
            n=pp["n"], d=d, beta_raw=pp["beta"], scaling_exponent=common["scaling_exponent"]
        )
        t0 = time.time()
        try:
            res = log_partition(
                cfg,
                spawn_rng(master_seed, idx),
                grid_points=pp.get("grid_points", 9),
                steps=pp.get("steps", 60_000),
            )
            rows.append(
                {
                    "metric": f"log_partition/n={pp['n']}/beta={pp['beta']:g}",
                    "value": res.value,
                    "stderr": res.stderr,
                    "task_index": idx,
                    "wall_clock": time.time() - t0,
                    "extra": {
                        "beta_eff": res.beta_eff,
                        "simpson_trapezoid_gap": res.simpson_trapezoid_gap,
                        "upper_bound": res.beta_eff * pp["n"],
                    },
                }
            )
        except Exception as exc:
            rows.append(
                {
                    "metric": "error",
                    "value": math.nan,
                    "task_index": idx,
                    "extra": {"cell": "log_partition", "message": f"{type(exc).__name__}: {exc}"},
                }
            )
        idx += 1
    zero = mean_energy(GibbsConfig(n=n_values[0], d=d, beta_raw=0.0), spawn_rng(master_seed, idx))
    rows.append(
        {
            "metric": f"mean_energy_beta0/n={n_values[0]}",
            "value": zero.value,
            "stderr": zero.stderr,
            "task_index": idx,
            "extra": {"target": 0.0, "tol": 0.0, "exact": True},
        }
    )
    return _records_from_rows("gibbs_scan", master_seed, params, rows)


def run_conjecture_probe(params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    n = params.get("n", 4096)
    d = params.get("d", 3)
    y_grid = params.get("y_grid", [4, 8, 16])
    samples = params.get("samples", 2000)
    t0 = time.time()
    probe = level_set_tail_probe(n, d, y_grid, samples, spawn_rng(master_seed, 0))
    rows = []
    for y, te in zip(probe["y_grid"], probe["estimates"]):
        rows.append(
            {
                "metric": f"probe/n={n}/y={y:g}",
                "value": te.p_hat,
                "stderr": te.stderr,
                "task_index": 0,
                "wall_clock": time.time() - t0,
                "extra": {"upper_bound_95": te.upper_bound_95, "note": probe["note"]},
            }
        )
    rows.append(
        {
            "metric": "per_sample_monotone",
            "value": 1.0 if probe["per_sample_monotone"] else 0.0,
            "task_index": 0,
            "extra": {"target": 1.0, "tol": 0.0},
        }
    )
    return _records_from_rows("conjecture_probe", master_seed, params, rows)


EXPERIMENT_KINDS = {
    "identity_suite": run_identity_suite,
    "oracle_compare": run_oracle_compare,
    "level_sets": run_level_sets,
    "green": run_green,
    "tails_scan": run_tails_scan,
    "gibbs_scan": run_gibbs_scan,
    "conjecture_probe": run_conjecture_probe,
}


def run_experiment(kind: str, params: dict, master_seed: int = 0, workers: int = 1) -> list[ResultRecord]:
    if kind not in EXPERIMENT_KINDS:
        raise ValueError(f"unknown experiment kind {kind!r}; known: {sorted(EXPERIMENT_KINDS)}")
    return EXPERIMENT_KINDS[kind](params, master_seed=master_seed, workers=workers)


def _resolve_setting(cli_value, env_name, config_value, default):
    if cli_value is not None:
        return cli_value
    env = os.environ.get(env_name)
    if env is not None:
        return int(env)
    if config_value is not None:
        return config_value
    return default


def _cmd_run(args) -> int:
    try:
        with open(args.config) as fh:
            config = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: cannot load config: {exc}", file=sys.stderr)
        return 1
    if not isinstance(config, dict):
        print("error: config must be a YAML mapping", file=sys.stderr)
        return 1
    if "ops" in config:
        ops = config["ops"]
    elif "kind" in config:
        ops = [config]
    else:
        print("error: config needs a 'kind' or an 'ops' list", file=sys.stderr)
        return 1
    # reject bad configs before any file is touched
    for i, op in enumerate(ops):
        if not isinstance(op, dict) or op.get("kind") not in EXPERIMENT_KINDS:
            bad = op.get("kind") if isinstance(op, dict) else op
            print(f"error: op {i}: unknown experiment kind {bad!r}; known: {sorted(EXPERIMENT_KINDS)}", file=sys.stderr)
            return 1
    seed = _resolve_setting(args.seed, "POLYMERLAB_SEED", config.get("seed"), 0)
    workers = _resolve_setting(args.workers, "POLYMERLAB_WORKERS", config.get("workers"), 1)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    had_errors = False
    for i, op in enumerate(ops):
        kind = op.get("kind")
        params = op.get("params", {})
        try:
            records = run_experiment(kind, params, master_seed=seed, workers=workers)
        except ValueError as exc:
            print(f"error: op {i}: {exc}", file=sys.stderr)
            return 1
        path = out_dir / f"{i:02d}_{kind}.jsonl"
        write_records(path, records)
        n_err = sum(1 for r in records if r.metric == "error")
        had_errors = had_errors or n_err > 0
        print(f"[{kind}] wrote {len(records)} records to {path}" + (f" ({n_err} task errors)" if n_err else ""))
    return 2 if had_errors else 0


def _verdict(row: dict):
    extra = row.get("extra", {})
    target = extra.get("target")
    tol = extra.get("tol")
    value = row.get("value")
    if target is None or tol is None or value is None:
        return "info", ""
    if isinstance(value, float) and math.isnan(value):
        return "FAIL", f"value is nan, target {target}"
    if abs(value - target) <= tol:
        return "ok", f"|{value:.4g} - {target:g}| <= {tol:.3g}"
    return "FAIL", f"|{value:.4g} - {target:g}| > {tol:.3g}"


def _cmd_summarize(args) -> int:
    paths = sorted(Path(args.results_dir).glob("*.jsonl"))
    rows = []
    for p in paths:
        rows.extend(read_records(p))
    if args.criterion:
        rows = [
            r
            for r in rows
            if args.criterion in r.get("metric", "") or args.criterion in r.get("experiment", "")
        ]
    if not rows:
        print("missing: no matching records")
        return 0
    any_fail = False
    task_errors = 0
    print(f"{'experiment':<18} {'metric':<52} {'value':>12} verdict")
    for r in rows:
        if r.get("metric") == "error":
            task_errors += 1
            print(f"{r.get('experiment', '?'):<18} {'error':<52} {'-':>12} ERROR {r.get('extra', {}).get('message', '')}")
            continue
        verdict, why = _verdict(r)
        any_fail = any_fail or verdict == "FAIL"
        value = r.get("value")
        vstr = f"{value:.6g}" if isinstance(value, (int, float)) and not (isinstance(value, float) and math.isnan(value)) else str(value)
        print(f"{r.get('experiment', '?'):<18} {r.get('metric', ''):<52} {vstr:>12} {verdict} {why}")
    if task_errors:
        print(f"{task_errors} task errors present")
    return 3 if any_fail else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="polymerlab",
        description="Monte Carlo experiments for the randomly charged lattice polymer",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiments described by a YAML config")
    p_run.add_argument("config", help="YAML file with 'kind'/'params' or an 'ops' list")
    p_run.add_argument("--seed", type=int, default=None, help="master seed (overrides env and config)")
    p_run.add_argument("--workers", type=int, default=None, help="process pool size; <=1 runs inline")
    p_run.add_argument("--out", default="results", help="output directory for JSONL records")
    p_sum = sub.add_parser("summarize", help="tabulate recorded metrics with pass/fail verdicts")
    p_sum.add_argument("results_dir")
    p_sum.add_argument("--criterion", default=None, help="substring filter on metric or experiment")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_summarize(args)


if __name__ == "__main__":
    sys.exit(main())
