"""Dataset-level inference tasks: likelihood estimation and one-step prediction.

`estimate_nll` runs the filter over every (sequence, seed) pair and reports
per-observation negative log-likelihoods. `sequential_prediction_eval`
predicts each observation from its prefix and reports L2 error, either with
the particle filter (filter to t_i, extrapolate every particle under the
prior drift, decode, weight-average) or with the posterior-only baseline
(unweighted trajectories that follow the proposal drift through every
interval, including the one being predicted).

Sequences evaluate independently; with threads > 1 the (sequence, seed)
grid is spread over a thread pool. Results land in preassigned slots and
all randomness is stream-addressed, so the report is identical for any
thread count.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import NumericalError, ValidationError
from .filtering import (ResamplePolicy, ess, pf_step, resample_indices,
                        run_filter, _sample_increments)
from .models import LatentSdeModel, ProposalContext
from .processes import Dataset, ObservationSequence
from .sde import SIGMA_FLOOR, U_MAX, TimeGrid, _integrate, substep_lengths

SUMMARY_COLUMNS = ("process", "lambda", "method", "N", "metric_mean",
                   "metric_stderr", "seeds")


@dataclass(frozen=True)
class EvalReport:
    """Aggregate of one task over a dataset.

    per_sequence holds one entry per sequence: its across-seed mean metric,
    or an error string for sequences whose runs failed numerically (they are
    reported, never silently dropped). The aggregate is the plain mean of
    the per-sequence metrics.
    """

    task: str
    method: str
    per_sequence: list[dict]
    aggregate_mean: float
    aggregate_stderr: float
    config: dict

    def to_json_dict(self) -> dict:
        return {"task": self.task, "method": self.method,
                "aggregate_mean": self.aggregate_mean,
                "aggregate_stderr": self.aggregate_stderr,
                "per_sequence": self.per_sequence, "config": self.config}


def _aggregate(task: str, method: str, per_seq_metrics: list[dict],
               config: dict) -> EvalReport:
    ok = [e["metric"] for e in per_seq_metrics if e.get("error") is None]
    if not ok:
        raise NumericalError(f"every sequence failed during {task} evaluation")
    mean = float(np.mean(ok))
    stderr = float(np.std(ok, ddof=1) / math.sqrt(len(ok))) if len(ok) > 1 else 0.0
    config = dict(config)
    config["n_failed_sequences"] = len(per_seq_metrics) - len(ok)
    return EvalReport(task=task, method=method, per_sequence=per_seq_metrics,
                      aggregate_mean=mean, aggregate_stderr=stderr, config=config)


def _run_grid(fn: Callable[[int, int], float], n_sequences: int,
              seeds: list[int], threads: int) -> list[dict]:
    """Evaluate fn(sequence, seed) over the grid, averaging seeds per sequence."""
    results: dict[tuple[int, int], float | str] = {}

    def work(j: int, seed: int):
        try:
            results[(j, seed)] = fn(j, seed)
        except NumericalError as exc:
            results[(j, seed)] = f"{type(exc).__name__}: {exc}"

    pairs = [(j, s) for j in range(n_sequences) for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda p: work(*p), pairs))
    else:
        for j, s in pairs:
            work(j, s)

    per_seq = []
    for j in range(n_sequences):
        vals = [results[(j, s)] for s in seeds]
        errors = [v for v in vals if isinstance(v, str)]
        if errors:
            per_seq.append({"sequence": j, "metric": None, "error": errors[0],
                            "seeds": list(seeds)})
        else:
            per_seq.append({"sequence": j, "metric": float(np.mean(vals)),
                            "error": None, "seeds": list(seeds)})
    return per_seq


def estimate_nll(model: LatentSdeModel, dataset: Dataset, n_particles: int,
                 dt: float, policy: ResamplePolicy, seeds: list[int],
                 threads: int = 1, method: str | None = None) -> EvalReport:
    """Per-observation NLL of every sequence under the model, filter-estimated."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if not seeds:
        raise ValidationError("at least one seed is required")

    def one(j: int, seed: int) -> float:
        result = run_filter(model, dataset.sequences[j], n_particles, dt,
                            policy=policy, seed=seed)
        return result.per_observation_nll

    per_seq = _run_grid(one, len(dataset), seeds, threads)
    label = method or ("pf" if policy.enabled else "sis")
    config = {"task": "nll", "method": label, "n_particles": n_particles,
              "dt": dt, "threshold_fraction": policy.threshold_fraction,
              "scheme": policy.scheme, "resampling": policy.enabled,
              "seeds": list(seeds), "n_sequences": len(dataset),
              "process": dataset.spec.kind, "intensity": dataset.intensity,
              "model": model.kind, "emission_std": model.emission_std}
    return _aggregate("nll", label, per_seq, config)


def _extrapolate_mean(model: LatentSdeModel, latents: np.ndarray,
                      log_weights: np.ndarray, t_start: float, t_end: float,
                      dt: float, seed: int, step_index: int) -> np.ndarray:
    """Prior-drift extrapolation of all particles, decoded and weight-averaged.

    The proposal generator is never consulted here: prediction reintroduces
    the prior dynamics after the last observation.
    """
    n, d = latents.shape
    lengths = substep_lengths(t_end - t_start, dt)
    incr = _sample_increments(seed, rngmod.PREDICT, step_index, n, lengths, d)
    z, _, _ = _integrate(model.prior.drift, None, model.prior.diffusion,
                         latents, t_start, lengths, incr,
                         SIGMA_FLOOR, U_MAX, record_path=False)
    w = np.exp(log_weights - np.max(log_weights))
    w /= w.sum()
    return w @ model.decode(z)


def predict_next(model: LatentSdeModel, prefix_times: np.ndarray,
                 prefix_values: np.ndarray, t_next: float, n_particles: int,
                 dt: float, policy: ResamplePolicy, seed: int = 0) -> np.ndarray:
    """Expected observation at t_next given the prefix, via the particle filter."""
    prefix_times = np.asarray(prefix_times, dtype=float)
    prefix_values = np.asarray(prefix_values, dtype=float)
    if prefix_times.size < 1:
        raise ValidationError("prediction needs at least one observation")
    if t_next <= prefix_times[-1]:
        raise ValidationError("t_next must exceed the last prefix time")
    seq = ObservationSequence(grid=TimeGrid(prefix_times), values=prefix_values,
                              kind=model.kind, seed=seed)
    result = run_filter(model, seq, n_particles, dt, policy=policy, seed=seed)
    return _extrapolate_mean(model, result.latents, result.log_weights,
                             float(prefix_times[-1]), float(t_next), dt, seed,
                             step_index=len(prefix_times) + 1)


def _pf_sequence_prediction_error(model: LatentSdeModel,
                                  seq: ObservationSequence, n_particles: int,
                                  dt: float, policy: ResamplePolicy,
                                  seed: int) -> float:
    """Mean L2 error predicting observations 2..n from their prefixes.

    Runs one incremental filter pass: before assimilating observation i+1,
    the current cloud is extrapolated under the prior to t_{i+1}.
    """
    times = seq.grid.points
    values = seq.values
    n, d = n_particles, model.state_dim
    latents = np.tile(model.z0, (n, 1))
    log_weights = np.full(n, -math.log(n))
    t_prev = 0.0
    errors = []
    for i, (t_i, x_i) in enumerate(zip(times, values), start=1):
        if i >= 2:
            x_hat = _extrapolate_mean(model, latents, log_weights,
                                      t_prev, float(t_i), dt, seed, i)
            errors.append(float(np.linalg.norm(x_hat - x_i)))
        latents, log_weights, _, _, _ = pf_step(
            latents, log_weights, model, t_prev, float(t_i), x_i,
            values[:i - 1], times[:i - 1], dt, i, seed)
        if policy.enabled and ess(log_weights) < policy.threshold_fraction * n:
            stream = rngmod.substream(seed, rngmod.RESAMPLE, i)
            ancestors = resample_indices(log_weights, policy.scheme, stream)
            latents = latents[ancestors]
            log_weights = np.full(n, -math.log(n))
        t_prev = float(t_i)
    return float(np.mean(errors))


def _posterior_sequence_prediction_error(model: LatentSdeModel,
                                         seq: ObservationSequence,
                                         n_particles: int, dt: float,
                                         seed: int) -> float:
    """Posterior-only baseline: unweighted trajectories under the proposal drift.

    Trajectories advance through each interval guided by its end observation;
    the prediction for t_{i+1} propagates them under the proposal drift with
    no upcoming observation available (the generator sees x_next=None) and
    takes the plain average of the decoded states. Girsanov weights are
    ignored throughout.
    """
    times = seq.grid.points
    values = seq.values
    n, d = n_particles, model.state_dim
    latents = np.tile(model.z0, (n, 1))
    t_prev = 0.0
    errors = []
    for i, (t_i, x_i) in enumerate(zip(times, values), start=1):
        lengths = substep_lengths(float(t_i) - t_prev, dt)
        if i >= 2:
            incr = _sample_increments(seed, rngmod.PREDICT, i, n, lengths, d)
            ctx = ProposalContext(t_start=t_prev, t_end=float(t_i), dt=dt,
                                  z_start=latents, x_next=None,
                                  x_past=values[:i - 1], t_past=times[:i - 1])
            drift = model.param_gen(ctx)
            z_pred, _, _ = _integrate(model.prior.drift, drift,
                                      model.prior.diffusion, latents, t_prev,
                                      lengths, incr, SIGMA_FLOOR, U_MAX, False)
            x_hat = np.mean(model.decode(z_pred), axis=0)
            errors.append(float(np.linalg.norm(x_hat - x_i)))
        incr = _sample_increments(seed, rngmod.POSTERIOR, i, n, lengths, d)
        ctx = ProposalContext(t_start=t_prev, t_end=float(t_i), dt=dt,
                              z_start=latents, x_next=x_i,
                              x_past=values[:i - 1], t_past=times[:i - 1])
        drift = model.param_gen(ctx)
        latents, _, _ = _integrate(model.prior.drift, drift,
                                   model.prior.diffusion, latents, t_prev,
                                   lengths, incr, SIGMA_FLOOR, U_MAX, False)
        t_prev = float(t_i)
    return float(np.mean(errors))


def sequential_prediction_eval(model: LatentSdeModel, dataset: Dataset,
                               n_particles: int, dt: float,
                               policy: ResamplePolicy, seeds: list[int],
                               threads: int = 1,
                               method: str = "pf") -> EvalReport:
    """L2 prediction error over a dataset, per-sequence mean over predicted points."""
    if method not in ("pf", "posterior"):
        raise ValidationError(f"unknown prediction method {method!r}")
    if any(len(s) < 2 for s in dataset.sequences):
        raise ValidationError("every sequence needs >= 2 observations for prediction")
    if not seeds:
        raise ValidationError("at least one seed is required")

    def one(j: int, seed: int) -> float:
        seq = dataset.sequences[j]
        if method == "pf":
            return _pf_sequence_prediction_error(model, seq, n_particles, dt,
                                                 policy, seed)
        return _posterior_sequence_prediction_error(model, seq, n_particles,
                                                    dt, seed)

    per_seq = _run_grid(one, len(dataset), seeds, threads)
    config = {"task": "prediction", "method": method, "n_particles": n_particles,
              "dt": dt, "threshold_fraction": policy.threshold_fraction,
              "scheme": policy.scheme,
              "resampling": policy.enabled and method == "pf",
              "seeds": list(seeds), "n_sequences": len(dataset),
              "process": dataset.spec.kind, "intensity": dataset.intensity,
              "model": model.kind, "emission_std": model.emission_std,
              "point_averaging": "mean L2 over predicted points, per sequence"}
    return _aggregate("prediction", method, per_seq, config)


# ---------------------------------------------------------------------------
# report files

def save_report_json(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)


def save_summary_csv(reports: list[EvalReport], path: str | os.PathLike,
                     header_comment: str | None = None) -> None:
    """One summary row per report: process, lambda, method, N, metric, seeds."""
    with open(path, "w", newline="") as fh:
        if header_comment is not None:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for rep in reports:
            cfg = rep.config
            writer.writerow([
                cfg.get("process", ""),
                format(float(cfg.get("intensity", float("nan"))), ".17g"),
                rep.method, cfg.get("n_particles", ""),
                format(rep.aggregate_mean, ".17g"),
                format(rep.aggregate_stderr, ".17g"),
                " ".join(str(s) for s in cfg.get("seeds", [])),
            ])
