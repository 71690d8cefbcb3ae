"""Particle filtering over inter-observation intervals.

One filter step per observation: every particle gets a fresh Wiener segment
for the interval, is integrated under the proposal drift while accumulating
its Girsanov log weight, and is reweighted by

    log w~_j = log w_j + decoder_loglik_j + log m_j .

With the incoming weights normalized, logsumexp(log w~) is the step's
incremental log-likelihood contribution; weights are then renormalized and,
if the effective sample size has dropped below the policy threshold,
resampled (which resets them to 1/N and contributes no likelihood term).

Randomness is addressed, not threaded: propagation at observation step i,
particle j always draws from substream(seed, PROPAGATE, i, j), and
resampling from substream(seed, RESAMPLE, i). Disabling resampling
therefore changes no propagation draw, which makes sequential importance
sampling (`run_sis`) bit-identical to `run_filter` with resampling off.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .errors import DegeneracyError, ValidationError
from .models import LatentSdeModel, ProposalContext, decoder_loglik
from .processes import ObservationSequence
from .sde import SIGMA_FLOOR, U_MAX, SdeFunctions, WienerSegment, _integrate, substep_lengths

GENEALOGY_COLUMNS = ("step", "t_i", "particle_id", "ancestor_id", "log_weight",
                     "ess", "resampled")


@dataclass(frozen=True)
class ResamplePolicy:
    """Resample when ESS < threshold_fraction * N (if enabled)."""

    threshold_fraction: float = 0.5
    scheme: str = "systematic"
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold_fraction <= 1.0:
            raise ValidationError("threshold_fraction must be in (0, 1]")
        if self.scheme not in ("systematic", "multinomial"):
            raise ValidationError(f"unknown resampling scheme {self.scheme!r}")


NO_RESAMPLING = ResamplePolicy(enabled=False)


@dataclass(frozen=True)
class Particle:
    """Per-particle view of the filter state after a run."""

    latent_state: np.ndarray
    log_weight: float
    lineage: int
    segments: Optional[tuple[WienerSegment, ...]] = None


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: float
    incremental_log_lik: float
    ess_before: float
    resampled: bool


@dataclass
class FilterResult:
    """Output of one filter run."""

    total_log_likelihood: float
    steps: list[StepRecord]
    latents: np.ndarray          # (N, d) final latent states
    log_weights: np.ndarray      # (N,) final normalized log weights
    lineages: np.ndarray         # (N,) ancestor index used at the last step
    seed: int
    n_particles: int
    # stream/draw accounting, part of the determinism contract
    streams_opened: int = 0
    values_drawn: int = 0
    # populated when track_history is set
    ancestry: Optional[np.ndarray] = None          # (n_steps, N) ints
    weight_history: Optional[np.ndarray] = None    # (n_steps, N) post-update log w
    final_weight_history: Optional[np.ndarray] = None  # (n_steps, N) post-resample
    segment_log: Optional[list] = None             # per-particle segment tuples

    @property
    def n_observations(self) -> int:
        return len(self.steps)

    @property
    def per_observation_nll(self) -> float:
        return -self.total_log_likelihood / self.n_observations

    @property
    def ess_trace(self) -> np.ndarray:
        return np.array([s.ess_before for s in self.steps])

    def particles(self) -> list[Particle]:
        segs = self.segment_log
        return [Particle(latent_state=self.latents[j].copy(),
                         log_weight=float(self.log_weights[j]),
                         lineage=int(self.lineages[j]),
                         segments=None if segs is None else segs[j])
                for j in range(self.n_particles)]


def ess(log_weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w^2) of normalized weights, in log domain."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0 or not np.any(lw > -np.inf):
        raise DegeneracyError("all log-weights are -inf")
    if np.any(np.isnan(lw)):
        raise DegeneracyError("log-weights contain NaN")
    norm = logsumexp(lw)
    return float(np.exp(2.0 * norm - logsumexp(2.0 * lw)))


def resample_indices(log_weights: np.ndarray, scheme: str,
                     rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices drawn from the categorical given by the weights.

    systematic: one uniform offset, stratified positions (low variance);
    under exactly uniform weights every particle is selected exactly once.
    multinomial: N i.i.d. categorical draws.
    """
    lw = np.asarray(log_weights, dtype=float)
    n = lw.size
    if not np.any(lw > -np.inf):
        raise DegeneracyError("cannot resample fully degenerate weights")
    w = np.exp(lw - logsumexp(lw))
    cum = np.cumsum(w)
    cum[-1] = 1.0  # guard against float shortfall in the last cell
    if scheme == "systematic":
        positions = (rng.random() + np.arange(n)) / n
    elif scheme == "multinomial":
        positions = rng.random(n)
    else:
        raise ValidationError(f"unknown resampling scheme {scheme!r}")
    idx = np.searchsorted(cum, positions, side="left")
    return np.minimum(idx, n - 1)


def resample(particles: list[Particle], scheme: str,
             rng: np.random.Generator) -> list[Particle]:
    """Resample a particle list; output weights are all 1/N."""
    lw = np.array([p.log_weight for p in particles])
    idx = resample_indices(lw, scheme, rng)
    log_uniform = -math.log(len(particles))
    return [Particle(latent_state=particles[a].latent_state,
                     log_weight=log_uniform, lineage=int(a),
                     segments=particles[a].segments)
            for a in idx]


def _sample_increments(seed: int, role: int, step: int, n_particles: int,
                       lengths: np.ndarray, dim: int) -> np.ndarray:
    """Stack per-particle Wiener increments, (n_substeps, N, dim).

    Particle j's slice equals sample_wiener_segment(duration, dt, dim,
    substream(seed, role, step, j)).increments bit for bit.
    """
    out = np.empty((lengths.size, n_particles, dim))
    for j in range(n_particles):
        stream = rngmod.substream(seed, role, step, j)
        out[:, j, :] = stream.standard_normal((lengths.size, dim))
    out *= np.sqrt(lengths)[:, None, None]
    return out


def pf_step(latents: np.ndarray, log_weights: np.ndarray,
            model: LatentSdeModel, t_start: float, t_end: float,
            x_next: np.ndarray, x_past: np.ndarray, t_past: np.ndarray,
            dt: float, step_index: int, seed: int, *,
            increments: np.ndarray | None = None):
    """Advance all particles across one interval and reweight by x_next.

    Incoming log_weights must be normalized. Returns
    (new_latents, new_log_weights, incremental_log_lik, log_m, increments).
    `increments` may be supplied explicitly (hand-built segments in tests);
    by default they are drawn from the (seed, PROPAGATE, step, particle)
    streams.
    """
    n, d = latents.shape
    duration = t_end - t_start
    lengths = substep_lengths(duration, dt)
    if increments is None:
        increments = _sample_increments(seed, rngmod.PROPAGATE, step_index, n,
                                        lengths, d)
    ctx = ProposalContext(t_start=t_start, t_end=t_end, dt=dt, z_start=latents,
                          x_next=x_next, x_past=x_past, t_past=t_past)
    proposal_drift = model.param_gen(ctx)
    try:
        new_latents, log_m, _ = _integrate(
            model.prior.drift, proposal_drift, model.prior.diffusion,
            latents, t_start, lengths, increments,
            SIGMA_FLOOR, U_MAX, record_path=False)
    except Exception as exc:
        idx = getattr(exc, "particle", None)
        if idx is not None:
            exc.args = (f"{exc.args[0]} (particle {idx}, step {step_index})",)
        raise
    if np.isscalar(log_m) or np.ndim(log_m) == 0:
        log_m = np.full(n, float(log_m))
    loglik = decoder_loglik(model, [new_latents], x_next)
    log_w_tilde = log_weights + loglik + log_m
    incremental = float(logsumexp(log_w_tilde))
    if not math.isfinite(incremental):
        raise DegeneracyError(
            f"all particle weights vanished at step {step_index} (t={t_end:g})")
    new_log_weights = log_w_tilde - incremental
    return new_latents, new_log_weights, incremental, log_m, increments


def run_filter(model: LatentSdeModel, observations: ObservationSequence,
               n_particles: int, dt: float,
               policy: ResamplePolicy = ResamplePolicy(),
               seed: int = 0, *, track_history: bool = False,
               store_segments: bool = False) -> FilterResult:
    """Filter a full observation sequence (Algorithm: update, normalize, resample).

    The incremental log-likelihood of each step is recorded before any
    resampling; the total is their sum.
    """
    if n_particles < 1:
        raise ValidationError("n_particles must be >= 1")
    if len(observations) == 0:
        raise ValidationError("observation sequence is empty")
    grid = observations.grid
    values = observations.values
    n, d = n_particles, model.state_dim

    latents = np.tile(model.z0, (n, 1))
    log_weights = np.full(n, -math.log(n))
    lineages = np.arange(n)
    histories: list[tuple[WienerSegment, ...]] | None = \
        [() for _ in range(n)] if store_segments else None

    total = 0.0
    t_prev = 0.0
    steps: list[StepRecord] = []
    ancestry_rows, updated_rows, final_rows = [], [], []
    streams_opened = 0
    values_drawn = 0

    for i, (t_i, x_i) in enumerate(zip(grid.points, values), start=1):
        duration = t_i - t_prev
        lengths = substep_lengths(duration, dt)
        latents, log_weights, incremental, _, increments = pf_step(
            latents, log_weights, model, t_prev, t_i, x_i,
            values[:i - 1], grid.points[:i - 1], dt, i, seed)
        streams_opened += n
        values_drawn += n * lengths.size * d
        total += incremental
        ess_before = ess(log_weights)
        if track_history:
            updated_rows.append(log_weights.copy())

        if store_segments:
            segs = [WienerSegment(duration=duration, dt=dt, lengths=lengths,
                                  increments=increments[:, j, :])
                    for j in range(n)]

        resampled = policy.enabled and ess_before < policy.threshold_fraction * n
        if resampled:
            r_stream = rngmod.substream(seed, rngmod.RESAMPLE, i)
            ancestors = resample_indices(log_weights, policy.scheme, r_stream)
            streams_opened += 1
            values_drawn += n if policy.scheme == "multinomial" else 1
            latents = latents[ancestors]
            log_weights = np.full(n, -math.log(n))
        else:
            ancestors = np.arange(n)

        if store_segments:
            histories = [histories[a] + (segs[a],) for a in ancestors]
        lineages = ancestors
        steps.append(StepRecord(step=i, t=float(t_i),
                                incremental_log_lik=incremental,
                                ess_before=ess_before, resampled=bool(resampled)))
        if track_history:
            ancestry_rows.append(ancestors.copy())
            final_rows.append(log_weights.copy())
        t_prev = t_i

    return FilterResult(
        total_log_likelihood=total, steps=steps, latents=latents,
        log_weights=log_weights, lineages=lineages, seed=seed,
        n_particles=n, streams_opened=streams_opened, values_drawn=values_drawn,
        ancestry=np.array(ancestry_rows) if track_history else None,
        weight_history=np.array(updated_rows) if track_history else None,
        final_weight_history=np.array(final_rows) if track_history else None,
        segment_log=histories)


def run_sis(model: LatentSdeModel, observations: ObservationSequence,
            n_particles: int, dt: float, seed: int = 0, *,
            track_history: bool = False,
            store_segments: bool = False) -> FilterResult:
    """Sequential importance sampling: the filter with resampling disabled.

    The total equals logsumexp over particles of their accumulated
    log(p * m) path sums minus log N, factored per step.
    """
    return run_filter(model, observations, n_particles, dt,
                      policy=NO_RESAMPLING, seed=seed,
                      track_history=track_history, store_segments=store_segments)


def export_genealogy(result: FilterResult, path: str | os.PathLike,
                     header_comment: str | None = None) -> None:
    """Write the per-step particle/weight/ancestry table behind weight plots.

    Requires a result produced with track_history=True. Floats carry 17
    significant digits so the table round-trips bit-exactly.
    """
    if result.ancestry is None:
        raise ValidationError("genealogy export needs a run with track_history=True")
    with open(path, "w", newline="") as fh:
        if header_comment is not None:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(GENEALOGY_COLUMNS)
        for k, rec in enumerate(result.steps):
            for j in range(result.n_particles):
                writer.writerow([
                    rec.step, format(rec.t, ".17g"), j,
                    int(result.ancestry[k, j]),
                    format(result.final_weight_history[k, j], ".17g"),
                    format(rec.ess_before, ".17g"),
                    str(rec.resampled).lower(),
                ])
