"""Wiener segments, Euler-Maruyama integration, and augmented solves.

A WienerSegment holds the Brownian increments for one inter-observation
interval on a fixed substep grid; a particle's randomness for that interval
is nothing but its segment. `euler_maruyama` integrates one SDE over a
segment; `augmented_solve` integrates under a proposal drift while
co-accumulating the Girsanov log importance weight

    d(log m) = -( |u|^2 / 2 ) dt - u . dW,    sigma * u = mu_prop - mu_prior,

for two SDEs sharing a diagonal diffusion. Drift, diffusion and u are all
evaluated at the left endpoint of each substep (Ito convention), so the
augmented solve with proposal == prior reproduces `euler_maruyama` bit for
bit with log m = 0.

State arrays may carry leading batch axes: integrating a (n_particles, d)
state with (n_substeps, n_particles, d) increments performs the same
elementwise arithmetic as n_particles separate solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, ProposalExplosionError, ValidationError

# Diffusion outputs are clamped below by SIGMA_FLOOR before any division,
# and |u| above U_MAX aborts the solve rather than producing log m = -inf.
SIGMA_FLOOR = 1e-6
U_MAX = 1e4

DriftFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation times in (0, horizon]; t0 = 0 is implicit."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise ValidationError("time grid must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("time grid contains non-finite points")
        if pts[0] <= 0.0 or np.any(np.diff(pts) <= 0.0):
            raise ValidationError("time grid must be strictly increasing and positive")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.size

    def intervals(self) -> np.ndarray:
        """Interval lengths (t_1 - 0, t_2 - t_1, ...); all positive."""
        return np.diff(self.points, prepend=0.0)


def substep_lengths(duration: float, dt: float) -> np.ndarray:
    """Split a duration into ceil(duration/dt) substeps; the last absorbs the remainder."""
    if not (math.isfinite(duration) and duration > 0.0):
        raise ValidationError(f"duration must be finite and positive, got {duration}")
    if not (math.isfinite(dt) and dt > 0.0):
        raise ValidationError(f"dt must be finite and positive, got {dt}")
    n = max(1, math.ceil(duration / dt))
    last = duration - (n - 1) * dt
    if last <= 0.0:  # duration/dt rounded up across an exact multiple
        n -= 1
        last = duration - (n - 1) * dt
    lengths = np.full(n, dt)
    lengths[-1] = last
    return lengths


@dataclass(frozen=True)
class WienerSegment:
    """Brownian increments on the substep grid of one interval.

    increments[k] is distributed N(0, lengths[k] * I_dim) at sampling time.
    Segments are immutable and safe to share between particles after
    resampling.
    """

    duration: float
    dt: float
    lengths: np.ndarray      # (n_substeps,)
    increments: np.ndarray   # (n_substeps, dim)

    @property
    def dim(self) -> int:
        return self.increments.shape[-1]

    @property
    def n_substeps(self) -> int:
        return self.lengths.size


def sample_wiener_segment(duration: float, dt: float, dim: int,
                          rng: np.random.Generator) -> WienerSegment:
    """Sample a WienerSegment; deterministic given the generator state."""
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")
    lengths = substep_lengths(duration, dt)
    incr = rng.standard_normal((lengths.size, dim)) * np.sqrt(lengths)[:, None]
    return WienerSegment(duration=duration, dt=dt, lengths=lengths, increments=incr)


@dataclass(frozen=True)
class SdeFunctions:
    """Drift and diagonal diffusion of one SDE.

    Both callables take (state, t) and must be pure; state may carry leading
    batch axes and the outputs broadcast against it. Diffusion entries are
    clamped to SIGMA_FLOOR by the solvers before any division.
    """

    drift: DriftFn
    diffusion: DriftFn
    dim: int


@dataclass(frozen=True)
class AugmentedResult:
    """Terminal state plus the accumulated log importance weight."""

    terminal_state: np.ndarray
    log_m: np.ndarray | float
    path: Optional[list] = field(default=None, repr=False)


def _first_bad_index(mask: np.ndarray) -> int | None:
    """Index of the first offending particle for a (..., d) violation mask."""
    if mask.ndim <= 1:
        return None
    flat = np.any(mask, axis=-1).reshape(-1)
    return int(np.argmax(flat))


def _integrate(prior_drift: DriftFn, proposal_drift: DriftFn | None,
               diffusion: DriftFn, z0: np.ndarray, t0: float,
               lengths: np.ndarray, increments: np.ndarray,
               sigma_floor: float, u_max: float,
               record_path: bool):
    """Shared substep loop for euler_maruyama and augmented_solve.

    proposal_drift None (or identical to prior_drift) selects the plain
    solve: the state advances under prior_drift and log m stays exactly 0.
    """
    z = np.array(z0, dtype=float, copy=True)
    t = t0
    weighted = proposal_drift is not None and proposal_drift is not prior_drift
    log_m = np.zeros(z.shape[:-1])
    path = [(t, z.copy())] if record_path else None

    for k in range(lengths.size):
        h = lengths[k]
        dw = increments[k]
        sigma = np.maximum(diffusion(z, t), sigma_floor)
        if weighted:
            drift = proposal_drift(z, t)
            with np.errstate(divide="ignore", invalid="ignore"):
                u = (drift - prior_drift(z, t)) / sigma
            bad = np.abs(u) > u_max
            if np.any(bad):
                raise ProposalExplosionError(
                    f"|u| exceeded {u_max:g} at t={t:g}",
                    time=t, particle=_first_bad_index(bad))
            log_m = log_m - (0.5 * np.sum(u * u, axis=-1) * h + np.sum(u * dw, axis=-1))
        else:
            drift = prior_drift(z, t)
        z = z + drift * h + sigma * dw
        t = t + h
        finite = np.isfinite(z)
        if not finite.all():
            raise DivergenceError(
                f"state became non-finite at t={t:g}",
                time=t, particle=_first_bad_index(~finite))
        if record_path:
            path.append((t, z.copy()))

    if weighted and not np.all(np.isfinite(log_m)):
        raise DivergenceError("log importance weight became non-finite",
                              time=t, particle=None)
    return z, (log_m if z.ndim > 1 else float(log_m)), path


def euler_maruyama(sde: SdeFunctions, z0: np.ndarray, t0: float,
                   segment: WienerSegment, *, record_path: bool = False,
                   sigma_floor: float = SIGMA_FLOOR) -> AugmentedResult:
    """Integrate one SDE across a segment; log_m is identically 0."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape[-1] != sde.dim or segment.dim != sde.dim:
        raise ValidationError(
            f"dimension mismatch: state {z0.shape[-1]}, sde {sde.dim}, "
            f"segment {segment.dim}")
    z, log_m, path = _integrate(sde.drift, None, sde.diffusion, z0, t0,
                                segment.lengths, segment.increments,
                                sigma_floor, U_MAX, record_path)
    return AugmentedResult(terminal_state=z, log_m=log_m, path=path)


def augmented_solve(prior: SdeFunctions, posterior: SdeFunctions,
                    z0: np.ndarray, t0: float, segment: WienerSegment, *,
                    record_path: bool = False,
                    sigma_floor: float = SIGMA_FLOOR,
                    u_max: float = U_MAX) -> AugmentedResult:
    """Integrate under the posterior drift, accumulating the Girsanov log weight.

    The prior and posterior must share the identical diffusion function;
    the importance weight between the two path laws is otherwise undefined.
    """
    if posterior.diffusion is not prior.diffusion:
        raise ValidationError(
            "prior and posterior must share the identical diffusion function")
    z0 = np.asarray(z0, dtype=float)
    if z0.shape[-1] != prior.dim or segment.dim != prior.dim:
        raise ValidationError(
            f"dimension mismatch: state {z0.shape[-1]}, sde {prior.dim}, "
            f"segment {segment.dim}")
    z, log_m, path = _integrate(prior.drift, posterior.drift, prior.diffusion,
                                z0, t0, segment.lengths, segment.increments,
                                sigma_floor, u_max, record_path)
    return AugmentedResult(terminal_state=z, log_m=log_m, path=path)
