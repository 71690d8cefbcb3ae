"""Benchmark processes: simulators, observation grids, and analytic oracles.

Four ground-truth SDEs are built in:

  gbm   scalar geometric Brownian motion, dX = 0.2 X dt + 0.1 X dW, X0 = 1
  lsde  scalar linear SDE, dX = (0.5 sin(t) X + 0.5 cos(t)) dt
        + 0.2/(1+exp(-t)) dW, X0 = 0
  car   continuous AR(4): dY = A Y dt + e dW on R^4, observed X = Y[0]
  slc   stochastic Lorenz system on R^3 with additive noise (0.1, 0.28, 0.3)

Observation times come from a homogeneous Poisson process on (0, horizon].
GBM has an exact lognormal transition density; LSDE and CAR have Gaussian
transitions whose moments are integrated here from their moment ODEs; the
Lorenz system has no closed form.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .errors import ValidationError
from .sde import SdeFunctions, TimeGrid, substep_lengths

# Substep block size for dense simulation. Increments are drawn per sequence
# in blocks of this many substeps, so batched and one-sequence simulation
# consume each sequence's stream identically.
_SIM_CHUNK = 8192

_CAR_A = np.array([
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
    [0.002, 0.005, -0.003, -0.002],
])
_CAR_E = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ProcessSpec:
    """One benchmark SDE with its parameters and observation map."""

    kind: str
    state_dim: int
    obs_dim: int
    horizon: float
    x0: np.ndarray
    params: dict
    drift: Callable[[np.ndarray, float], np.ndarray] = field(repr=False)
    diffusion: Callable[[np.ndarray, float], np.ndarray] = field(repr=False)
    project: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def sde(self) -> SdeFunctions:
        return SdeFunctions(drift=self.drift, diffusion=self.diffusion,
                            dim=self.state_dim)


def gbm_process(mu: float = 0.2, sigma: float = 0.1, x0: float = 1.0,
                horizon: float = 30.0) -> ProcessSpec:
    def drift(z, t):
        return mu * z

    def diffusion(z, t):
        return sigma * z

    return ProcessSpec(kind="gbm", state_dim=1, obs_dim=1, horizon=horizon,
                       x0=np.array([x0]), params={"mu": mu, "sigma": sigma, "x0": x0},
                       drift=drift, diffusion=diffusion, project=lambda z: z)


def lsde_process(x0: float = 0.0, horizon: float = 30.0) -> ProcessSpec:
    def drift(z, t):
        return 0.5 * math.sin(t) * z + 0.5 * math.cos(t)

    def diffusion(z, t):
        s = 0.2 / (1.0 + math.exp(-t))
        return np.full_like(z, s)

    return ProcessSpec(kind="lsde", state_dim=1, obs_dim=1, horizon=horizon,
                       x0=np.array([x0]), params={"x0": x0},
                       drift=drift, diffusion=diffusion, project=lambda z: z)


def car_process(horizon: float = 30.0) -> ProcessSpec:
    a = _CAR_A

    def drift(z, t):
        return z @ a.T

    def diffusion(z, t):
        return np.broadcast_to(_CAR_E, z.shape)

    return ProcessSpec(kind="car", state_dim=4, obs_dim=1, horizon=horizon,
                       x0=np.zeros(4),
                       params={"a_row": _CAR_A[3].tolist(), "y0": [0.0] * 4},
                       drift=drift, diffusion=diffusion,
                       project=lambda z: z[..., :1])


def slc_process(horizon: float = 2.0) -> ProcessSpec:
    alpha = np.array([0.1, 0.28, 0.3])

    def drift(z, t):
        x, y, w = z[..., 0], z[..., 1], z[..., 2]
        return np.stack([10.0 * (y - x),
                         x * (28.0 - w) - y,
                         x * y - (8.0 / 3.0) * w], axis=-1)

    def diffusion(z, t):
        return np.broadcast_to(alpha, z.shape)

    return ProcessSpec(kind="slc", state_dim=3, obs_dim=3, horizon=horizon,
                       x0=np.array([1.0, 1.0, 1.0]),
                       params={"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0,
                               "noise": alpha.tolist(), "x0": [1.0, 1.0, 1.0]},
                       drift=drift, diffusion=diffusion, project=lambda z: z)


_FACTORIES = {"gbm": gbm_process, "lsde": lsde_process, "car": car_process,
              "slc": slc_process}


def process_spec(kind: str, **overrides) -> ProcessSpec:
    try:
        factory = _FACTORIES[kind]
    except KeyError:
        raise ValidationError(
            f"unknown process kind {kind!r}; expected one of {sorted(_FACTORIES)}")
    return factory(**overrides)


@dataclass(frozen=True)
class ObservationSequence:
    """Observed values on one Poisson time grid."""

    grid: TimeGrid
    values: np.ndarray   # (n_obs, obs_dim)
    kind: str
    seed: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] != len(self.grid):
            raise ValidationError("values must be (n_obs, obs_dim) matching the grid")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("observation values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.grid)


def sample_observation_times(intensity: float, horizon: float,
                             rng: np.random.Generator) -> TimeGrid:
    """Poisson observation grid: i.i.d. Exponential(intensity) gaps up to horizon.

    An empty draw is rejected and resampled, so the grid always has at
    least one point.
    """
    if not (intensity > 0.0 and math.isfinite(intensity)):
        raise ValidationError(f"intensity must be positive, got {intensity}")
    if not (horizon > 0.0 and math.isfinite(horizon)):
        raise ValidationError(f"horizon must be positive, got {horizon}")
    while True:
        points = []
        t = rng.exponential(1.0 / intensity)
        while t <= horizon:
            points.append(t)
            t += rng.exponential(1.0 / intensity)
        if points:
            return TimeGrid(np.array(points))


def _readout_indices(grid: TimeGrid, dt: float, n_dense: int) -> np.ndarray:
    """Nearest dense-lattice index for each grid time."""
    idx = np.rint(grid.points / dt).astype(int)
    return np.minimum(idx, n_dense)


def _simulate_block_loop(spec: ProcessSpec, index_lists: list[np.ndarray],
                         dt: float,
                         streams: list[np.random.Generator]) -> list[np.ndarray]:
    """Dense Euler-Maruyama over [0, horizon] for several sequences at once.

    Increments are drawn per sequence in fixed blocks so each sequence's
    stream consumption is independent of how many sequences run together.
    Returns per-sequence observation arrays read out at the requested dense
    indices (index k = state after k substeps).
    """
    from .errors import DivergenceError
    from .sde import SIGMA_FLOOR

    n_seq = len(index_lists)
    d = spec.state_dim
    lengths = substep_lengths(spec.horizon, dt)
    n_dense = lengths.size

    # (dense index, sequence, observation slot), ordered by dense index
    readouts = sorted((int(k), j, slot)
                      for j, idx in enumerate(index_lists)
                      for slot, k in enumerate(idx))
    values = [np.empty((len(idx), spec.obs_dim)) for idx in index_lists]

    z = np.tile(spec.x0, (n_seq, 1)).astype(float)
    t = 0.0
    next_read = 0
    while next_read < len(readouts) and readouts[next_read][0] == 0:
        _, j, slot = readouts[next_read]
        values[j][slot] = spec.project(z[j])
        next_read += 1

    for start in range(0, n_dense, _SIM_CHUNK):
        stop = min(start + _SIM_CHUNK, n_dense)
        block = np.empty((stop - start, n_seq, d))
        for j, stream in enumerate(streams):
            block[:, j, :] = stream.standard_normal((stop - start, d))
        block *= np.sqrt(lengths[start:stop])[:, None, None]
        for k in range(start, stop):
            h = lengths[k]
            sigma = np.maximum(spec.diffusion(z, t), SIGMA_FLOOR)
            z = z + spec.drift(z, t) * h + sigma * block[k - start]
            t = t + h
            if not np.all(np.isfinite(z)):
                bad = int(np.argmax(~np.all(np.isfinite(z), axis=-1)))
                raise DivergenceError(
                    f"simulation diverged at t={t:g} (sequence {bad})",
                    time=t, particle=bad)
            while next_read < len(readouts) and readouts[next_read][0] == k + 1:
                _, j, slot = readouts[next_read]
                values[j][slot] = spec.project(z[j])
                next_read += 1
    return values


def simulate(spec: ProcessSpec, grid: TimeGrid, dt: float,
             rng: np.random.Generator, seed: int = 0) -> ObservationSequence:
    """Simulate one sequence: dense Euler-Maruyama path read out at grid points."""
    if grid.points[-1] > spec.horizon + 1e-12:
        raise ValidationError("grid extends beyond the process horizon")
    if dt > np.min(grid.intervals()) + 1e-12:
        raise ValidationError("dt must not exceed the smallest grid interval")
    n_dense = substep_lengths(spec.horizon, dt).size
    idx = _readout_indices(grid, dt, n_dense)
    values = _simulate_block_loop(spec, [idx], dt, [rng])[0]
    return ObservationSequence(grid=grid, values=values, kind=spec.kind, seed=seed)


@dataclass(frozen=True)
class Dataset:
    """A set of sequences simulated from one process at one intensity."""

    spec: ProcessSpec
    intensity: float
    dt_sim: float
    seed: int
    sequences: list[ObservationSequence]

    def __len__(self) -> int:
        return len(self.sequences)


def _snap_grid(grid: TimeGrid, dt: float, horizon: float,
               n_dense: int) -> tuple[TimeGrid, np.ndarray]:
    """Snap observation times onto the dense lattice; drop collisions.

    The recorded times then coincide exactly with integration substeps, so a
    stored sequence is an exact lattice readout of its Euler path. Points
    snapping to index 0 or onto an already-used index are dropped (possible
    only when a Poisson gap undershoots dt).
    """
    idx = _readout_indices(grid, dt, n_dense)
    keep: list[int] = []
    for k in idx:
        if k > 0 and (not keep or k > keep[-1]):
            keep.append(int(k))
    if not keep:
        raise ValidationError(
            "all observation times collapsed onto the lattice origin; "
            "dt is too coarse for this intensity")
    kept = np.array(keep)
    times = np.where(kept == n_dense, horizon, kept * dt)
    return TimeGrid(times), kept


def simulate_dataset(spec: ProcessSpec, intensity: float, n_sequences: int,
                     dt: float, seed: int) -> Dataset:
    """Simulate n_sequences sequences with per-sequence substreams of `seed`.

    Observation times are Poisson draws snapped onto the dense integration
    lattice (resolution dt), so every stored value sits exactly at its
    stored time on the simulated path.
    """
    if n_sequences < 1:
        raise ValidationError(f"n_sequences must be >= 1, got {n_sequences}")
    n_dense = substep_lengths(spec.horizon, dt).size
    grids, index_lists = [], []
    for j in range(n_sequences):
        raw = sample_observation_times(intensity, spec.horizon,
                                       rngmod.substream(seed, rngmod.TIMES, j))
        grid, idx = _snap_grid(raw, dt, spec.horizon, n_dense)
        grids.append(grid)
        index_lists.append(idx)
    streams = [rngmod.substream(seed, rngmod.PATH, j) for j in range(n_sequences)]
    all_values = _simulate_block_loop(spec, index_lists, dt, streams)
    sequences = [ObservationSequence(grid=g, values=v, kind=spec.kind, seed=seed)
                 for g, v in zip(grids, all_values)]
    return Dataset(spec=spec, intensity=intensity, dt_sim=dt, seed=seed,
                   sequences=sequences)


# ---------------------------------------------------------------------------
# dataset files

def dataset_to_json_dict(dataset: Dataset) -> dict:
    params = dict(dataset.spec.params)
    params.update({"intensity": dataset.intensity, "horizon": dataset.spec.horizon,
                   "dt_sim": dataset.dt_sim})
    return {
        "process": dataset.spec.kind,
        "params": params,
        "seed": dataset.seed,
        "sequences": [
            {"times": seq.grid.points.tolist(), "values": seq.values.tolist()}
            for seq in dataset.sequences
        ],
    }


def dataset_from_json_dict(doc: dict) -> Dataset:
    kind = doc["process"]
    params = dict(doc["params"])
    intensity = params.pop("intensity")
    horizon = params.pop("horizon")
    dt_sim = params.pop("dt_sim")
    overrides = {}
    if kind == "gbm":
        overrides = {"mu": params["mu"], "sigma": params["sigma"], "x0": params["x0"]}
    elif kind == "lsde":
        overrides = {"x0": params["x0"]}
    spec = process_spec(kind, horizon=horizon, **overrides)
    seed = doc["seed"]
    sequences = [
        ObservationSequence(grid=TimeGrid(np.array(s["times"])),
                            values=np.array(s["values"], dtype=float),
                            kind=kind, seed=seed)
        for s in doc["sequences"]
    ]
    return Dataset(spec=spec, intensity=intensity, dt_sim=dt_sim, seed=seed,
                   sequences=sequences)


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(dataset_to_json_dict(dataset), fh)


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path) as fh:
        return dataset_from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# analytic oracles

def gbm_exact_transition_logpdf(x_prev: float, x_next: float, delta_t: float,
                                mu: float, sigma: float) -> float:
    """Exact lognormal transition log-density of geometric Brownian motion.

    log X_next | X_prev is N(log x_prev + (mu - sigma^2/2) dt, sigma^2 dt);
    the returned density is for X_next itself (Jacobian included).
    """
    if x_prev <= 0.0 or x_next <= 0.0:
        raise ValidationError("GBM states must be positive")
    if delta_t <= 0.0:
        raise ValidationError("delta_t must be positive")
    if sigma <= 0.0:
        raise ValidationError("sigma must be positive")
    var = sigma * sigma * delta_t
    dev = math.log(x_next) - math.log(x_prev) - (mu - 0.5 * sigma * sigma) * delta_t
    return -0.5 * math.log(2.0 * math.pi * var) - dev * dev / (2.0 * var) \
        - math.log(x_next)


def gbm_exact_sequence_nll(seq: ObservationSequence, mu: float, sigma: float,
                           x0: float) -> float:
    """Per-observation exact negative log-likelihood of one GBM sequence.

    Transitions chain from (t=0, x0) through the observations; the total is
    divided by the number of observations.
    """
    times = seq.grid.points
    vals = seq.values[:, 0]
    total = 0.0
    t_prev, x_prev = 0.0, x0
    for t, x in zip(times, vals):
        total += gbm_exact_transition_logpdf(x_prev, x, t - t_prev, mu, sigma)
        t_prev, x_prev = t, x
    return -total / len(times)


def gbm_dataset_exact_nll(dataset: Dataset) -> tuple[float, float, np.ndarray]:
    """Mean, standard error, and per-sequence exact NLLs for a GBM dataset."""
    if dataset.spec.kind != "gbm":
        raise ValidationError("exact NLL oracle only exists for GBM datasets")
    p = dataset.spec.params
    per_seq = np.array([gbm_exact_sequence_nll(s, p["mu"], p["sigma"], p["x0"])
                        for s in dataset.sequences])
    return float(per_seq.mean()), float(per_seq.std(ddof=1) / math.sqrt(len(per_seq))), per_seq


def _lsde_a(t: float) -> float:
    return 0.5 * math.sin(t)


def _lsde_b(t: float) -> float:
    return 0.5 * math.cos(t)


def _lsde_s(t: float) -> float:
    return 0.2 / (1.0 + math.exp(-t))


def lsde_exact_moments(x0: float, t0: float, t1: float, quad_dt: float = 1e-4,
                       a: Callable[[float], float] = _lsde_a,
                       b: Callable[[float], float] = _lsde_b,
                       s: Callable[[float], float] = _lsde_s) -> tuple[float, float]:
    """Mean and variance of a scalar linear SDE at t1 started from x0 at t0.

    Integrates m' = a(t) m + b(t) and v' = 2 a(t) v + s(t)^2 with explicit
    Euler steps of size quad_dt (left endpoint). Defaults are the built-in
    coefficients a(t) = 0.5 sin t, b(t) = 0.5 cos t, s(t) = 0.2/(1+e^-t).
    """
    if t1 <= t0:
        raise ValidationError("t1 must exceed t0")
    lengths = substep_lengths(t1 - t0, quad_dt)
    m, v = x0, 0.0
    t = t0
    for h in lengths:
        at, bt, st = a(t), b(t), s(t)
        m, v = m + (at * m + bt) * h, v + (2.0 * at * v + st * st) * h
        t += h
    return m, v


def car4_exact_moments(y0: np.ndarray, delta_t: float, quad_dt: float = 1e-4,
                       a_matrix: np.ndarray | None = None,
                       e_vector: np.ndarray | None = None,
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance of the CAR(4) state after delta_t.

    Euler-integrates m' = A m and the Lyapunov equation
    P' = A P + P A^T + e e^T from P(0) = 0.
    """
    if delta_t <= 0.0:
        raise ValidationError("delta_t must be positive")
    a = _CAR_A if a_matrix is None else np.asarray(a_matrix, dtype=float)
    e = _CAR_E if e_vector is None else np.asarray(e_vector, dtype=float)
    ee = np.outer(e, e)
    lengths = substep_lengths(delta_t, quad_dt)
    m = np.asarray(y0, dtype=float).copy()
    p = np.zeros((4, 4))
    for h in lengths:
        m = m + (a @ m) * h
        p = p + (a @ p + p @ a.T + ee) * h
    return m, 0.5 * (p + p.T)
