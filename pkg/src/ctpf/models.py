"""Latent SDE models: prior drift, shared diffusion, proposal generator, decoder.

A model bundles one prior SDE with a Gaussian decoder and a proposal
generator. The generator is called once per inter-observation interval with
a ProposalContext and returns the proposal drift for that interval; the
proposal shares the prior's diffusion by construction (there is only one
diffusion field), which is what makes the importance weight between the two
path laws well defined.

Two concrete families ship here: oracle models, whose latent process is one
of the benchmark processes itself, and fixed-weight MLP-drift models loaded
from a JSON weights file (smoke-test priors; no training code).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ValidationError
from .processes import ProcessSpec
from .sde import SIGMA_FLOOR, U_MAX, SdeFunctions

# Proposal drift corrections are clipped fractionally below the solver's hard
# bound so a clipped proposal never trips the explosion guard through float
# round-off alone.
_U_CLIP = U_MAX * (1.0 - 1e-9)


@dataclass(frozen=True)
class ProposalContext:
    """Everything a proposal generator may condition on for one interval.

    x_next is the observation at the interval's right endpoint when the
    caller knows it (filtering), and None when it does not (extrapolation
    under a posterior-only sampler). z_start holds the current latent
    states, shape (..., state_dim).
    """

    t_start: float
    t_end: float
    dt: float
    z_start: np.ndarray
    x_next: Optional[np.ndarray]
    x_past: np.ndarray      # (k, obs_dim) observations before t_start
    t_past: np.ndarray      # (k,)


ProposalGen = Callable[[ProposalContext], Callable[[np.ndarray, float], np.ndarray]]


@dataclass(frozen=True)
class LatentSdeModel:
    """Immutable latent-SDE model; safe for shared concurrent reads."""

    state_dim: int
    obs_dim: int
    prior: SdeFunctions
    z0: np.ndarray
    emission_std: float
    decode: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    param_gen: ProposalGen = field(repr=False)
    kind: str = "custom"

    def __post_init__(self):
        if self.emission_std <= 0.0:
            raise ValidationError("emission_std must be positive")
        z0 = np.asarray(self.z0, dtype=float)
        if z0.shape != (self.state_dim,):
            raise ValidationError(f"z0 must have shape ({self.state_dim},)")
        object.__setattr__(self, "z0", z0)

    def with_param_gen(self, param_gen: ProposalGen) -> "LatentSdeModel":
        """Copy of the model with a replaced proposal generator (for instrumentation)."""
        return replace(self, param_gen=param_gen)


def decoder_loglik(model: LatentSdeModel, z_history: list[np.ndarray],
                   x_t: np.ndarray, x_history: np.ndarray | None = None):
    """Log-density of x_t under the model's diagonal Gaussian emission.

    Conditions on the latest latent state only; z_history must be non-empty.
    The latest state may carry leading batch axes, giving one log-density
    per batch row.
    """
    if not len(z_history):
        raise ValidationError("z_history must be non-empty")
    z = np.asarray(z_history[-1], dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(x_t))):
        raise ValidationError("decoder inputs must be finite")
    mean = model.decode(z)
    s2 = model.emission_std * model.emission_std
    dev = x_t - mean
    with np.errstate(over="ignore"):  # far outliers overflow to -inf weight
        out = -0.5 * np.sum(dev * dev / s2 + math.log(2.0 * math.pi * s2),
                            axis=-1)
    return float(out) if out.ndim == 0 else out


def decoder_mean(model: LatentSdeModel, z: np.ndarray) -> np.ndarray:
    """Conditional mean of the observation given the latent state."""
    return model.decode(np.asarray(z, dtype=float))


# ---------------------------------------------------------------------------
# oracle models

def _preimage_pull(spec: ProcessSpec) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """State-space direction from z toward the preimage of a target observation."""
    if spec.kind == "car":
        def pull(target, z):
            out = np.zeros_like(z)
            out[..., 0] = target[0] - z[..., 0]
            return out
        return pull

    def pull(target, z):  # identity observation map
        return target - z
    return pull


def oracle_model(spec: ProcessSpec, emission_std: float = 1e-2,
                 guidance_gain: float = 0.0) -> LatentSdeModel:
    """Model whose latent process is the data process itself.

    guidance_gain = 0 gives the bootstrap proposal (proposal drift equals the
    prior drift, importance weight identically 1). Positive gain adds a
    clamped pull toward the upcoming observation's preimage:

        mu_prop(z, t) = mu(z, t) + sigma(z, t)^2 * gain * pull / (t_end - t + dt)

    so the scaled correction u = (mu_prop - mu)/sigma vanishes with sigma on
    noiseless state components and stays below the solver's hard bound.
    """
    if guidance_gain < 0.0:
        raise ValidationError("guidance_gain must be >= 0")
    prior = spec.sde()
    pull_fn = _preimage_pull(spec)

    def param_gen(ctx: ProposalContext):
        if guidance_gain == 0.0:
            return prior.drift
        if ctx.x_next is not None:
            target = np.asarray(ctx.x_next, dtype=float)
        elif len(ctx.x_past):
            target = np.asarray(ctx.x_past[-1], dtype=float)
        else:
            return prior.drift
        t_end, dt = ctx.t_end, ctx.dt

        def drift(z, t):
            base = prior.drift(z, t)
            sigma = np.maximum(prior.diffusion(z, t), SIGMA_FLOOR)
            u = sigma * (guidance_gain / (t_end - t + dt)) * pull_fn(target, z)
            u = np.clip(u, -_U_CLIP, _U_CLIP)
            return base + sigma * u
        return drift

    return LatentSdeModel(state_dim=spec.state_dim, obs_dim=spec.obs_dim,
                          prior=prior, z0=spec.x0.copy(),
                          emission_std=emission_std, decode=spec.project,
                          param_gen=param_gen, kind=f"oracle:{spec.kind}")


# ---------------------------------------------------------------------------
# MLP-drift models

@dataclass(frozen=True)
class MlpDrift:
    """Plain fully-connected drift network: (z, t) -> drift, tanh hidden layers."""

    widths: tuple[int, ...]
    weights: tuple[np.ndarray, ...]   # (out, in) per layer
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValidationError("an MLP needs at least input and output widths")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[k + 1], self.widths[k]):
                raise ValidationError(f"layer {k} weight shape {w.shape} does not "
                                      f"match widths {self.widths}")
            if b.shape != (self.widths[k + 1],):
                raise ValidationError(f"layer {k} bias shape mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {k} has non-finite parameters")

    @property
    def state_dim(self) -> int:
        return self.widths[-1]


def mlp_forward(drift: MlpDrift, z: np.ndarray, t: float) -> np.ndarray:
    """Evaluate the drift network at (z, t); z may carry leading batch axes.

    The forward pass always runs as one 2-d matmul per layer, so a batched
    call returns bitwise the same rows as one call per row.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != drift.widths[0] - 1:
        raise ValidationError(
            f"state dim {z.shape[-1]} does not match network input "
            f"width {drift.widths[0]} (state + time)")
    shape = z.shape
    flat = z.reshape(-1, shape[-1])
    tcol = np.full((flat.shape[0], 1), float(t))
    h = np.concatenate([flat, tcol], axis=-1)
    last = len(drift.weights) - 1
    for k, (w, b) in enumerate(zip(drift.weights, drift.biases)):
        h = h @ w.T + b
        if k != last:
            h = np.tanh(h)
    return h.reshape(shape[:-1] + (drift.widths[-1],))


def load_mlp_weights(path: str | os.PathLike) -> MlpDrift:
    """Read an MLP weights file: {"widths": [...], "layers": [{"W": ..., "b": ...}]}."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        widths = tuple(int(w) for w in doc["widths"])
        weights = tuple(np.array(layer["W"], dtype=float) for layer in doc["layers"])
        biases = tuple(np.array(layer["b"], dtype=float) for layer in doc["layers"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed MLP weights file {path}: {exc}") from exc
    return MlpDrift(widths=widths, weights=weights, biases=biases)


def save_mlp_weights(drift: MlpDrift, path: str | os.PathLike) -> None:
    doc = {"widths": list(drift.widths),
           "layers": [{"W": w.tolist(), "b": b.tolist()}
                      for w, b in zip(drift.weights, drift.biases)]}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def random_mlp_drift(state_dim: int, hidden: tuple[int, ...],
                     rng: np.random.Generator, scale: float = 0.5) -> MlpDrift:
    """Small randomly initialized drift network (smoke-test prior only)."""
    widths = (state_dim + 1,) + tuple(hidden) + (state_dim,)
    weights = tuple(scale * rng.standard_normal((widths[k + 1], widths[k]))
                    for k in range(len(widths) - 1))
    biases = tuple(np.zeros(widths[k + 1]) for k in range(len(widths) - 1))
    return MlpDrift(widths=widths, weights=weights, biases=biases)


def mlp_model(drift: MlpDrift, obs_dim: int | None = None,
              emission_std: float = 0.1, diffusion_scale: float = 0.1,
              z0: np.ndarray | None = None) -> LatentSdeModel:
    """Bootstrap-proposal model with an MLP prior drift and constant diffusion.

    Observations are the leading obs_dim state components.
    """
    d = drift.state_dim
    obs_dim = d if obs_dim is None else obs_dim
    if not 1 <= obs_dim <= d:
        raise ValidationError(f"obs_dim must be in [1, {d}]")
    z0 = np.zeros(d) if z0 is None else np.asarray(z0, dtype=float)

    def prior_drift(z, t):
        return mlp_forward(drift, z, t)

    def diffusion(z, t):
        return np.full_like(z, diffusion_scale)

    prior = SdeFunctions(drift=prior_drift, diffusion=diffusion, dim=d)
    return LatentSdeModel(state_dim=d, obs_dim=obs_dim, prior=prior, z0=z0,
                          emission_std=emission_std,
                          decode=lambda z: z[..., :obs_dim],
                          param_gen=lambda ctx: prior.drift,
                          kind="mlp")
