"""Command-line front end: simulate | loglik | predict | diagnose | selftest.

Every run resolves its full configuration (defaults included), embeds it in
the headers of everything it writes, and derives all randomness from the
configured seed, so any output can be regenerated from its header alone.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import functools
import json
import math
import os
import sys

import click
import numpy as np

from . import rng as rngmod
from .errors import NumericalError, ValidationError
from .filtering import (ResamplePolicy, ess, export_genealogy, run_filter,
                        run_sis)
from .models import LatentSdeModel, load_mlp_weights, mlp_model, oracle_model
from .processes import (Dataset, dataset_to_json_dict, load_dataset,
                        process_spec, simulate_dataset)
from .sde import (SIGMA_FLOOR, SdeFunctions, augmented_solve,
                  sample_wiener_segment)
from .tasks import (EvalReport, estimate_nll, save_summary_csv,
                    sequential_prediction_eval)

_DEFAULT_HORIZONS = {"gbm": 30.0, "lsde": 30.0, "car": 30.0, "slc": 2.0}


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(3)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(4)
    return wrapper


def _resolve_config(ctx: click.Context, config_path: str | None) -> dict:
    """Final parameter values: defaults < config file < explicit flags."""
    params = {k: v for k, v in ctx.params.items() if k != "config"}
    if config_path:
        try:
            with open(config_path) as fh:
                file_values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}")
        if not isinstance(file_values, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = sorted(set(file_values) - set(params))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        from click.core import ParameterSource
        for key, value in file_values.items():
            if ctx.get_parameter_source(key) != ParameterSource.COMMANDLINE:
                params[key] = value
    return params


def _resolve_threads(value: int | None) -> int:
    if value is None:
        value = int(os.environ.get("CTPF_THREADS", "1"))
    if value < 1:
        raise ValidationError(f"threads must be >= 1, got {value}")
    return value


def _build_model(dataset: Dataset, model_name: str, emission_std: float,
                 guidance_gain: float) -> LatentSdeModel:
    if model_name == "oracle":
        return oracle_model(dataset.spec, emission_std=emission_std,
                            guidance_gain=guidance_gain)
    if model_name.startswith("mlp:"):
        drift = load_mlp_weights(model_name[len("mlp:"):])
        if drift.state_dim < dataset.spec.obs_dim:
            raise ValidationError(
                f"MLP state dim {drift.state_dim} is smaller than the "
                f"observation dim {dataset.spec.obs_dim}")
        return mlp_model(drift, obs_dim=dataset.spec.obs_dim,
                         emission_std=emission_std)
    raise ValidationError(
        f"unknown model {model_name!r}; expected 'oracle' or 'mlp:<weights-path>'")


def _config_header(resolved: dict, command: str) -> str:
    doc = {"command": command}
    doc.update(resolved)
    return json.dumps(doc, sort_keys=True)


def _write_report(report: EvalReport, resolved: dict, command: str,
                  path: str) -> None:
    doc = report.to_json_dict()
    doc["config"] = dict(doc["config"])
    doc["config"]["cli"] = {"command": command, **resolved}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def _seeds(seed: int, seed_count: int) -> list[int]:
    if seed_count < 1:
        raise ValidationError(f"seed-count must be >= 1, got {seed_count}")
    return list(range(seed, seed + seed_count))


@click.group()
def main():
    """Continuous-time particle filtering for latent SDEs."""


# ---------------------------------------------------------------------------
# simulate

@main.command("simulate")
@click.option("--process", "process_kind", default="gbm", show_default=True,
              type=click.Choice(["gbm", "lsde", "car", "slc"]))
@click.option("--lambda", "intensity", default=2.0, show_default=True,
              help="Poisson observation intensity.")
@click.option("--horizon", default=None, type=float,
              help="Time horizon [default: 30, or 2 for slc].")
@click.option("--sequences", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--dt-sim", default=1e-4, show_default=True,
              help="Euler step of the ground-truth simulation.")
@click.option("--full-fidelity", is_flag=True, default=False,
              help="Use the slow reference step size 1e-5.")
@click.option("--out", default="dataset.json", show_default=True)
@click.option("--config", default=None, type=click.Path(exists=True),
              help="JSON file with defaults for any of the above options.")
@click.pass_context
@_handle_errors
def cmd_simulate(ctx, **_kwargs):
    """Simulate a dataset of asynchronously observed sequences."""
    p = _resolve_config(ctx, ctx.params.get("config"))
    if p["sequences"] < 1:
        raise ValidationError(f"--sequences must be >= 1, got {p['sequences']}")
    horizon = p["horizon"] if p["horizon"] is not None else \
        _DEFAULT_HORIZONS[p["process_kind"]]
    dt_sim = 1e-5 if p["full_fidelity"] else p["dt_sim"]
    spec = process_spec(p["process_kind"], horizon=horizon)
    dataset = simulate_dataset(spec, p["intensity"], p["sequences"], dt_sim,
                               p["seed"])
    doc = dataset_to_json_dict(dataset)
    doc["config"] = {"command": "simulate", **p, "horizon": horizon,
                     "dt_sim": dt_sim}
    with open(p["out"], "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    counts = [len(s) for s in dataset.sequences]
    click.echo(f"wrote {len(dataset)} sequences to {p['out']} "
               f"(mean n={np.mean(counts):.1f}, lambda*T={p['intensity'] * horizon:.1f})")


# ---------------------------------------------------------------------------
# shared evaluation options

def _eval_options(fn):
    options = [
        click.option("--data", required=True, type=click.Path(),
                     help="Dataset JSON produced by `simulate`."),
        click.option("--model", "model_name", default="oracle",
                     show_default=True, help="oracle or mlp:<weights-path>."),
        click.option("--emission-std", default=1e-2, show_default=True),
        click.option("--guidance-gain", default=0.0, show_default=True),
        click.option("--particles", default=125, show_default=True),
        click.option("--dt", default=1e-3, show_default=True),
        click.option("--tau", default=0.5, show_default=True,
                     help="Resampling threshold fraction of N."),
        click.option("--scheme", default="systematic", show_default=True,
                     type=click.Choice(["systematic", "multinomial"])),
        click.option("--seed", default=0, show_default=True),
        click.option("--seed-count", default=1, show_default=True),
        click.option("--threads", default=None, type=int,
                     help="Worker threads [default: CTPF_THREADS or 1]."),
        click.option("--figures/--no-figures", default=True, show_default=True),
        click.option("--out-prefix", default="report", show_default=True),
        click.option("--config", default=None, type=click.Path(exists=True)),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


# ---------------------------------------------------------------------------
# loglik

@main.command("loglik")
@_eval_options
@click.option("--compare", is_flag=True, default=False,
              help="Run both the particle filter and the SIS baseline.")
@click.option("--no-resample", is_flag=True, default=False,
              help="Disable resampling (SIS only).")
@click.pass_context
@_handle_errors
def cmd_loglik(ctx, **_kwargs):
    """Estimate per-observation NLL of a dataset under a model."""
    p = _resolve_config(ctx, ctx.params.get("config"))
    threads = _resolve_threads(p["threads"])
    dataset = load_dataset(p["data"])
    model = _build_model(dataset, p["model_name"], p["emission_std"],
                         p["guidance_gain"])
    seeds = _seeds(p["seed"], p["seed_count"])
    policy = ResamplePolicy(threshold_fraction=p["tau"], scheme=p["scheme"],
                            enabled=not p["no_resample"])
    reports = []
    if not p["no_resample"]:
        reports.append(estimate_nll(model, dataset, p["particles"], p["dt"],
                                    policy, seeds, threads=threads))
    if p["no_resample"] or p["compare"]:
        sis_policy = ResamplePolicy(threshold_fraction=p["tau"],
                                    scheme=p["scheme"], enabled=False)
        reports.append(estimate_nll(model, dataset, p["particles"], p["dt"],
                                    sis_policy, seeds, threads=threads,
                                    method="sis"))
    _emit_reports(reports, p, "loglik")


def _emit_reports(reports: list[EvalReport], resolved: dict, command: str):
    prefix = resolved["out_prefix"]
    header = _config_header(resolved, command)
    for rep in reports:
        _write_report(rep, resolved, command, f"{prefix}_{rep.method}.json")
    save_summary_csv(reports, f"{prefix}_summary.csv", header_comment=header)
    if resolved.get("figures", True):
        from .plots import save_report_figure
        save_report_figure(reports, f"{prefix}_metrics.png",
                           title=f"{command}: {reports[0].config['process']}")
    for rep in reports:
        click.echo(f"{rep.method}: {rep.aggregate_mean:.6f} "
                   f"+/- {rep.aggregate_stderr:.6f} "
                   f"({rep.config['n_failed_sequences']} failed)")


# ---------------------------------------------------------------------------
# predict

@main.command("predict")
@_eval_options
@click.option("--method", default="pf", show_default=True,
              type=click.Choice(["pf", "posterior"]))
@click.option("--compare", is_flag=True, default=False,
              help="Run both pf and posterior-only methods.")
@click.pass_context
@_handle_errors
def cmd_predict(ctx, **_kwargs):
    """Sequentially predict each observation; report mean L2 error."""
    p = _resolve_config(ctx, ctx.params.get("config"))
    threads = _resolve_threads(p["threads"])
    dataset = load_dataset(p["data"])
    model = _build_model(dataset, p["model_name"], p["emission_std"],
                         p["guidance_gain"])
    seeds = _seeds(p["seed"], p["seed_count"])
    policy = ResamplePolicy(threshold_fraction=p["tau"], scheme=p["scheme"])
    methods = ["pf", "posterior"] if p["compare"] else [p["method"]]
    reports = [sequential_prediction_eval(model, dataset, p["particles"],
                                          p["dt"], policy, seeds,
                                          threads=threads, method=m)
               for m in methods]
    _emit_reports(reports, p, "predict")


# ---------------------------------------------------------------------------
# diagnose

@main.command("diagnose")
@click.option("--data", required=True, type=click.Path())
@click.option("--sequence-index", default=0, show_default=True)
@click.option("--model", "model_name", default="oracle", show_default=True)
@click.option("--emission-std", default=1e-2, show_default=True)
@click.option("--guidance-gain", default=0.0, show_default=True)
@click.option("--particles", default=125, show_default=True)
@click.option("--dt", default=1e-3, show_default=True)
@click.option("--tau", default=0.5, show_default=True)
@click.option("--scheme", default="systematic", show_default=True,
              type=click.Choice(["systematic", "multinomial"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--out-prefix", default="genealogy", show_default=True)
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
@_handle_errors
def cmd_diagnose(ctx, **_kwargs):
    """Export per-step particle/weight/ancestry traces under PF and SIS."""
    p = _resolve_config(ctx, ctx.params.get("config"))
    dataset = load_dataset(p["data"])
    if not 0 <= p["sequence_index"] < len(dataset):
        raise ValidationError(
            f"sequence index {p['sequence_index']} out of range "
            f"[0, {len(dataset) - 1}]")
    seq = dataset.sequences[p["sequence_index"]]
    model = _build_model(dataset, p["model_name"], p["emission_std"],
                         p["guidance_gain"])
    policy = ResamplePolicy(threshold_fraction=p["tau"], scheme=p["scheme"])
    pf = run_filter(model, seq, p["particles"], p["dt"], policy=policy,
                    seed=p["seed"], track_history=True)
    sis = run_sis(model, seq, p["particles"], p["dt"], seed=p["seed"],
                  track_history=True)
    header = _config_header(p, "diagnose")
    prefix = p["out_prefix"]
    export_genealogy(pf, f"{prefix}_pf.csv", header_comment=header)
    export_genealogy(sis, f"{prefix}_sis.csv", header_comment=header)
    if p["figures"]:
        from .plots import save_ess_traces, save_weight_trajectories
        save_weight_trajectories(pf, sis, f"{prefix}_weights.png",
                                 title=f"{dataset.spec.kind} weights")
        save_ess_traces(pf, sis, f"{prefix}_ess.png",
                        title=f"{dataset.spec.kind} ESS")
    n_events = sum(s.resampled for s in pf.steps)
    click.echo(f"pf: {n_events} resampling events over {len(pf.steps)} steps; "
               f"final ESS {pf.steps[-1].ess_before:.1f} vs "
               f"sis {sis.steps[-1].ess_before:.1f}")


# ---------------------------------------------------------------------------
# selftest

def _check_wiener_law(seed: int) -> str:
    rng = rngmod.substream(seed, rngmod.GENERIC, 1)
    trials = 4000
    sums = np.empty(trials)
    first = np.empty(trials)
    for k in range(trials):
        seg_a = sample_wiener_segment(0.7, 0.05, 1, rng)
        seg_b = sample_wiener_segment(1.3, 0.05, 1, rng)
        a = seg_a.increments.sum()
        b = seg_b.increments.sum()
        first[k] = a
        sums[k] = a + b
    var = sums.var(ddof=1)
    stderr = sums.var(ddof=1) * math.sqrt(2.0 / (trials - 1))
    if abs(var - 2.0) > 3.0 * stderr:
        raise NumericalError(f"concatenated variance {var:.4f} != 2.0")
    rho = np.corrcoef(first, sums - first)[0, 1]
    if abs(rho) > 3.0 / math.sqrt(trials):
        raise NumericalError(f"disjoint increments correlated: rho={rho:.4f}")
    return f"var={var:.4f}, rho={rho:+.4f}"


def _check_martingale(seed: int, sigma_floor: float) -> str:
    trials = 4000

    def drift0(z, t):
        return np.zeros_like(z)

    def diffusion(z, t):
        return np.full_like(z, 0.3)

    def drift_guided(z, t):
        return drift0(z, t) + 0.15  # u = 0.5 everywhere

    prior = SdeFunctions(drift=drift0, diffusion=diffusion, dim=1)
    post = SdeFunctions(drift=drift_guided, diffusion=diffusion, dim=1)
    rng = rngmod.substream(seed, rngmod.GENERIC, 2)
    log_m = np.empty(trials)
    from .sde import _integrate, substep_lengths
    lengths = substep_lengths(1.0, 1e-2)
    incr = rng.standard_normal((lengths.size, trials, 1)) \
        * np.sqrt(lengths)[:, None, None]
    z0 = np.zeros((trials, 1))
    _, log_m, _ = _integrate(prior.drift, post.drift, prior.diffusion, z0,
                             0.0, lengths, incr, sigma_floor, 1e4, False)
    m = np.exp(log_m)
    err = abs(m.mean() - 1.0)
    stderr = m.std(ddof=1) / math.sqrt(trials)
    if err > 3.0 * stderr:
        raise NumericalError(f"mean importance weight {m.mean():.4f} != 1")
    return f"mean={m.mean():.4f} (3*stderr={3 * stderr:.4f})"


def _check_ess_identities(seed: int) -> str:
    n = 64
    uniform = np.full(n, -math.log(n))
    if abs(ess(uniform) - n) > 1e-9:
        raise NumericalError("uniform weights should give ESS = N")
    onehot = np.full(n, -np.inf)
    onehot[3] = 0.0
    if abs(ess(onehot) - 1.0) > 1e-12:
        raise NumericalError("one-hot weights should give ESS = 1")
    with np.errstate(divide="ignore"):
        half = np.log(np.array([0.5, 0.5, 0.0, 0.0]))
    if abs(ess(half) - 2.0) > 1e-12:
        raise NumericalError("weights (1/2,1/2,0,0) should give ESS = 2")
    return "uniform/one-hot/half identities hold"


def _check_sis_equivalence(seed: int) -> str:
    spec = process_spec("gbm", horizon=2.0)
    dataset = simulate_dataset(spec, 2.0, 1, 1e-3, seed)
    model = oracle_model(spec, emission_std=0.05, guidance_gain=1.0)
    pf = run_filter(model, dataset.sequences[0], 16, 1e-2,
                    policy=ResamplePolicy(enabled=False), seed=seed)
    sis = run_sis(model, dataset.sequences[0], 16, 1e-2, seed=seed)
    if pf.total_log_likelihood != sis.total_log_likelihood:
        raise NumericalError("PF without resampling differs from SIS")
    if (pf.streams_opened, pf.values_drawn) != (sis.streams_opened,
                                                sis.values_drawn):
        raise NumericalError("stream consumption differs between PF and SIS")
    return f"total={pf.total_log_likelihood:.6f}, draws={pf.values_drawn}"


def _check_diffusion_floor_guard(seed: int, sigma_floor: float) -> str:
    def drift0(z, t):
        return np.zeros_like(z)

    def drift_shift(z, t):
        return np.full_like(z, 5e-3)

    def decaying(z, t):  # reaches exactly 0 at t >= 0.5
        return np.maximum(1.0 - 2.0 * t, 0.0) * np.full_like(z, 0.2)

    prior = SdeFunctions(drift=drift0, diffusion=decaying, dim=1)
    post = SdeFunctions(drift=drift_shift, diffusion=decaying, dim=1)
    rng = rngmod.substream(seed, rngmod.GENERIC, 3)
    seg = sample_wiener_segment(1.0, 1e-2, 1, rng)
    res = augmented_solve(prior, post, np.zeros(1), 0.0, seg,
                          sigma_floor=sigma_floor)
    if not math.isfinite(res.log_m):
        raise NumericalError("log importance weight is non-finite")
    return f"log_m={res.log_m:.1f} stayed finite across the sigma->0 region"


@main.command("selftest")
@click.option("--seed", default=0, show_default=True)
@click.option("--sigma-floor", default=SIGMA_FLOOR, hidden=True,
              help="Diffusion clamp override (test hook).")
@click.pass_context
@_handle_errors
def cmd_selftest(ctx, **_kwargs):
    """Run the fast invariant suite; exit nonzero on any failure."""
    p = _resolve_config(ctx, None)
    seed = p["seed"]
    floor = p["sigma_floor"]
    checks = [
        ("piecewise-wiener-law", lambda: _check_wiener_law(seed)),
        ("importance-weight-martingale", lambda: _check_martingale(seed, floor)),
        ("ess-identities", lambda: _check_ess_identities(seed)),
        ("sis-equals-pf-without-resampling",
         lambda: _check_sis_equivalence(seed)),
        ("diffusion-floor-guard",
         lambda: _check_diffusion_floor_guard(seed, floor)),
    ]
    failed = 0
    for name, check in checks:
        try:
            detail = check()
            click.echo(f"PASS {name}: {detail}")
        except NumericalError as exc:
            click.echo(f"FAIL {name}: {exc}")
            failed += 1
    if failed:
        raise NumericalError(f"{failed} of {len(checks)} self-checks failed")
    click.echo(f"all {len(checks)} self-checks passed")


if __name__ == "__main__":
    main()
