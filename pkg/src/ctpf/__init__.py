"""Continuous-time particle filtering for latent stochastic differential equations.

Particles are Wiener-path samples over inter-observation intervals; weights
combine decoder likelihoods with Girsanov importance weights between the
prior and proposal path laws; resampling is triggered by effective sample
size. Inference tasks built on the filter: per-observation likelihood
estimation and one-step-ahead sequential prediction.
"""

from .errors import (CtpfError, DegeneracyError, DivergenceError,
                     NumericalError, ProposalExplosionError, ValidationError)
from .filtering import (FilterResult, Particle, ResamplePolicy, StepRecord,
                        ess, export_genealogy, pf_step, resample,
                        resample_indices, run_filter, run_sis)
from .models import (LatentSdeModel, MlpDrift, ProposalContext, decoder_loglik,
                     decoder_mean, load_mlp_weights, mlp_forward, mlp_model,
                     oracle_model, random_mlp_drift, save_mlp_weights)
from .processes import (Dataset, ObservationSequence, ProcessSpec,
                        car4_exact_moments, gbm_dataset_exact_nll,
                        gbm_exact_sequence_nll, gbm_exact_transition_logpdf,
                        load_dataset, lsde_exact_moments, process_spec,
                        sample_observation_times, save_dataset, simulate,
                        simulate_dataset)
from .rng import substream
from .sde import (SIGMA_FLOOR, U_MAX, AugmentedResult, SdeFunctions, TimeGrid,
                  WienerSegment, augmented_solve, euler_maruyama,
                  sample_wiener_segment, substep_lengths)
from .tasks import (EvalReport, estimate_nll, predict_next, save_report_json,
                    save_summary_csv, sequential_prediction_eval)

__version__ = "0.1.0"
