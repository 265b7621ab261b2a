"""Joint thinned-Poisson-process species distribution models.

Pools presence-only records (biased, abundant) with planned survey data
(unbiased, scarce) across many species, sharing the sampling-bias
slopes so every species' data helps correct every other's.
"""

from .data import (BackgroundSample, CoefficientSet, CovariateField,
                   DataBundle, FitResult, PresenceOnlyDataset, SurveyDataset,
                   linear_predictor_bias, linear_predictor_species)
from .errors import ConfigError, DataError, NumericalError, PoolsdmError
from .evaluate import (MethodSpec, auc, predict_intensity,
                       presence_probability, predictive_loglik,
                       relative_sampling_effort, run_comparison,
                       tgb_background)
from .likelihood import ObjectiveValue, joint_gradient, joint_objective, pa_loglik, po_loglik
from .resample import (BlockPartition, block_bootstrap, block_cv_folds,
                       downsample_pa, make_partition, split_bundle)
from .simulate import (SimulationConfig, make_survey, simulate_bundle,
                       simulate_covariates, simulate_species_process,
                       thin_process)
from .solver import (NormalEquationBlocks, OpCounter, SolverOptions, fit,
                     fit_dense, newton_step, wald_region)

__version__ = "0.1.0"
