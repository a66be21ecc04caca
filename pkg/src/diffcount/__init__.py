"""diffcount: a desk-scale diffusion sampling lab with exact counting metrics.

Generate procedural shape datasets, train a tiny denoising model, sample
it with stochastic or deterministic ODE solvers, and measure counting
hallucination rates alongside Frechet-distance style quality metrics,
with numerically verified error bounds for the sampling process.
"""

from .schedules import (NoiseSchedule, build_schedule, diffuse,
                        training_loss, uniform_weight)
from .models import (GMM, GMMScoreModel, TinyNet, TrainConfig,
                     train_tinynet, save_checkpoint, load_checkpoint)
from .samplers import (SamplerConfig, Trajectory, initial_noise,
                       ancestral_step, solver1_step, solver2_step, sample)
from .bounds import (GaussianDist, ErrorBudget, gaussian_kl,
                     diffused_prior_gap, verify_kl_decomposition,
                     transition_operator, mean_deviation,
                     trajectory_error_decomposition, convergence_order)
from .shapes import (CountProfile, SceneSpec, ShapeSpec, STANDARD_PROFILE,
                     CALIBRATION_PROFILE, sample_scene, rasterize,
                     generate_dataset)
from .counting import binarize, connected_components, classify_shape, \
    count_objects, judge
from .metrics import (FailureRates, CorrelationResult, failure_rates,
                      frechet_distance, pearson, spearman,
                      DownsampleFeatures, RandomConvFeatures)
from .joint import make_joint, split_joint, make_gray_dataset, train_jdm, \
    sample_and_evaluate_jdm
from .estimators import (DiffusionGenerator, ShapeCounter,
                         DownsampleFeaturizer, RandomConvFeaturizer)

__version__ = "0.1.0"
