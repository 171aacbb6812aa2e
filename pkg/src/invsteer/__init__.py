"""Steering a frozen model through a learned invertible feature map."""

from .evaluation import (
    METHODS,
    MagnitudeReport,
    Method,
    SweepResult,
    compliance_rate,
    dim_ablation,
    dim_actadd,
    dim_site,
    evaluate_method,
    feature_clamp,
    intervention_magnitude,
    layer_sweep,
    linear_at_loss_sites,
    loss_site_shift,
    no_intervention,
    radius_oracle,
    run_linear_fmap_ablation,
)
from .exceptions import (
    DegenerateDirectionError,
    InvalidArgumentError,
    InversionError,
    NoSupervisionError,
    TrainingError,
)
from .featmap import IResNetFeatureMap, InversionReport, LinearFeatureMap, load_feature_map
from .intervene import (
    DiffInMeans,
    InterventionSpec,
    SteeringDirection,
    ablate,
    actadd,
    basis_intervene,
    clamp_to_mean,
    dim_direction,
    interchange,
    linear_intervene,
    nonlinear_intervene,
)
from .sites import LossSiteSet, SiteStats, auc, hinge_loss, select_sites
from .subject import (
    ContrastiveDataset,
    Site,
    Subject,
    SubjectConfig,
    build_subject,
    forward_with_hooks,
    generate_dataset,
)
from .train import NonlinearSteering, TrainConfig, TrainReport, grad_check, sample_pairs, train_fmap

__all__ = [name for name in dir() if not name.startswith("_")]
