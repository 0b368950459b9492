"""Privacy-alignment auditing for hierarchical feature representations.

The toolkit partitions layer-wise features into sensitive and
non-sensitive groups (bottom-up, top-down, or random baseline), perturbs
sensitive features under calibrated reference mechanisms, and scores how
well the observed perturbation aligns with a declared privacy budget,
alongside a set of generic distributional baselines.
"""

from .core import (
    ConceptSet,
    DataError,
    DimensionMismatchError,
    EmptySensitiveSetError,
    GroupingResult,
    InsufficientDataError,
    Layer,
    LayerPartition,
    LayeredFeatureBundle,
    PerturbationTriple,
    PrivalignError,
    ReferenceMechanism,
    ShapeMismatchError,
    UsageError,
    pool_sensitive_features,
    validate_bundle,
)
from .empa import (
    EMConfig,
    EmpaAssessment,
    MixtureParams,
    bas,
    bias_ref,
    bias_uniform,
    canonicalize,
    em_fit,
    empa_assess,
    fit_reference,
    psi,
)
from .experiment import (
    Aggregate,
    ExperimentReport,
    ProtocolConfig,
    SyntheticConfig,
    aggregate,
    generate_synthetic,
    run_protocol,
)
from .grouping import (
    CorrespondenceError,
    LinkSets,
    MdavConfig,
    MissingPrototypeError,
    SensitivityScorer,
    ThresholdPolicy,
    bua,
    correspondence_map,
    partition_layer,
    random_partition,
    score_layer,
    tda,
)
from .lfb import read_bundle, write_bundle
from .metrics import (
    HistogramConfig,
    MomentRegModel,
    alignment_features,
    chi_square,
    kl_divergence,
    mmd_rbf,
    moment_reg_fit,
    moment_reg_predict,
    noise_mle,
    rmse,
    wasserstein1,
)
from .microagg import MicroCluster, RangeEstimate, estimate_ranges, l2_normalize, mdav, ncp
from .noise import NoiseConfig, perturb_sensitive, sample_noise

__version__ = "0.1.0"
