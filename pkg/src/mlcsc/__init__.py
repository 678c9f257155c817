"""Multi-layer convolutional sparse coding: models, pursuit, learning.

The package treats a signal as a chain of sparse convolutional
representations.  :mod:`mlcsc.vectors` carries the circular geometry and
windowed sparsity measures; :mod:`mlcsc.dictionaries` the layers and
their composed effective operators; :mod:`mlcsc.pursuit` the sparse
coders; :mod:`mlcsc.model` the layered model with its sampling,
membership, and recovery strategies; :mod:`mlcsc.learning` the online
dictionary learning loop; :mod:`mlcsc.analysis` the stability bounds and
isometry certifiers; :mod:`mlcsc.io` the file containers; and
:mod:`mlcsc.cli` the command-line harness.
"""

from .analysis import (
    BoundReport,
    CoherenceReport,
    bound_dcp_layered,
    bound_thm4,
    bound_thm4_alt,
    bound_thm6,
    bound_thm7,
    check_local_isometry,
    check_nvs,
    coherence_report,
    eq13_margin,
    estimate_stripe_rip,
    exact_stripe_delta,
    support_delta,
)
from .dictionaries import (
    ConvLayer,
    EffectiveDict,
    effective_support_len,
    mutual_coherence,
    single_layer_dict,
)
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InfeasibleModelError,
    MLCSCError,
    NormalizationError,
)
from .learning import (
    LearnConfig,
    TrainTrace,
    ZetaPolicy,
    dict_gradient,
    hard_threshold_dict,
    objective_eval,
    random_model,
    train,
)
from .model import (
    LayerStack,
    MembershipReport,
    MLCSCModel,
    layered_pursuit,
    membership,
    ml_csc_project,
    ml_csc_pursuit,
    sample,
    stack_metrics,
    support_metrics,
)
from .pursuit import (
    PursuitConfig,
    PursuitResult,
    fista_lasso,
    iht,
    omp,
    run_coder,
    subspace_pursuit,
)
from .vectors import (
    DenseVec,
    Geometry,
    SparseVec,
    l0_inf_patch,
    l0_inf_stripe,
    l2_inf_patch,
    l2_inf_stripe,
    stripe_width,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
