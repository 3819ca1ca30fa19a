"""Learnable activation + multi-stream aggregation head for instance image
retrieval over precomputed convolutional feature maps."""

from .activations import (
    ActivationGradients,
    ActivationParams,
    ClampCounter,
    activate,
    activate_gradients,
    apply_activation,
    default_params,
    weibull_peak,
)
from .errors import (
    ActnetError,
    DataError,
    FormatError,
    NumericalError,
    ParameterError,
    ShapeError,
    StateError,
)
from .evaluation import (
    MapReport,
    QueryExpansion,
    RetrievalIndex,
    SeparabilityReport,
    alpha_query_expansion,
    average_precision,
    mean_average_precision,
    rank,
    separability,
    separability_from_distances,
)
from .head import (
    HeadGradients,
    ModelState,
    StreamParams,
    WhiteningLayer,
    backward_head,
    compact_signature,
    extract_descriptors,
    fit_whitening,
    forward_head,
    forward_head_cached,
    forward_stream,
    gem_pool,
    global_average_pool,
    global_max_pool,
    initial_model,
    power_normalize,
)
from .powerlaw import (
    ExpTransformModel,
    monte_carlo_validate,
    transformed_cdf,
    transformed_mean,
    transformed_pdf,
)
from .tensor import FeatureMap, derive_rng, euclidean_distance, make_rng, tensor_map
from .training import (
    OptimizerState,
    TrainConfig,
    TrainingSet,
    Triplet,
    mine_triplets,
    train,
    train_epoch,
    triplet_loss,
    triplet_loss_gradients,
)

__version__ = "0.1.0"
