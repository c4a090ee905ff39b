"""Continual-learning rehearsal with streaming centroid caches and
centroid-distance distillation."""

from .benchmarks import (
    BaseDataset,
    PermutedSpec,
    SplitGaussianSpec,
    TaskSpec,
    load_external,
    make_permuted,
    make_split_gaussian,
)
from .centroids import (
    Centroid,
    CentroidStore,
    FrozenCentroid,
    UpdateOutcome,
    update_centroid_cache_mean,
    update_centroid_running_mean,
)
from .distill import (
    DistanceMatrix,
    RecomputedCentroids,
    centroid_distance_loss,
    distance_matrix,
    feature_distillation_loss,
    recompute_task_centroids,
)
from .learner import (
    ContinualConfig,
    Learner,
    RunResult,
    load_checkpoint,
    run_sequence,
    save_checkpoint,
)
from .metrics import average_accuracy, centroid_drift, forgetting, long_term_remembering
from .nn import GradientTape, Network, TaskHead, cross_entropy, sgd_step, softmax
from .rehearsal import (
    SAMPLERS,
    MemoryBuffer,
    MemoryItem,
    ObservedSample,
    centroid_probabilities,
    rehearsal_batch,
    select_memory,
    select_memory_baseline,
)

__version__ = "0.1.0"
