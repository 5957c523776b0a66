"""Event-driven spiking classifiers from small ReLU networks.

The pipeline: aggregate event streams into rate frames, train a ReLU network
with an outlier-eliminating activation penalty, rescale it into an
integrate-and-fire spiking network, then run event-driven inference that can
stop early once the output spike gap clears a calibrated confidence
threshold.
"""

__version__ = "0.1.0"

from .errors import ParseError, TrainingDivergedError, ValidationError
from .events import (
    DatasetStats,
    DvsEvent,
    EventStream,
    FrameSet,
    accumulate,
    compute_dataset_stats,
    frame_aggregate,
    load_events,
    load_manifest,
    load_split,
    poisson_encode,
    save_events,
    save_manifest,
    stack_frames,
)
from .ann import (
    ActivationStats,
    AvgPool2d,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    Network,
    TrainConfig,
    backward,
    collect_lambda,
    fold_batchnorm,
    forward,
    load_model,
    objective,
    outlier_penalty,
    predict,
    save_model,
    temporal_loss,
    train,
)
from .conversion import SnnLayer, SnnNetwork, convert, load_snn, save_snn, \
    verify_equivalence
from .snn import (
    RunTrace,
    SnnState,
    init_state,
    residual,
    run,
    run_batch,
    spiking_rate,
    step,
    ticks_elapsed,
    total_ticks,
    write_trace,
)
from .cutoff import (
    NEVER,
    CutoffResult,
    CutoffTable,
    calibrate,
    confidence_rate,
    default_grid,
    earliest_stable_time,
    infer_with_cutoff,
    load_table,
    replay_cutoff,
    save_table,
    spike_gap,
)
from .analysis import (
    AccuracyPoint,
    LayerSimilarity,
    accuracy_vs_time,
    confidence_curves,
    cosine_similarity,
    dataset_similarity,
    membrane_norm_bound,
    outlier_ratios,
    similarity_lower_bound,
    stream_similarity,
)
from . import synth
