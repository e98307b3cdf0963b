"""Event-driven spiking convolutional transformer for EEG seizure tasks.

A numpy library with five parts: dense numeric kernels (`tensor`), LIF
dynamics and approximate spike-triggered updates (`neurons`), the spiking
conformer architecture (`model`), the EEG/EDF pipeline (`data`), the
training/evaluation harness (`training`), and the ADD/MUL operation
profiler (`profiling`).  A batch CLI lives in `cli`.
"""

__version__ = "0.1.0"

from .tensor import (
    BatchNormState,
    ConvSpec,
    avg_pool2d,
    batch_norm,
    conv2d,
    conv2d_backward,
    matmul,
)
from .neurons import (
    ApproxConfig,
    LifParams,
    LifState,
    SkipStats,
    approx_linear_lif_forward,
    build_pos_idx,
    lif_multistep,
    lif_step,
    skip_reduction,
    surrogate_grad,
)
from .model import (
    ModelConfig,
    SpikingConformer,
    build_model,
    classify,
    count_parameters,
    detection_config,
    encoder_block_forward,
    load_checkpoint,
    model_forward,
    prediction_config,
    save_checkpoint,
    spiking_conv_forward,
    ssa_forward,
)
from .data import (
    Dataset,
    EegRecording,
    PhaseInterval,
    Segment,
    SeizureAnnotation,
    balance,
    extract_phases,
    kfold_split,
    parse_edf,
    segment_interval,
    write_edf,
)
from .training import (
    ConfusionMatrix,
    TrainConfig,
    cross_entropy,
    evaluate,
    metrics,
    train,
)
from .profiling import (
    AnnOpModel,
    OpTally,
    count_ann_ops,
    count_snn_ops,
    efficiency_ratio,
    skip_report,
)
