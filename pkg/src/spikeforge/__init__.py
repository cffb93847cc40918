"""spikeforge: convert pretrained CNNs to spiking networks and calibrate them
layer by layer so low-step simulations track the source network.
"""

from .ann import ActivationTrace, ann_forward
from .analysis import (
    LayerErrorReport,
    energy_estimate,
    firing_rate_stats,
    layer_error,
    error_propagation_bound,
)
from .calibration import (
    CalibrationBundle,
    CalibrationRecord,
    PipelineConfig,
    bias_calibrate,
    load_bundle,
    potential_calibrate,
    run_pipeline,
    save_bundle,
    weight_calibrate,
)
from .data import (
    SampleSet,
    accuracy,
    fixture_manifest,
    generate_samples,
    load_samples,
    make_fixture,
    save_samples,
)
from .errors import (
    BadMagicError,
    BlobSizeMismatchError,
    CalibrationDivergedError,
    GraphError,
    ManifestError,
    ModelFormatError,
    SpikeforgeError,
    StaleStateError,
    TruncatedFileError,
    UnfoldedBatchNormError,
    UnsupportedTopologyError,
    VersionMismatchError,
)
from .graph import (
    AvgPoolParams,
    BatchNormParams,
    LayerNode,
    LinearParams,
    NetworkGraph,
    avgpool_to_depthwise,
    fold_batchnorm,
    infer_shapes,
    normalize_thresholds,
    rewrite_for_snn,
    spiking_units,
    validate_graph,
)
from .model_io import load_model, load_tensor_map, save_model, save_tensor_map
from .snn import (
    LayerState,
    RateForward,
    SimulationResult,
    SpikingState,
    clipfloor,
    expected_rate_forward,
    if_layer_step,
    init_state,
    reset_state,
    simulate_snn,
)
from .tensor import (
    ConvParams,
    Tensor,
    avg_pool2d,
    batch_mean,
    channel_spatial_mean,
    conv2d_forward,
    conv2d_weight_grad,
    linear_forward,
    linear_weight_grad,
    relu,
    tensor,
)
from .thresholds import (
    ThresholdTable,
    baseline_threshold,
    load_thresholds,
    mmse_threshold,
    save_thresholds,
)

__version__ = "0.1.0"
