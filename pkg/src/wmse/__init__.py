"""Waveform-mapping multichannel speech enhancement.

Time-domain enhancement models built from parametric sinc band-pass
front ends and dilated convolution trunks, a residual two-stage
composite, a spectral-mapping dense baseline, and a synthetic
multichannel corpus generator, all on a small self-contained
float64 numpy engine.
"""

from .data import (
    ChannelModel,
    MultichannelSegment,
    Waveform,
    load_wav,
    save_wav,
    segment_and_normalize,
    synthesize_corpus,
)
from .evaluation import MetricsReport, mse_metric, stoi
from .layers import (
    DilatedBlockSpec,
    SincKernel,
    receptive_field,
    sinc_cutoff_reparam,
    sinc_kernel_materialize,
)
from .models import (
    ModelSpec,
    Network,
    ResidualComposite,
    build_named_model,
    forward,
    forward_residual,
    instantiate,
    parameter_census,
)
from .numerics import (
    Adam,
    AdamState,
    BatchNormParams,
    ConvLayerParams,
    Tensor1D,
    adam_step,
    batchnorm_apply,
    conv1d_backward,
    conv1d_forward,
    grad_check,
    mse_loss,
)
from .spectral import DdaeNetwork, DdaeSpec, StftConfig, istft, lps, lps_invert, stft
from .training import (
    TrainConfig,
    TrainLog,
    epochs_to_threshold,
    train,
    train_residual,
)

__version__ = "0.1.0"
