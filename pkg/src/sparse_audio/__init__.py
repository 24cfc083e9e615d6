"""Sparse audio coding with (adaptive) LCA over Gammachirp dictionaries, plus a spiking readout."""

from .alca import AdaptConfig, ParamGradients, adapt, adamax_step, grad_params, scaled_energy
from .errors import (
    AdaptationError,
    ConfigError,
    DomainError,
    FormatError,
    IngestionError,
    NormalizationError,
    ShapeError,
    SparseAudioError,
    StateError,
    TrainingError,
)
from .gammachirp import (
    BankConfig,
    FilterBank,
    GammachirpParams,
    build_bank,
    center_frequencies,
    erb,
    impulse_response,
    load_bank,
    save_bank,
)
from .lca import (
    Dictionary,
    EnergyTrace,
    LcaConfig,
    LcaState,
    SparseCode,
    encode,
    energy,
    hard_threshold,
    lca_step,
    project,
    reconstruct,
)
from .pipeline import (
    AudioSignal,
    DatasetManifest,
    EventRepresentation,
    bin_spike_times,
    encode_dataset,
    load_wav,
    normalize_01,
    sparsity_ratio,
)
from .snn import LifConfig, LifLayerState, Network, NetworkSpec, fast_sigmoid_slope, forward, lif_step, train

__version__ = "0.1.0"
