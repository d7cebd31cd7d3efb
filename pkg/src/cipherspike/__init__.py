"""Encrypted inference for spiking neural networks.

Spiking models (LeNet-style and ResNet-style) run over CKKS-encrypted
inputs packed into SIMD slots.  Two interchangeable neuron evaluators:
a polynomial approximation of the spike/reset step, and an exact-compare
path served by a decrypting authority (test mode).
"""

from .backend import Backend, CipherVector, CkksBackend, SimBackend
from .chebyshev import decay_from_step, evaluate_series, fit_step, series_levels
from .ckks import (
    CkksContext,
    CkksParams,
    RecryptionAuthority,
    load_keys,
    save_keys,
)
from .errors import (
    CapacityError,
    CipherSpikeError,
    FormatError,
    HeContractError,
    KeyFormatError,
    LevelExhaustedError,
    MissingRotationKeyError,
    ScaleMismatchError,
    ValidationError,
)
from .fixtures import build_fixture_model, calibrate_scales, gen_fixture
from .layers import AvgPoolPlan, ConvPlan, FcPlan, Geometry, ScaleMaskPlan
from .lif import LifPlan, lif_reference
from .model_io import (
    DatasetFrames,
    LifSettings,
    NetworkSpec,
    load_weights_csv,
    network_to_json,
    pack_frames,
    parse_network,
    read_dataset,
    read_frames_bin,
    read_mnist_idx,
    save_weights_csv,
    weight_units,
    write_frames_bin,
    write_mnist_idx,
)
from .planner import (
    InferenceResult,
    NetworkModel,
    RefreshSchedule,
    RotationPlan,
    decode_output,
    harvest_rotations,
    memory_estimate,
    simulate_ledger,
)
from .profiles import PROFILES, SHIPPED_NETWORKS, get_profile, load_network

__version__ = "0.1.0"

__all__ = [
    "AvgPoolPlan", "Backend", "CapacityError", "CipherSpikeError",
    "CipherVector", "CkksBackend", "CkksContext", "CkksParams", "ConvPlan",
    "DatasetFrames", "FcPlan", "FormatError", "Geometry", "HeContractError",
    "InferenceResult", "KeyFormatError", "LevelExhaustedError", "LifPlan",
    "LifSettings", "MissingRotationKeyError", "NetworkModel", "NetworkSpec",
    "PROFILES", "RecryptionAuthority", "RefreshSchedule", "RotationPlan",
    "SHIPPED_NETWORKS", "ScaleMaskPlan", "ScaleMismatchError", "SimBackend",
    "ValidationError", "build_fixture_model", "calibrate_scales",
    "decay_from_step", "decode_output", "evaluate_series", "fit_step",
    "gen_fixture",
    "get_profile", "harvest_rotations", "lif_reference", "load_keys",
    "load_network", "load_weights_csv", "memory_estimate", "network_to_json",
    "pack_frames", "parse_network", "read_dataset", "read_frames_bin",
    "read_mnist_idx", "save_keys", "save_weights_csv", "series_levels",
    "simulate_ledger", "weight_units", "write_frames_bin", "write_mnist_idx",
]
