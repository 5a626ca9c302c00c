"""drr: lossy vector-quantized image codes, losslessly entropy-coded with
bits-back, feeding a replay buffer for class-incremental training."""

from .bits_back import (
    CodingTables,
    CompressedStream,
    FitConfig,
    LatentChainModel,
    build_coding_tables,
    decode_stream,
    deserialize_models,
    deserialize_stream,
    elbo,
    encode_stream,
    fit,
    finetune,
    mean_elbo,
    random_model,
    sample_blocks,
    serialize_models,
    serialize_stream,
)
from .errors import (
    DataCorruptionError,
    DegenerateInputError,
    DrrError,
    ExhaustedStreamError,
    InsufficientInitialBitsError,
    InvalidInputError,
    StateError,
)
from .learner import (
    ClassifierParams,
    ExperimentConfig,
    LatentSpec,
    PhaseResults,
    PhaseSchedule,
    TrainConfig,
    evaluate,
    ib_loss,
    make_toy_dataset,
    run_experiment,
    train_phase,
)
from .rans import AnsCoder, QuantizedPmf, pmf_quantize
from .replay_store import (
    LatentModelPair,
    MemoryReport,
    RawExemplarStore,
    ReplayBuffer,
    compress_grid,
    decompress_grid,
    format_megabytes,
    raw_store_bytes,
    select_exemplars,
)
from .vq_codec import (
    CodecConfig,
    CodecParams,
    CodeGrid,
    decode_codes,
    deserialize_codec,
    encode_image,
    freeze,
    serialize_codec,
    train_codec,
)

__version__ = "0.1.0"

__all__ = [
    "AnsCoder",
    "ClassifierParams",
    "CodecConfig",
    "CodecParams",
    "CodeGrid",
    "CodingTables",
    "CompressedStream",
    "DataCorruptionError",
    "DegenerateInputError",
    "DrrError",
    "ExhaustedStreamError",
    "ExperimentConfig",
    "FitConfig",
    "InsufficientInitialBitsError",
    "InvalidInputError",
    "LatentChainModel",
    "LatentModelPair",
    "LatentSpec",
    "MemoryReport",
    "PhaseResults",
    "PhaseSchedule",
    "QuantizedPmf",
    "RawExemplarStore",
    "ReplayBuffer",
    "StateError",
    "TrainConfig",
    "build_coding_tables",
    "compress_grid",
    "decode_codes",
    "decode_stream",
    "decompress_grid",
    "deserialize_codec",
    "deserialize_models",
    "deserialize_stream",
    "elbo",
    "encode_image",
    "encode_stream",
    "evaluate",
    "fit",
    "finetune",
    "format_megabytes",
    "freeze",
    "ib_loss",
    "make_toy_dataset",
    "mean_elbo",
    "pmf_quantize",
    "random_model",
    "raw_store_bytes",
    "run_experiment",
    "sample_blocks",
    "select_exemplars",
    "serialize_codec",
    "serialize_models",
    "serialize_stream",
    "train_codec",
    "train_phase",
]
