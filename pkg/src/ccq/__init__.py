"""Composite correlation quantization for cross-modal retrieval."""

from .core import (
    CcqConfig,
    CcqModel,
    CodeMatrix,
    EncodeMode,
    ModalDataset,
    NormQuantizer,
    code_length_bits,
    validate_config,
)
from .encoder import JOINT, PackedCodes, encode_database, encode_joint_database
from .estimator import CompositeCorrelationQuantizer
from .io import generate_synthetic, load_codes, load_model, save_codes, save_model, zca_whiten
from .metrics import average_precision, map_at_r, run_protocol
from .search import FingerprintMismatch, build_query_table, search
from .trainer import encode, exhaustive_encode, train

__all__ = [
    "CcqConfig",
    "CcqModel",
    "CodeMatrix",
    "CompositeCorrelationQuantizer",
    "EncodeMode",
    "FingerprintMismatch",
    "JOINT",
    "ModalDataset",
    "NormQuantizer",
    "PackedCodes",
    "average_precision",
    "build_query_table",
    "code_length_bits",
    "encode",
    "encode_database",
    "encode_joint_database",
    "exhaustive_encode",
    "generate_synthetic",
    "load_codes",
    "load_model",
    "map_at_r",
    "run_protocol",
    "save_codes",
    "save_model",
    "search",
    "train",
    "validate_config",
    "zca_whiten",
]
__version__ = "0.1.0"
