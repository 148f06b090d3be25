"""Domain types, configuration and validation shared by every stage.

Layout convention: samples are rows. A modality's features are an
``(N_v, P_v)`` array, a mapping ``R^v`` is ``(P_v, D)`` with orthonormal
columns, and the shared codebook is an ``(M, K, D)`` array so that
``codebook[m, k]`` is one codeword.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-8
N_NORM_BINS = 256


class EncodeMode(str, enum.Enum):
    ICM = "icm"
    GREEDY = "greedy"


def _is_power_of_two(k: int) -> bool:
    return isinstance(k, (int, np.integer)) and k >= 2 and (k & (k - 1)) == 0


@dataclass(frozen=True)
class CcqConfig:
    """Hyperparameters of a CCQ model.

    ``latent_dim=None`` resolves to ``min(min_v P_v, H)`` once the data is
    known (see :meth:`resolve`). ``icm_sweeps=None`` resolves to 3 for ICM
    and 1 for greedy encoding. ``reseed_unused`` moves codewords that no
    point selects onto badly reconstructed points after each codebook update.
    ``paired_warm_start`` first fits the paired prefix alone and starts the
    full problem from that solution when the data is semi-paired.
    """

    num_modalities: int = 2
    num_codebooks: int = 4
    codewords_per_book: int = 256
    latent_dim: int | None = None
    modality_weights: tuple[float, ...] | None = None
    max_outer_iters: int = 30
    icm_sweeps: int | None = None
    encode_mode: EncodeMode = EncodeMode.ICM
    ridge: float = 1e-6
    convergence_tol: float = 1e-4
    seed: int = 0
    reseed_unused: bool = True
    paired_warm_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encode_mode", EncodeMode(self.encode_mode))
        if self.modality_weights is not None:
            object.__setattr__(
                self, "modality_weights", tuple(float(w) for w in self.modality_weights)
            )

    @property
    def weights(self) -> np.ndarray:
        if self.modality_weights is None:
            return np.ones(self.num_modalities)
        return np.asarray(self.modality_weights, dtype=float)

    @property
    def sweeps(self) -> int:
        if self.icm_sweeps is not None:
            return self.icm_sweeps
        return 3 if self.encode_mode is EncodeMode.ICM else 1

    def resolve(self, feature_dims: Sequence[int]) -> "CcqConfig":
        """Fill in data-dependent defaults (latent dim, weights)."""
        cfg = self
        if cfg.latent_dim is None:
            cfg = replace(cfg, latent_dim=int(min(min(feature_dims), code_length_bits(cfg))))
        if cfg.modality_weights is None:
            cfg = replace(cfg, modality_weights=(1.0,) * cfg.num_modalities)
        return cfg

    def to_dict(self) -> dict:
        return {
            "num_modalities": self.num_modalities,
            "num_codebooks": self.num_codebooks,
            "codewords_per_book": self.codewords_per_book,
            "latent_dim": self.latent_dim,
            "modality_weights": list(self.modality_weights) if self.modality_weights else None,
            "max_outer_iters": self.max_outer_iters,
            "icm_sweeps": self.icm_sweeps,
            "encode_mode": self.encode_mode.value,
            "ridge": self.ridge,
            "convergence_tol": self.convergence_tol,
            "seed": self.seed,
            "reseed_unused": self.reseed_unused,
            "paired_warm_start": self.paired_warm_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CcqConfig":
        d = dict(d)
        if d.get("modality_weights") is not None:
            d["modality_weights"] = tuple(d["modality_weights"])
        return cls(**d)


def code_length_bits(config: CcqConfig) -> int:
    """Number of bits ``H = M * log2(K)`` in one code."""
    k = config.codewords_per_book
    if not _is_power_of_two(k):
        raise ValueError(f"codewords_per_book={k} is not a power of two")
    return config.num_codebooks * (int(k).bit_length() - 1)


@dataclass
class ModalDataset:
    """Per-modality feature matrices whose first ``paired_count`` rows are aligned.

    Row ``n < paired_count`` of every modality describes the same object.
    ``labels`` (optional) holds one multi-hot concept matrix per modality and
    is only used for evaluation.
    """

    features: list[np.ndarray]
    paired_count: int = 0
    labels: list[np.ndarray] | None = None

    def __post_init__(self):
        self.features = [np.asarray(x, dtype=float) for x in self.features]
        for v, x in enumerate(self.features):
            if x.ndim != 2:
                raise ValueError(f"modality {v}: expected a 2-D array, got shape {x.shape}")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"modality {v}: non-finite feature values")
        if self.paired_count < 0 or any(self.paired_count > x.shape[0] for x in self.features):
            raise ValueError(
                f"paired_count={self.paired_count} exceeds the size of some modality"
            )
        if self.labels is not None:
            self.labels = [np.asarray(y) for y in self.labels]

    @property
    def num_modalities(self) -> int:
        return len(self.features)

    @property
    def sizes(self) -> list[int]:
        return [x.shape[0] for x in self.features]

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.features]

    def slice(self, start: int, stop: int) -> "ModalDataset":
        """Rows ``[start, stop)`` of every modality, clipped to its length."""
        feats = [x[min(start, len(x)) : min(stop, len(x))] for x in self.features]
        paired = int(np.clip(self.paired_count - start, 0, max(stop - start, 0)))
        labels = None
        if self.labels is not None:
            labels = [y[min(start, len(y)) : min(stop, len(y))] for y in self.labels]
        return ModalDataset(feats, paired, labels)


@dataclass
class CodeMatrix:
    """Codeword indices per modality with a single shared block for paired rows.

    Storing the paired prefix once is what makes paired codes identical
    across modalities: ``modality(v)[:paired_count]`` is the same array for
    every ``v``.
    """

    shared: np.ndarray  # (N0, M)
    tails: list[np.ndarray]  # per modality (N_v - N0, M)

    @property
    def paired_count(self) -> int:
        return self.shared.shape[0]

    @property
    def num_codebooks(self) -> int:
        return self.shared.shape[1]

    def modality(self, v: int) -> np.ndarray:
        return np.concatenate([self.shared, self.tails[v]], axis=0)

    def slice(self, start: int, stop: int) -> "CodeMatrix":
        n0 = self.paired_count
        shared = self.shared[min(start, n0) : min(stop, n0)]
        tails = []
        for t in self.tails:
            lo, hi = max(start - n0, 0), max(stop - n0, 0)
            tails.append(t[min(lo, len(t)) : min(hi, len(t))])
        return CodeMatrix(shared, tails)

    def copy(self) -> "CodeMatrix":
        return CodeMatrix(self.shared.copy(), [t.copy() for t in self.tails])

    def equals(self, other: "CodeMatrix") -> bool:
        return np.array_equal(self.shared, other.shared) and all(
            np.array_equal(a, b) for a, b in zip(self.tails, other.tails)
        )

    @classmethod
    def concatenate(cls, parts: Sequence["CodeMatrix"]) -> "CodeMatrix":
        shared = np.concatenate([p.shared for p in parts], axis=0)
        n_mod = len(parts[0].tails)
        tails = [np.concatenate([p.tails[v] for p in parts], axis=0) for v in range(n_mod)]
        return cls(shared, tails)


@dataclass(frozen=True)
class NormQuantizer:
    """256 sorted bin centers for squared norms of decoded vectors."""

    centers: np.ndarray

    @classmethod
    def fit(cls, sq_norms: np.ndarray) -> "NormQuantizer":
        sq_norms = np.asarray(sq_norms, dtype=float)
        lo, hi = (float(sq_norms.min()), float(sq_norms.max())) if sq_norms.size else (0.0, 0.0)
        width = (hi - lo) / N_NORM_BINS
        return cls(lo + (np.arange(N_NORM_BINS) + 0.5) * width)

    @property
    def bin_width(self) -> float:
        return float(self.centers[1] - self.centers[0])

    def quantize(self, sq_norms: np.ndarray) -> np.ndarray:
        mids = 0.5 * (self.centers[1:] + self.centers[:-1])
        return np.searchsorted(mids, np.asarray(sq_norms, dtype=float), side="left").astype(
            np.uint8
        )


@dataclass
class CcqModel:
    config: CcqConfig
    mappings: list[np.ndarray]
    codebook: np.ndarray
    norm_quantizer: NormQuantizer
    training_log: list[float] = field(default_factory=list)
    # optional per-modality (mean, whitening matrix) applied before mapping
    preprocessors: list[tuple[np.ndarray, np.ndarray] | None] | None = None

    def fingerprint(self) -> int:
        """64-bit hash of all numeric model content and the config."""
        h = hashlib.blake2b(digest_size=8)
        h.update(repr(sorted(self.config.to_dict().items())).encode())
        for r in self.mappings:
            h.update(np.ascontiguousarray(r, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.codebook, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.norm_quantizer.centers, dtype="<f8").tobytes())
        h.update(np.asarray(self.training_log, dtype="<f8").tobytes())
        for pre in self.preprocessors or ():
            for a in pre:
                h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return int.from_bytes(h.digest(), "little")


def validate_config(config: CcqConfig, data: ModalDataset) -> list[str]:
    """Return a list of human-readable violations; empty means valid."""
    problems = []
    k = config.codewords_per_book
    if not _is_power_of_two(k):
        problems.append(f"K not a power of two (K={k})")
    if config.num_codebooks < 1:
        problems.append("M must be a positive integer")
    if config.num_modalities != data.num_modalities:
        problems.append(
            f"config expects {config.num_modalities} modalities, data has {data.num_modalities}"
        )
    if config.latent_dim is not None:
        if config.latent_dim < 1:
            problems.append("latent dim must be positive")
        elif data.dims and config.latent_dim > min(data.dims):
            problems.append(
                f"latent dim exceeds feature dim (D={config.latent_dim} > {min(data.dims)})"
            )
    w = config.modality_weights
    if w is not None:
        if len(w) != config.num_modalities:
            problems.append("one modality weight per modality is required")
        if any(not (x > 0) for x in w):
            problems.append("modality weights must be positive")
    if not data.sizes or max(data.sizes) == 0:
        problems.append("dataset has no rows")
    elif data.paired_count > min(data.sizes):
        problems.append("paired count exceeds a modality size")
    if config.max_outer_iters < 1 or (config.icm_sweeps is not None and config.icm_sweeps < 1):
        problems.append("iteration counts must be positive")
    if config.ridge < 0 or config.convergence_tol < 0:
        problems.append("ridge and convergence_tol must be nonnegative")
    return problems


def orthogonality_residual(r: np.ndarray) -> float:
    """``max |R^T R - I|``."""
    return float(np.max(np.abs(r.T @ r - np.eye(r.shape[1]))))
