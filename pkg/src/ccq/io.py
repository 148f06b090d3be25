"""File formats, ZCA preprocessing and a synthetic multimodal generator.

All formats are little-endian with a 4-byte magic.

Feature file (``CCQF``)::

    magic | u16 version | u8 dtype (0=f32, 1=f64) | u8 has_labels
    u64 P | u64 N | u64 paired_count
    N*P values, one object after another
    [u64 L | N*L uint8 multi-hot labels]

Model file (``CCQ1``)::

    magic | u16 version | u32 len | config JSON
    u32 V | per modality: u64 P | u64 D | P*D f8
    u64 M | u64 K | u64 D | M*K*D f8
    256 f8 norm bin centers
    u64 T | T f8 training log
    u8 has_zca | per modality: u64 P | P f8 mean | P*P f8 transform
    u64 fingerprint

Codes file (``CCQC``)::

    magic | u16 version | i32 modality (-1 = joint) | u32 M | u32 K
    u64 N | u64 fingerprint | u32 bytes_per_point | N*bytes_per_point bytes
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .core import N_NORM_BINS, CcqConfig, CcqModel, ModalDataset, NormQuantizer
from .encoder import PackedCodes

FEATURE_MAGIC = b"CCQF"
MODEL_MAGIC = b"CCQ1"
CODES_MAGIC = b"CCQC"
VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("unexpected end of file")
    return b


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack("<" + fmt, _read(f, struct.calcsize("<" + fmt)))


def _array(f: BinaryIO, count: int, dtype: str) -> np.ndarray:
    dt = np.dtype(dtype)
    return np.frombuffer(_read(f, count * dt.itemsize), dtype=dt).copy()


def _magic(f: BinaryIO, magic: bytes):
    got = _read(f, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = _unpack(f, "H")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")


# --------------------------------------------------------------------------
# features


def dump_features(x: np.ndarray, paired_count: int = 0, labels=None, dtype="f8") -> bytes:
    x = np.asarray(x)
    code = {"f4": 0, "f8": 1}[dtype]
    parts = [
        FEATURE_MAGIC,
        struct.pack("<HBB", VERSION, code, labels is not None),
        struct.pack("<QQQ", x.shape[1], x.shape[0], paired_count),
        np.ascontiguousarray(x, dtype="<" + dtype).tobytes(),
    ]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        parts += [struct.pack("<Q", labels.shape[1]), np.ascontiguousarray(labels).tobytes()]
    return b"".join(parts)


def write_features(path, x, paired_count=0, labels=None, dtype="f8") -> None:
    atomic_write(path, dump_features(x, paired_count, labels, dtype))


def read_features(path) -> tuple[np.ndarray, int, np.ndarray | None]:
    """Return ``(features (N, P) float64, paired_count, labels or None)``."""
    with open(path, "rb") as f:
        _magic(f, FEATURE_MAGIC)
        code, has_labels = _unpack(f, "BB")
        p, n, paired = _unpack(f, "QQQ")
        dtype = {0: "<f4", 1: "<f8"}.get(code)
        if dtype is None:
            raise FormatError(f"unknown dtype code {code}")
        x = _array(f, n * p, dtype).reshape(n, p).astype(float)
        labels = None
        if has_labels:
            (n_labels,) = _unpack(f, "Q")
            labels = _array(f, n * n_labels, "u1").reshape(n, n_labels)
        if f.read(1):
            raise FormatError("trailing bytes after declared content")
    return x, int(paired), labels


# --------------------------------------------------------------------------
# model


def dump_model(model: CcqModel) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [MODEL_MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg]
    parts.append(struct.pack("<I", len(model.mappings)))
    for r in model.mappings:
        parts += [struct.pack("<QQ", *r.shape), np.ascontiguousarray(r, "<f8").tobytes()]
    parts += [struct.pack("<QQQ", *model.codebook.shape)]
    parts += [np.ascontiguousarray(model.codebook, "<f8").tobytes()]
    parts += [np.ascontiguousarray(model.norm_quantizer.centers, "<f8").tobytes()]
    log = np.asarray(model.training_log, dtype="<f8")
    parts += [struct.pack("<Q", log.size), log.tobytes()]
    pre = model.preprocessors
    parts.append(struct.pack("<B", pre is not None))
    if pre is not None:
        for mean, w in pre:
            parts += [struct.pack("<Q", mean.size), np.asarray(mean, "<f8").tobytes()]
            parts.append(np.ascontiguousarray(w, "<f8").tobytes())
    parts.append(struct.pack("<Q", model.fingerprint()))
    return b"".join(parts)


def save_model(model: CcqModel, path) -> None:
    atomic_write(path, dump_model(model))


def load_model(path) -> CcqModel:
    with open(path, "rb") as f:
        _magic(f, MODEL_MAGIC)
        (n,) = _unpack(f, "I")
        try:
            config = CcqConfig.from_dict(json.loads(_read(f, n)))
        except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise FormatError(f"unreadable config block: {exc}") from exc
        (v,) = _unpack(f, "I")
        mappings = []
        for _ in range(v):
            p, d = _unpack(f, "QQ")
            mappings.append(_array(f, p * d, "<f8").reshape(p, d))
        m, k, d = _unpack(f, "QQQ")
        codebook = _array(f, m * k * d, "<f8").reshape(m, k, d)
        centers = _array(f, N_NORM_BINS, "<f8")
        (t,) = _unpack(f, "Q")
        log = _array(f, t, "<f8").tolist()
        (has_pre,) = _unpack(f, "B")
        pre = None
        if has_pre:
            pre = []
            for _ in range(v):
                (p,) = _unpack(f, "Q")
                mean = _array(f, p, "<f8")
                pre.append((mean, _array(f, p * p, "<f8").reshape(p, p)))
        (stored,) = _unpack(f, "Q")
    model = CcqModel(config, mappings, codebook, NormQuantizer(centers), log, pre)
    if model.fingerprint() != stored:
        raise FormatError("model fingerprint does not match its content")
    return model


# --------------------------------------------------------------------------
# codes


def dump_codes(codes: PackedCodes) -> bytes:
    header = struct.pack(
        "<HiIIQQI",
        VERSION,
        codes.modality,
        codes.num_codebooks,
        codes.codewords_per_book,
        codes.count,
        codes.fingerprint,
        codes.bytes_per_point,
    )
    return CODES_MAGIC + header + np.ascontiguousarray(codes.data, np.uint8).tobytes()


def save_codes(codes: PackedCodes, path) -> None:
    atomic_write(path, dump_codes(codes))


def load_codes(path) -> PackedCodes:
    with open(path, "rb") as f:
        _magic(f, CODES_MAGIC)
        modality, m, k, n, fp, bpp = _unpack(f, "iIIQQI")
        data = _array(f, n * bpp, "u1").reshape(n, bpp)
        if f.read(1):
            raise FormatError("trailing bytes after declared content")
    codes = PackedCodes(modality, m, k, data, fp)
    if codes.bytes_per_point != bpp:
        raise FormatError("bytes per point inconsistent with M and K")
    return codes


# --------------------------------------------------------------------------
# preprocessing and synthetic data


def zca_whiten(x: np.ndarray, eps: float = 1e-9) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Zero-mean, identity-covariance rows; returns ``(whitened, (mean, W))``.

    Covariance uses the 1/N normalisation. ``eps`` is a ridge relative to the
    mean eigenvalue, so rank-deficient inputs still give a finite transform.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to ZCA")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x), 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    ridge = eps * max(float(evals.mean()), np.finfo(float).tiny)
    w = (evecs / np.sqrt(evals + ridge)) @ evecs.T
    return xc @ w, (mean, w)


def apply_preprocessor(x: np.ndarray, pre) -> np.ndarray:
    if pre is None:
        return np.asarray(x, dtype=float)
    mean, w = pre
    return (np.asarray(x, dtype=float) - mean) @ w


def generate_synthetic(
    clusters: int = 10,
    per_cluster: int = 500,
    dims: tuple[int, ...] = (64, 64),
    noise: float = 0.5,
    paired_fraction: float = 1.0,
    seed: int = 0,
) -> ModalDataset:
    """Clustered multimodal data with one-hot cluster labels.

    Every modality gets its own random cluster centers; object ``n`` belongs
    to the same cluster in all modalities. Cluster ``c`` owns
    ``per_cluster`` objects per modality. The first
    ``round(paired_fraction * N)`` rows are shared pairs; the remaining rows
    are shuffled independently per modality, so unpaired rows at the same
    position generally belong to different clusters.
    """
    rng = np.random.default_rng(seed)
    n = clusters * per_cluster
    n0 = int(round(paired_fraction * n))
    order = rng.permutation(np.repeat(np.arange(clusters), per_cluster))
    paired_ids, rest = order[:n0], order[n0:]
    feats, labels = [], []
    for p in dims:
        centers = rng.standard_normal((clusters, p))
        ids = np.concatenate([paired_ids, rng.permutation(rest)])
        x = centers[ids] + noise * rng.standard_normal((n, p))
        feats.append(x)
        labels.append(np.eye(clusters, dtype=np.uint8)[ids])
    return ModalDataset(feats, n0, labels)
