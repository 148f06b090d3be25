"""Out-of-sample encoding against a frozen model, plus the packed code format.

A packed point is ``ceil(M * log2(K) / 8)`` bytes of sub-codes followed by
one norm byte. Sub-code ``m`` occupies bits ``[m*log2(K), (m+1)*log2(K))``
in little-endian bit order, so with ``K = 256`` every sub-code is one byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CcqModel
from .trainer import decode, encode

JOINT = -1  # modality tag of databases encoded from paired objects


def _bits(k: int) -> int:
    if k < 2 or k & (k - 1):
        raise ValueError(f"K={k} is not a power of two")
    return k.bit_length() - 1


def code_bytes(n_books: int, k: int) -> int:
    return -(-n_books * _bits(k) // 8)


def map_to_latent(x: np.ndarray, model: CcqModel, v: int) -> np.ndarray:
    """``R^v^T x`` for one point ``(P,)`` or a batch ``(N, P)``."""
    x = np.asarray(x, dtype=float)
    r = model.mappings[v]
    if x.shape[-1] != r.shape[0]:
        raise ValueError(f"modality {v} expects {r.shape[0]} features, got {x.shape[-1]}")
    return x @ r


def encode_points(x: np.ndarray, model: CcqModel, v: int) -> tuple[np.ndarray, np.ndarray]:
    """Codes ``(N, M)`` and norm bytes ``(N,)`` for rows of one modality."""
    z = np.atleast_2d(map_to_latent(x, model, v))
    codes = encode(z, model.codebook, model.config)
    return codes, norm_bytes(model, codes)


def encode_point(x: np.ndarray, model: CcqModel, v: int) -> tuple[np.ndarray, int]:
    codes, nb = encode_points(np.atleast_2d(x), model, v)
    return codes[0], int(nb[0])


def encode_joint(xs: Sequence[np.ndarray], model: CcqModel) -> tuple[np.ndarray, np.ndarray]:
    """One fused code per paired object from all of its modalities.

    Row ``n`` of every array in ``xs`` must describe the same object.
    """
    if len(xs) != len(model.mappings):
        raise ValueError("joint encoding needs every modality")
    zs = [np.atleast_2d(map_to_latent(x, model, v)) for v, x in enumerate(xs)]
    if len({z.shape[0] for z in zs}) != 1:
        raise ValueError("joint encoding needs the same number of rows per modality")
    codes = encode(zs, model.codebook, model.config, weights=model.config.weights)
    return codes, norm_bytes(model, codes)


def norm_bytes(model: CcqModel, codes: np.ndarray) -> np.ndarray:
    sq = (decode(model.codebook, codes) ** 2).sum(-1)
    return model.norm_quantizer.quantize(sq)


def pack(codes: np.ndarray, norms: np.ndarray, k: int) -> np.ndarray:
    """Pack ``(N, M)`` indices and ``(N,)`` norm bytes into ``(N, bytes_per_point)`` uint8."""
    codes = np.atleast_2d(np.asarray(codes))
    norms = np.atleast_1d(np.asarray(norms))
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise ValueError(f"code index out of range [0, {k})")
    if norms.size and (norms.min() < 0 or norms.max() > 255):
        raise ValueError("norm byte out of range")
    n, m = codes.shape
    b = _bits(k)
    bits = (codes[:, :, None].astype(np.int64) >> np.arange(b)) & 1  # (N, M, b) LSB first
    bits = bits.reshape(n, m * b).astype(np.uint8)
    nbytes = code_bytes(m, k)
    padded = np.zeros((n, nbytes * 8), dtype=np.uint8)
    padded[:, : m * b] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.concatenate([packed, norms.astype(np.uint8)[:, None]], axis=1)


def unpack(buf: np.ndarray, n_books: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    buf = np.atleast_2d(np.asarray(buf, dtype=np.uint8))
    b = _bits(k)
    nbytes = code_bytes(n_books, k)
    if buf.shape[1] != nbytes + 1:
        raise ValueError(f"expected {nbytes + 1} bytes per point, got {buf.shape[1]}")
    bits = np.unpackbits(buf[:, :nbytes], axis=1, bitorder="little")[:, : n_books * b]
    bits = bits.reshape(-1, n_books, b).astype(np.int64)
    codes = (bits << np.arange(b)).sum(-1)
    return codes, buf[:, nbytes].copy()


@dataclass
class PackedCodes:
    """Byte-packed database codes tied to the model that produced them."""

    modality: int
    num_codebooks: int
    codewords_per_book: int
    data: np.ndarray  # (N, bytes_per_point) uint8
    fingerprint: int

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def bytes_per_point(self) -> int:
        return code_bytes(self.num_codebooks, self.codewords_per_book) + 1

    def unpack(self) -> tuple[np.ndarray, np.ndarray]:
        return unpack(self.data, self.num_codebooks, self.codewords_per_book)

    @classmethod
    def from_codes(cls, codes, norms, model: CcqModel, modality: int) -> "PackedCodes":
        cfg = model.config
        data = pack(codes, norms, cfg.codewords_per_book)
        return cls(modality, cfg.num_codebooks, cfg.codewords_per_book, data, model.fingerprint())


def encode_database(x: np.ndarray, model: CcqModel, v: int) -> PackedCodes:
    codes, nb = encode_points(x, model, v)
    return PackedCodes.from_codes(codes, nb, model, v)


def encode_joint_database(xs: Sequence[np.ndarray], model: CcqModel) -> PackedCodes:
    codes, nb = encode_joint(xs, model)
    return PackedCodes.from_codes(codes, nb, model, JOINT)
