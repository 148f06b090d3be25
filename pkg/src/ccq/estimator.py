"""scikit-learn style front end for the trainer, encoder and searcher."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import CcqConfig, ModalDataset
from .encoder import JOINT, PackedCodes, encode_joint, encode_points
from .io import apply_preprocessor, zca_whiten
from .search import build_query_table, search
from .trainer import decode, train


class CompositeCorrelationQuantizer(BaseEstimator):
    """Learn per-modality orthogonal mappings and a shared additive quantizer.

    Parameters
    ----------
    n_codebooks : int, default=4
        Number of codebooks ``M``.
    n_codewords : int, default=256
        Codewords per codebook ``K`` (a power of two). Codes take
        ``M * log2(K)`` bits.
    latent_dim : int or None, default=None
        Shared latent dimension; ``None`` uses ``min(min feature dim, code bits)``.
    modality_weights : sequence of float or None, default=None
        Per-modality loss weights, all ones when ``None``.
    max_iter : int, default=30
        Maximum outer iterations.
    icm_sweeps : int or None, default=None
        Sweeps per code update; 3 for ICM and 1 for greedy when ``None``.
    encode_mode : {"icm", "greedy"}, default="icm"
    ridge : float, default=1e-6
        Relative ridge on the codebook normal equations.
    tol : float, default=1e-4
        Stop when the relative objective decrease falls below ``tol``.
    batch_size : int or None, default=None
        Stream rows in chunks of this size; ``None`` processes all rows at once.
    reseed_unused : bool, default=True
        Move unused codewords onto badly reconstructed points.
    paired_warm_start : bool, default=True
        With semi-paired input, fit the paired rows first and start from there.
    zca : bool, default=False
        Whiten every modality before training; the transform is kept and
        applied to all later inputs.
    random_state : int, default=0

    Attributes
    ----------
    model_ : CcqModel
    codes_ : CodeMatrix
        Training codes; paired rows share one code across modalities.
    mappings_ : list of ndarray of shape (P_v, D)
    codebook_ : ndarray of shape (M, K, D)
    training_log_ : list of float
    """

    def __init__(
        self,
        n_codebooks=4,
        n_codewords=256,
        latent_dim=None,
        modality_weights=None,
        max_iter=30,
        icm_sweeps=None,
        encode_mode="icm",
        ridge=1e-6,
        tol=1e-4,
        batch_size=None,
        reseed_unused=True,
        paired_warm_start=True,
        zca=False,
        random_state=0,
    ):
        self.n_codebooks = n_codebooks
        self.n_codewords = n_codewords
        self.latent_dim = latent_dim
        self.modality_weights = modality_weights
        self.max_iter = max_iter
        self.icm_sweeps = icm_sweeps
        self.encode_mode = encode_mode
        self.ridge = ridge
        self.tol = tol
        self.batch_size = batch_size
        self.reseed_unused = reseed_unused
        self.paired_warm_start = paired_warm_start
        self.zca = zca
        self.random_state = random_state

    def _config(self, n_modalities: int) -> CcqConfig:
        return CcqConfig(
            num_modalities=n_modalities,
            num_codebooks=self.n_codebooks,
            codewords_per_book=self.n_codewords,
            latent_dim=self.latent_dim,
            modality_weights=self.modality_weights,
            max_outer_iters=self.max_iter,
            icm_sweeps=self.icm_sweeps,
            encode_mode=self.encode_mode,
            ridge=self.ridge,
            convergence_tol=self.tol,
            seed=self.random_state,
            reseed_unused=self.reseed_unused,
            paired_warm_start=self.paired_warm_start,
        )

    def fit(self, X, y=None, paired_count=None):
        """Fit on one array per modality.

        ``X`` is a list of ``(N_v, P_v)`` arrays (a single 2-D array means one
        modality). The first ``paired_count`` rows of every array describe
        the same objects. When ``paired_count`` is omitted, equal-length
        modalities are taken as fully paired and anything else as unpaired.
        """
        xs = _as_modalities(X)
        if paired_count is None:
            sizes = {len(x) for x in xs}
            paired_count = len(xs[0]) if len(xs) > 1 and len(sizes) == 1 else 0
        pre = None
        if self.zca:
            pre = []
            for i, x in enumerate(xs):
                xs[i], transform = zca_whiten(x)
                pre.append(transform)
        data = ModalDataset(xs, paired_count)
        model, codes = train(data, self._config(len(xs)), self.batch_size)
        model.preprocessors = pre
        self.model_ = model
        self.codes_ = codes
        self.feature_dims_ = data.dims
        return self

    @property
    def mappings_(self):
        check_is_fitted(self, "model_")
        return self.model_.mappings

    @property
    def codebook_(self):
        check_is_fitted(self, "model_")
        return self.model_.codebook

    @property
    def training_log_(self):
        check_is_fitted(self, "model_")
        return self.model_.training_log

    def _prepare(self, X, modality: int) -> np.ndarray:
        check_is_fitted(self, "model_")
        x = check_array(X)
        if x.shape[1] != self.feature_dims_[modality]:
            raise ValueError(
                f"modality {modality} expects {self.feature_dims_[modality]} features, "
                f"got {x.shape[1]}"
            )
        pre = self.model_.preprocessors
        return apply_preprocessor(x, pre[modality] if pre else None)

    def latent(self, X, modality: int = 0) -> np.ndarray:
        """Map rows into the shared latent space."""
        return self._prepare(X, modality) @ self.model_.mappings[modality]

    def transform(self, X, modality: int = 0) -> np.ndarray:
        """Codeword indices ``(N, M)`` for rows of one modality."""
        return encode_points(self._prepare(X, modality), self.model_, modality)[0]

    def inverse_transform(self, codes) -> np.ndarray:
        """Latent reconstructions of codes."""
        check_is_fitted(self, "model_")
        return decode(self.model_.codebook, np.asarray(codes))

    def encode(self, X, modality: int = 0) -> PackedCodes:
        codes, nb = encode_points(self._prepare(X, modality), self.model_, modality)
        return PackedCodes.from_codes(codes, nb, self.model_, modality)

    def encode_joint(self, Xs: Sequence) -> PackedCodes:
        """Fused codes for paired objects, e.g. an image-text database."""
        xs = [self._prepare(x, v) for v, x in enumerate(_as_modalities(Xs))]
        codes, nb = encode_joint(xs, self.model_)
        return PackedCodes.from_codes(codes, nb, self.model_, JOINT)

    def kneighbors(self, Q, database: PackedCodes, n_neighbors: int = 50, modality: int = 0):
        """AQD scores and indices of the nearest database codes per query row."""
        q = self._prepare(Q, modality)
        scores, indices = [], []
        for row in q:
            res = search(build_query_table(row, self.model_, modality), database, n_neighbors)
            scores.append(res.scores)
            indices.append(res.indices)
        return np.array(scores), np.array(indices)

    def score(self, X, y=None, modality: int = 0) -> float:
        """Negative mean squared reconstruction error of one modality."""
        x = self._prepare(X, modality)
        codes = encode_points(x, self.model_, modality)[0]
        recon = decode(self.model_.codebook, codes) @ self.model_.mappings[modality].T
        return -float(((x - recon) ** 2).sum(axis=1).mean())


def _as_modalities(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_array(X)]
    return [check_array(x) for x in X]

