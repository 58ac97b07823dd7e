"""Segment descriptors: global max pooling, whitening, attention.

Each 2-second segment is summarized by taking the channelwise spatial maximum
of every backbone layer, normalizing per layer, and concatenating (one vector
per segment).  Descriptors are then centered, decorrelated and rescaled by a
PCA transform fitted on a sample corpus, renormalized, and finally reweighted
by a learned attention direction so uninformative segments contribute less.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import audio
from .backbone import backbone_forward
from .errors import DataError, ModelError

log = logging.getLogger(__name__)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale rows to unit length; all-zero rows are left at zero."""
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def mac_pool(maps: list[np.ndarray]) -> np.ndarray:
    """(N, C_l, h, w) activation maps -> (N, sum C_l) unit descriptors.

    Spatial max per channel, then per-layer L2 normalization, then one more
    L2 normalization of the concatenation.  Layers whose activations are all
    zero for a segment keep a zero block (and are logged) instead of
    producing NaNs.
    """
    pooled = []
    for i, fmap in enumerate(maps):
        vec = fmap.max(axis=(2, 3)).astype(np.float64)
        dead = ~np.any(vec > 0, axis=1)
        if np.any(dead):
            log.debug("layer %d produced all-zero activations for %d segment(s)", i, int(dead.sum()))
        pooled.append(_normalize_rows(vec))
    return _normalize_rows(np.concatenate(pooled, axis=1))


# -- PCA whitening ----------------------------------------------------------


@dataclass(frozen=True)
class PcaWhitening:
    mean: np.ndarray  # (C,)
    matrix: np.ndarray  # (C_out, C); rows are scaled principal directions
    eps: float

    @property
    def in_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]


def fit_pca_whitening(samples: np.ndarray, out_dim: int | None = None, eps: float = 1e-10) -> PcaWhitening:
    """Fit a whitening transform on (N, C) sample vectors.

    Projected coordinates have zero mean and unit variance on the fitting
    sample (up to the `eps` regularizer on tiny eigenvalues).
    """
    if samples.ndim != 2:
        raise ValueError("expected a (N, C) sample matrix")
    n, c = samples.shape
    out_dim = c if out_dim is None else out_dim
    if not 1 <= out_dim <= c:
        raise ValueError(f"out_dim must be in [1, {c}], got {out_dim}")
    if n <= out_dim:
        raise DataError(f"whitening needs more than {out_dim} sample vectors, got {n}")
    x = samples.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dim]
    vecs = eigvecs[:, order]
    # Fix the sign of each direction so the fit is canonical.
    flips = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(out_dim)])
    flips[flips == 0] = 1.0
    vecs = vecs * flips
    scale = 1.0 / np.sqrt(np.maximum(eigvals[order], 0.0) + eps)
    return PcaWhitening(mean=mean, matrix=(vecs * scale).T, eps=eps)


def project(vectors: np.ndarray, pca: PcaWhitening) -> np.ndarray:
    """Center and whiten without the final renormalization."""
    single = vectors.ndim == 1
    v = np.atleast_2d(vectors).astype(np.float64)
    if v.shape[1] != pca.in_dim:
        raise ModelError(f"whitening expects {pca.in_dim}-dim vectors, got {v.shape[1]}")
    out = (v - pca.mean) @ pca.matrix.T
    return out[0] if single else out


def apply_whitening(vectors: np.ndarray, pca: PcaWhitening) -> np.ndarray:
    """Whiten and L2-normalize; zero vectors stay zero."""
    out = project(vectors, pca)
    if out.ndim == 1:
        norm = np.linalg.norm(out)
        return out / norm if norm > 0 else np.zeros_like(out)
    return _normalize_rows(out)


# -- Attention --------------------------------------------------------------


def attention_weights(h: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-row weights in [0, 1]: half of (1 + <row, u>) for unit rows."""
    scores = h @ u
    return np.clip(scores / 2.0 + 0.5, 0.0, 1.0)


def apply_attention(h: np.ndarray, u: np.ndarray) -> np.ndarray:
    return h * attention_weights(h, u)[:, None]


# -- Clip-level extraction ---------------------------------------------------

_BATCH_SEGMENTS = 16


@dataclass(frozen=True)
class VideoDescriptor:
    clip_id: str
    matrix: np.ndarray  # (n_segments, dim) float64
    variant: str  # "refined" or "mac"

    @property
    def n_segments(self) -> int:
        return self.matrix.shape[0]


def clip_mac_matrix(clip: audio.AudioClip, tensors: dict[str, np.ndarray], step_seconds: float) -> np.ndarray:
    """One pooled backbone descriptor per 2-second segment of the clip."""
    spec = audio.mel_spectrogram(clip)
    segmented = audio.segment_spectrogram(spec, step_seconds, clip.source_id)
    rows = []
    for start in range(0, segmented.n_segments, _BATCH_SEGMENTS):
        batch = segmented.segments[start : start + _BATCH_SEGMENTS]
        rows.append(mac_pool(backbone_forward(tensors, batch)))
    return np.concatenate(rows, axis=0)


def refine(mac_matrix: np.ndarray, pca: PcaWhitening, u: np.ndarray) -> np.ndarray:
    """Whiten and attention-weight a (X, C) descriptor matrix."""
    return apply_attention(apply_whitening(mac_matrix, pca), u)


def global_descriptor(mac_matrix: np.ndarray) -> np.ndarray:
    """Unit-normalized mean of the segment descriptors; used for mining."""
    mean = mac_matrix.mean(axis=0)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else np.zeros_like(mean)
