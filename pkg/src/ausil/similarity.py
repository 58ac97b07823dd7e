"""Pairwise clip similarity from segment descriptors.

Two clips with descriptor matrices Q (X, C) and P (Y, C) get a segment
similarity matrix S = Q P^T.  A small convolutional refinement network maps S
to a response map at quarter resolution, which is squashed into [-1, 1] and
reduced by a one-directional chamfer rule: the best match per query segment,
averaged over query segments.  The same chamfer rule applied directly to S
(no network) serves as the unrefined scoring mode.

S is padded to the next multiples of 4 with -1 (the lowest possible
similarity) before the network so the two pooling stages always see even
sizes; scores therefore never depend on how inputs were batched.
"""

from __future__ import annotations

import numpy as np

from .autodiff import conv2d_forward, maxpool2d_forward
from .errors import ModelError

# (layer, out channels, in channels, kernel size); 3x3 layers use ReLU and
# padding 1, the final 1x1 layer is linear.
AUSIL_LAYERS = (
    ("conv1", 32, 1, 3),
    ("conv2", 64, 32, 3),
    ("conv3", 128, 64, 3),
    ("conv4", 1, 128, 1),
)


def init_refiner(rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-initialized refinement network tensors."""
    tensors: dict[str, np.ndarray] = {}
    for name, c_out, c_in, k in AUSIL_LAYERS:
        std = np.sqrt(2.0 / (c_in * k * k))
        tensors[f"ausil/{name}/kernel"] = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)
        tensors[f"ausil/{name}/bias"] = np.zeros(c_out, dtype=np.float32)
    return tensors


def check_refiner(tensors: dict[str, np.ndarray]) -> None:
    for name, c_out, c_in, k in AUSIL_LAYERS:
        key = f"ausil/{name}/kernel"
        if key not in tensors:
            raise ModelError(f"model is missing tensor {key}")
        if tensors[key].shape != (c_out, c_in, k, k):
            raise ModelError(f"tensor {key} has unexpected shape {tensors[key].shape}")


def similarity_matrix(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """(X, C) x (Y, C) -> (X, Y) matrix of segment dot products."""
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ValueError(f"descriptor dims do not match: {q.shape} vs {p.shape}")
    return q @ p.T


def padded_size(n: int) -> int:
    return ((n + 3) // 4) * 4


def pad_matrix(s: np.ndarray) -> np.ndarray:
    """Pad to multiples of 4 with -1 so pooling divides evenly."""
    x, y = s.shape
    xp, yp = padded_size(x), padded_size(y)
    if (xp, yp) == (x, y):
        return s
    out = np.full((xp, yp), -1.0, dtype=s.dtype)
    out[:x, :y] = s
    return out


def refine_forward(s_batch: np.ndarray, tensors: dict[str, np.ndarray]) -> np.ndarray:
    """Run padded similarity matrices (N, X, Y) through the network.

    Returns the raw (pre-squash) response maps (N, X/4, Y/4).  X and Y must
    be multiples of 4.
    """
    if s_batch.ndim != 3:
        raise ValueError("expected a batch of similarity matrices")
    n, x, y = s_batch.shape
    if x % 4 or y % 4:
        raise ValueError("similarity matrices must be padded to multiples of 4")
    out = s_batch[:, None, :, :].astype(np.float64)
    for name, _, _, k in AUSIL_LAYERS:
        kernel = tensors[f"ausil/{name}/kernel"].astype(np.float64)
        bias = tensors[f"ausil/{name}/bias"].astype(np.float64)
        out = conv2d_forward(out, kernel, bias, padding=k // 2)
        if name == "conv4":
            break
        np.maximum(out, 0.0, out=out)
        if name in ("conv1", "conv2"):
            out, _ = maxpool2d_forward(out)
    return out[:, 0]


def chamfer_from_map(response: np.ndarray) -> float:
    """Squash into [-1, 1], take the best match per row, average."""
    squashed = np.clip(response, -1.0, 1.0)
    return float(np.mean(squashed.max(axis=1), dtype=np.float64))


def refined_similarity(s: np.ndarray, tensors: dict[str, np.ndarray]) -> float:
    return chamfer_from_map(refine_forward(pad_matrix(s)[None], tensors)[0])


def chamfer_similarity(s: np.ndarray) -> float:
    """Chamfer rule directly on a similarity matrix (no refinement)."""
    return chamfer_from_map(s)


def video_similarity(q: np.ndarray, p: np.ndarray, tensors: dict[str, np.ndarray] | None = None, refined: bool = True) -> float:
    """Score two descriptor matrices; refined mode needs network tensors."""
    s = similarity_matrix(q, p)
    if refined:
        if tensors is None:
            raise ValueError("refined scoring requires network tensors")
        return refined_similarity(s, tensors)
    return chamfer_similarity(s)


def score_many(
    q: np.ndarray,
    candidates: list[tuple[str, np.ndarray]],
    tensors: dict[str, np.ndarray] | None = None,
    refined: bool = True,
) -> dict[str, float]:
    """Score one query against many candidates.

    Refined scoring batches candidates whose padded similarity matrices share
    a shape; each matrix is padded exactly as it would be alone, so batching
    never changes a score.
    """
    scores: dict[str, float] = {}
    if not refined:
        for clip_id, p in candidates:
            scores[clip_id] = chamfer_similarity(similarity_matrix(q, p))
        return scores
    if tensors is None:
        raise ValueError("refined scoring requires network tensors")
    groups: dict[int, list[tuple[str, np.ndarray]]] = {}
    for clip_id, p in candidates:
        groups.setdefault(padded_size(p.shape[0]), []).append((clip_id, p))
    for yp, members in groups.items():
        batch = np.stack([pad_matrix(similarity_matrix(q, p)) for _, p in members])
        response = refine_forward(batch, tensors)
        for (clip_id, _), rmap in zip(members, response):
            scores[clip_id] = chamfer_from_map(rmap)
    return scores
