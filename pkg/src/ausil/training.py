"""Training of the attention direction and refinement network.

The backbone and whitening stay frozen.  Triplets (anchor, positive,
negative) are mined from annotated duplicate pairs using global clip
descriptors: a pair is trainable only when the anchor and positive are close
in global-descriptor space, and negatives are kept only when they are nearly
as close to the anchor as the positive (hard negatives).  The loss asks the
refined score of the positive pair to beat the negative pair by a margin,
plus a penalty on network outputs outside [-1, 1], which keeps the squashing
stage from saturating.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .errors import DataError, TrainingDivergedError
from .model import Model
from .seeds import stream
from .similarity import AUSIL_LAYERS, padded_size

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    triplets_per_epoch: int = 200
    learning_rate: float = 1e-3
    margin: float = 1.0  # gamma
    reg_weight: float = 0.1  # r
    step_seconds: float = 1.0  # t
    positive_threshold: float = 0.175
    negative_margin: float = 0.15  # d
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0 or self.reg_weight < 0 or self.learning_rate <= 0:
            raise ValueError("require margin > 0, reg_weight >= 0, learning_rate > 0")


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


# -- Scalar loss rules (the differentiable graph mirrors these) ---------------


def hinge_loss(cs_pos: float, cs_neg: float, margin: float) -> float:
    return max(0.0, cs_neg - cs_pos + margin)


def similarity_regularization(raw_maps: Iterable[np.ndarray]) -> float:
    """Total mass of refinement outputs outside [-1, 1], over both pairs."""
    total = 0.0
    for raw in raw_maps:
        total += float(np.sum(np.maximum(0.0, raw - 1.0)) + np.sum(np.maximum(0.0, -1.0 - raw)))
    return total


def total_loss(l_tr: float, l_reg: float, reg_weight: float) -> float:
    return l_tr + reg_weight * l_reg


# -- Mining -----------------------------------------------------------------


def _require_global(globals_map: dict[str, np.ndarray], clip_id: str) -> np.ndarray:
    try:
        return globals_map[clip_id]
    except KeyError:
        raise DataError(f"no global descriptor for clip {clip_id}") from None


def mine_positive_pairs(
    positives: dict[str, set[str]],
    globals_map: dict[str, np.ndarray],
    threshold: float,
) -> list[tuple[str, str]]:
    """Annotated pairs whose global descriptors are within `threshold`."""
    kept = []
    for anchor in sorted(positives):
        g_a = _require_global(globals_map, anchor)
        for positive in sorted(positives[anchor]):
            g_p = _require_global(globals_map, positive)
            if float(np.linalg.norm(g_a - g_p)) < threshold:
                kept.append((anchor, positive))
    return kept


def generate_triplets(
    pairs: list[tuple[str, str]],
    negative_pool: list[str],
    globals_map: dict[str, np.ndarray],
    positives: dict[str, set[str]],
    negative_margin: float,
) -> list[Triplet]:
    """All hard negatives per mined pair: D(a, n) < D(a, p) + margin.

    Clips connected to the anchor through the annotation graph are never used
    as negatives, even when the pool contains them.
    """
    parent_of: dict[str, str] = {}

    def find(a: str) -> str:
        root = a
        while parent_of.setdefault(root, root) != root:
            root = parent_of[root]
        while parent_of[a] != root:
            parent_of[a], a = root, parent_of[a]
        return root

    for query, dups in positives.items():
        for dup in dups:
            parent_of[find(query)] = find(dup)

    triplets: list[Triplet] = []
    pool = sorted(set(negative_pool))
    for anchor, positive in pairs:
        g_a = globals_map[anchor]
        d_pos = float(np.linalg.norm(g_a - globals_map[positive]))
        for negative in pool:
            if negative in (anchor, positive) or negative not in globals_map:
                continue
            if find(negative) == find(anchor):
                continue
            if float(np.linalg.norm(g_a - globals_map[negative])) < d_pos + negative_margin:
                triplets.append(Triplet(anchor, positive, negative))
    if not triplets:
        log.warning("triplet mining produced no hard negatives")
    return triplets


def mine_triplets(
    globals_map: dict[str, np.ndarray],
    positives: dict[str, set[str]],
    negative_pool: list[str],
    config: TrainConfig,
) -> list[Triplet]:
    pairs = mine_positive_pairs(positives, globals_map, config.positive_threshold)
    return generate_triplets(pairs, negative_pool, globals_map, positives, config.negative_margin)


# -- Differentiable scoring graph -------------------------------------------


def make_params(model: Model) -> dict[str, ad.Tensor]:
    """Trainable tensors: attention direction plus refinement network."""
    params = {"attention/u": ad.parameter(model.u, "attention/u")}
    for name, _, _, _ in AUSIL_LAYERS:
        for part in ("kernel", "bias"):
            key = f"ausil/{name}/{part}"
            params[key] = ad.parameter(model.tensors[key].astype(np.float64), key)
    return params


def _attend(h_const: ad.Tensor, u: ad.Tensor) -> ad.Tensor:
    scores = ad.matvec(h_const, u)
    weights = scores * 0.5 + 0.5
    return ad.scale_rows(h_const, weights)


def _refine_graph(s: ad.Tensor, params: dict[str, ad.Tensor]) -> ad.Tensor:
    x_dim, y_dim = s.shape
    s = ad.pad2d(s, padded_size(x_dim) - x_dim, padded_size(y_dim) - y_dim, -1.0)
    out = ad.reshape(s, (1, 1) + s.shape)
    for name, _, _, k in AUSIL_LAYERS:
        out = ad.conv2d(out, params[f"ausil/{name}/kernel"], params[f"ausil/{name}/bias"], padding=k // 2)
        if name == "conv4":
            break
        out = ad.relu(out)
        if name in ("conv1", "conv2"):
            out = ad.maxpool2d(out)
    return ad.reshape(out, out.shape[2:])


def _chamfer(raw: ad.Tensor) -> ad.Tensor:
    return ad.mean_all(ad.row_max(ad.hard_tanh(raw)))


def _out_of_range(raw: ad.Tensor) -> ad.Tensor:
    return ad.sum_all(ad.relu(raw - 1.0)) + ad.sum_all(ad.relu(-1.0 - raw))


@dataclass
class TripletLossParts:
    loss: ad.Tensor
    l_tr: float
    l_reg: float
    score_pos: float
    score_neg: float


def triplet_loss_graph(
    h_anchor: np.ndarray,
    h_positive: np.ndarray,
    h_negative: np.ndarray,
    params: dict[str, ad.Tensor],
    margin: float,
    reg_weight: float,
) -> TripletLossParts:
    """Margin loss on refined scores plus the out-of-range penalty."""
    u = params["attention/u"]
    anchor = _attend(ad.Tensor(h_anchor), u)
    raw_pos = _refine_graph(ad.matmul(anchor, ad.transpose(_attend(ad.Tensor(h_positive), u))), params)
    raw_neg = _refine_graph(ad.matmul(anchor, ad.transpose(_attend(ad.Tensor(h_negative), u))), params)
    cs_pos = _chamfer(raw_pos)
    cs_neg = _chamfer(raw_neg)
    l_tr = ad.relu(cs_neg - cs_pos + margin)
    l_reg = _out_of_range(raw_pos) + _out_of_range(raw_neg)
    loss = l_tr + l_reg * reg_weight
    return TripletLossParts(
        loss=loss, l_tr=l_tr.item(), l_reg=l_reg.item(), score_pos=cs_pos.item(), score_neg=cs_neg.item()
    )


# -- Optimizer ---------------------------------------------------------------


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)
    _t: int = 0

    def step(self, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray]) -> None:
        self._t += 1
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1**self._t)
            v_hat = v / (1.0 - self.beta2**self._t)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


# -- Epoch loop ---------------------------------------------------------------


def train(
    model: Model,
    h_matrices: dict[str, np.ndarray],
    globals_map: dict[str, np.ndarray],
    positives: dict[str, set[str]],
    negative_pool: list[str],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> Model:
    """Optimize attention and refinement tensors in place on mined triplets.

    `h_matrices` maps clip ids to whitened (pre-attention) descriptor
    matrices; `globals_map` to unit global descriptors for mining.
    """
    triplets = mine_triplets(globals_map, positives, negative_pool, config)
    if not triplets:
        raise DataError("no trainable triplets: annotated pairs are too far apart or no hard negatives exist")
    params = make_params(model)
    param_list = list(params.values())
    optimizer = Adam(config.learning_rate)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_lines = ["step\tl_tr\tl_reg\ttotal"]
    say = progress or (lambda msg: log.info("%s", msg))
    say(f"mined {len(triplets)} triplets from {len(positives)} annotated queries")

    global_step = 0
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, f"train/shuffle/{epoch}").permutation(len(triplets))
        order = order[: config.triplets_per_epoch] if config.triplets_per_epoch else order
        epoch_loss = 0.0
        for triplet_idx in order:
            t = triplets[int(triplet_idx)]
            parts = triplet_loss_graph(
                h_matrices[t.anchor], h_matrices[t.positive], h_matrices[t.negative],
                params, config.margin, config.reg_weight,
            )
            loss_value = parts.loss.item()
            global_step += 1
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {global_step}")
            grads = ad.backward(parts.loss, param_list)
            optimizer.step(params, grads)
            u = params["attention/u"]
            u.data /= np.linalg.norm(u.data)
            epoch_loss += loss_value
            log_lines.append(f"{global_step}\t{parts.l_tr:.6f}\t{parts.l_reg:.6f}\t{loss_value:.6f}")
        for name, p in params.items():
            model.tensors[name] = p.data.astype(np.float32)
        say(f"epoch {epoch}: mean loss {epoch_loss / max(1, len(order)):.6f} over {len(order)} triplets")
        if out_dir is not None:
            model.save(out_dir / f"ckpt_{epoch:03d}.bin")
    model.u = model.tensors["attention/u"].astype(np.float64)
    if out_dir is not None:
        (out_dir / "train_log.tsv").write_text("\n".join(log_lines) + "\n")
    return model
