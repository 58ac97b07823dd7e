"""The bundle of everything needed to turn audio into comparable descriptors.

A model file holds the frozen backbone, the fitted whitening transform, the
attention direction, and the refinement network, all as named float32
tensors.  The SHA-256 of the file identifies the model; indexes remember it
so that searching with a different model is rejected instead of silently
returning garbage.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import audio, features, similarity
from .backbone import BackboneConfig, infer_config, init_backbone
from .errors import ModelError
from .seeds import stream
from .weights import file_sha256, load_weights, save_weights


class Model:
    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors
        self.config: BackboneConfig = infer_config(tensors)
        similarity.check_refiner(tensors)
        for key in ("pca/mean", "pca/matrix", "pca/eps", "attention/u"):
            if key not in tensors:
                raise ModelError(f"model is missing tensor {key}")
        self.pca = features.PcaWhitening(
            mean=tensors["pca/mean"].astype(np.float64),
            matrix=tensors["pca/matrix"].astype(np.float64),
            eps=float(np.asarray(tensors["pca/eps"]).reshape(-1)[0]),
        )
        if self.pca.in_dim != self.config.mac_dim:
            raise ModelError(
                f"whitening input dim {self.pca.in_dim} does not match backbone output {self.config.mac_dim}"
            )
        self.u = tensors["attention/u"].astype(np.float64)
        if self.u.shape != (self.pca.out_dim,):
            raise ModelError(f"attention vector shape {self.u.shape} does not match whitening output")
        if tensors["ausil/conv1/kernel"].shape[1] != 1:
            raise ModelError("refinement network must take a single-channel matrix")
        self.sha256: str | None = None

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        model = cls(load_weights(path))
        model.sha256 = file_sha256(path)
        return model

    def save(self, path: str | Path) -> None:
        save_weights(path, self.tensors)
        self.sha256 = file_sha256(path)

    # -- extraction ----------------------------------------------------------

    def mac_matrix(self, clip: audio.AudioClip, step_seconds: float) -> np.ndarray:
        return features.clip_mac_matrix(clip, self.tensors, step_seconds)

    def descriptor(self, clip: audio.AudioClip, step_seconds: float, variant: str = "refined") -> features.VideoDescriptor:
        mac = self.mac_matrix(clip, step_seconds)
        return self.descriptor_from_mac(mac, clip.source_id, variant)

    def descriptor_from_mac(self, mac: np.ndarray, clip_id: str, variant: str = "refined") -> features.VideoDescriptor:
        if variant == "refined":
            matrix = features.refine(mac, self.pca, self.u)
        elif variant == "mac":
            matrix = mac
        else:
            raise ValueError(f"unknown descriptor variant: {variant}")
        return features.VideoDescriptor(clip_id=clip_id, matrix=matrix, variant=variant)


def build_model(backbone_tensors: dict[str, np.ndarray], pca: features.PcaWhitening, seed: int) -> Model:
    """Assemble a fresh model around a backbone and a fitted whitening."""
    u = stream(seed, "init/attention").normal(size=pca.out_dim)
    u /= np.linalg.norm(u)
    tensors = dict(backbone_tensors)
    tensors["pca/mean"] = pca.mean.astype(np.float32)
    tensors["pca/matrix"] = pca.matrix.astype(np.float32)
    tensors["pca/eps"] = np.float32(pca.eps)
    tensors["attention/u"] = u.astype(np.float32)
    tensors.update(similarity.init_refiner(stream(seed, "init/refiner")))
    return Model(tensors)


def new_backbone(config: BackboneConfig, seed: int) -> dict[str, np.ndarray]:
    return init_backbone(config, stream(seed, "init/backbone"))
