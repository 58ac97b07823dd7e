"""Audio near-duplicate detection: learned similarity scoring plus classical
fingerprinting baselines, with a synthetic-corpus evaluation harness."""

from .audio import AudioClip, MelSpectrogram, load_audio, mel_spectrogram, resample, speed_transform
from .errors import AusilError, DataError, ModelError, TrainingDivergedError
from .model import Model, build_model, new_backbone
from .similarity import chamfer_similarity, refined_similarity, similarity_matrix, video_similarity

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "AusilError",
    "DataError",
    "MelSpectrogram",
    "Model",
    "ModelError",
    "TrainingDivergedError",
    "build_model",
    "chamfer_similarity",
    "load_audio",
    "mel_spectrogram",
    "new_backbone",
    "refined_similarity",
    "resample",
    "similarity_matrix",
    "speed_transform",
    "video_similarity",
]
