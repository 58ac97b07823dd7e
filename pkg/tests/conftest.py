"""Shared fixtures.

The expensive artifacts (synthetic corpora, descriptor extraction, the
trained model) are built once per session and shared between the unit tests
and the acceptance suite.  Everything derives from fixed seeds, so fixture
reuse cannot leak state between tests.
"""

from __future__ import annotations

import numpy as np
import pytest

from ausil import audio, baselines, corpus, features, training
from ausil.backbone import BackboneConfig, backbone_forward
from ausil.model import Model, build_model, new_backbone

# -- acceptance criterion reporting ---------------------------------------------

CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    """Log one acceptance-criterion verdict and fail the test if not met."""
    CRITERIA.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}{suffix}")


# -- small shared artifacts -------------------------------------------------------


@pytest.fixture(scope="session")
def session_tmp(tmp_path_factory):
    return tmp_path_factory.mktemp("shared")


@pytest.fixture(scope="session")
def small_corpus(session_tmp):
    recipe = corpus.SyntheticRecipe(
        seed=11, references=8, queries=3, duplicates_per_query=2, distractors=6
    )
    return corpus.synth_corpus(recipe, session_tmp / "small")


@pytest.fixture(scope="session")
def small_clean_corpus(session_tmp):
    recipe = corpus.SyntheticRecipe(
        seed=11, references=8, queries=3, duplicates_per_query=2, distractors=6,
        min_transforms=0, max_transforms=0,
    )
    return corpus.synth_corpus(recipe, session_tmp / "small_clean")


@pytest.fixture(scope="session")
def backbone_tensors():
    return new_backbone(BackboneConfig.desk_scale(), 0)


@pytest.fixture(scope="session")
def small_model(small_corpus, backbone_tensors, session_tmp):
    """Model with whitening fitted on the small corpus (64 whitened dims)."""
    macs = [
        features.clip_mac_matrix(audio.load_audio(small_corpus.path(cid)), backbone_tensors, 1.0)
        for cid in sorted(small_corpus.ids())
    ]
    pca = features.fit_pca_whitening(np.concatenate(macs, axis=0), out_dim=64)
    model = build_model(backbone_tensors, pca, 0)
    model.save(session_tmp / "small_model.bin")
    return model


# -- desk-scale artifacts (acceptance) --------------------------------------------


def extract_corpus(manifest: corpus.DatasetManifest, backbone: dict[str, np.ndarray]):
    """One pass over the corpus audio: MAC matrices plus all fingerprints."""
    macs: dict[str, np.ndarray] = {}
    fps = {"constellation": {}, "slides": {}, "tiles": {}}
    for cid in sorted(manifest.ids()):
        clip = audio.load_audio(manifest.path(cid))
        spec = audio.mel_spectrogram(clip)
        segmented = audio.segment_spectrogram(spec, 1.0, cid)
        rows = [
            features.mac_pool(backbone_forward(backbone, segmented.segments[s : s + 16]))
            for s in range(0, segmented.n_segments, 16)
        ]
        macs[cid] = np.concatenate(rows, axis=0)
        for method in fps:
            fps[method][cid] = baselines.fingerprint_spectrogram(spec, method)
    return macs, fps


@pytest.fixture(scope="session")
def default_corpus(session_tmp):
    return corpus.synth_corpus(corpus.SyntheticRecipe(seed=0), session_tmp / "default")


@pytest.fixture(scope="session")
def clean_corpus(session_tmp):
    recipe = corpus.SyntheticRecipe(seed=0, min_transforms=0, max_transforms=0)
    return corpus.synth_corpus(recipe, session_tmp / "clean")


@pytest.fixture(scope="session")
def default_reps(default_corpus, backbone_tensors):
    return extract_corpus(default_corpus, backbone_tensors)


@pytest.fixture(scope="session")
def clean_reps(clean_corpus, backbone_tensors):
    return extract_corpus(clean_corpus, backbone_tensors)


@pytest.fixture(scope="session")
def desk_model(default_reps, backbone_tensors, session_tmp):
    """Untrained model whose whitening is fitted on the default corpus."""
    macs, _ = default_reps
    rows = np.concatenate([macs[cid] for cid in sorted(macs)], axis=0)
    pca = features.fit_pca_whitening(rows)
    model = build_model(backbone_tensors, pca, 0)
    model.save(session_tmp / "model_init.bin")
    return model


@pytest.fixture(scope="session")
def trained_model(desk_model, default_corpus, default_reps, session_tmp):
    """Model trained on the default corpus with the stock recipe.

    This is criterion 6's training run; its wall time is reported there.
    """
    import time

    macs, _ = default_reps
    model = Model({name: tensor.copy() for name, tensor in desk_model.tensors.items()})
    h_matrices = {cid: features.apply_whitening(mac, model.pca) for cid, mac in macs.items()}
    globals_map = {cid: features.global_descriptor(mac) for cid, mac in macs.items()}
    positives = {q: set(d) for q, d in default_corpus.positives.items() if d}
    started = time.time()
    training.train(
        model,
        h_matrices,
        globals_map,
        positives,
        default_corpus.searchable(),
        training.TrainConfig(seed=0),
        out_dir=session_tmp / "train_run",
    )
    elapsed = time.time() - started
    model.save(session_tmp / "model_trained.bin")
    return model, elapsed
