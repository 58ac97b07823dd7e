"""Persistent stores, index building, search, and evaluation orchestration.

An index directory holds `index.json` (method, step, descriptor variant,
model hash) plus one binary store: a feature store for learned descriptors
or a fingerprint database for the classical methods.  Searching with a model
whose hash differs from the one recorded at indexing time is refused.

Binary layouts are little-endian throughout and documented in
docs/formats.md; stores round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import baselines
from .audio import AudioClip, load_audio, mel_spectrogram, speed_transform
from .corpus import DatasetManifest
from .errors import DataError, ModelError
from .evaluation import EvalReport, average_precision, complete_ranking, rank_candidates
from .model import Model
from .similarity import score_many

METHODS = ("ausil", "constellation", "slides", "tiles")
AUSIL_VARIANTS = ("cnn", "raw", "mac")

FEATURE_MAGIC = b"AUFS"
FINGERPRINT_MAGIC = b"AUFP"
STORE_VERSION = 1

WORKERS_ENV = "AUSIL_WORKERS"


def worker_count() -> int:
    value = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def map_ordered(fn: Callable, items: list, workers: int | None = None) -> list:
    """Apply `fn` across items with a bounded pool; results keep input order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- Feature store ------------------------------------------------------------


def _write_str(blob: bytearray, text: str) -> None:
    encoded = text.encode("utf-8")
    blob += struct.pack("<I", len(encoded))
    blob += encoded


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob, self.pos, self.label = blob, 0, label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"truncated store: {self.label}")
        piece = self.blob[self.pos : self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def write_feature_store(
    path: str | Path,
    records: list[tuple[str, np.ndarray]],
    model_sha256: str,
    variant: str,
    step_seconds: float,
) -> None:
    blob = bytearray()
    blob += FEATURE_MAGIC
    blob += struct.pack("<I", STORE_VERSION)
    _write_str(blob, model_sha256)
    _write_str(blob, variant)
    blob += struct.pack("<d", step_seconds)
    blob += struct.pack("<I", len(records))
    for clip_id, matrix in records:
        data = np.ascontiguousarray(matrix, dtype="<f4")
        if data.ndim != 2:
            raise ValueError(f"descriptor for {clip_id} is not a matrix")
        _write_str(blob, clip_id)
        blob += struct.pack("<II", data.shape[0], data.shape[1])
        blob += data.tobytes()
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_feature_store(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != FEATURE_MAGIC:
        raise DataError(f"not a feature store: {path}")
    if r.u32() != STORE_VERSION:
        raise DataError(f"unsupported feature store version: {path}")
    meta = {"model_sha256": r.string(), "variant": r.string(), "step_seconds": r.f64()}
    count = r.u32()
    features: dict[str, np.ndarray] = {}
    for _ in range(count):
        clip_id = r.string()
        x, c = r.u32(), r.u32()
        features[clip_id] = np.frombuffer(r.take(4 * x * c), dtype="<f4").reshape(x, c).astype(np.float64)
    return meta, features


# -- Fingerprint database -------------------------------------------------------


def write_fingerprint_db(path: str | Path, method: str, records: list[tuple[str, object]]) -> None:
    blob = bytearray()
    blob += FINGERPRINT_MAGIC
    blob += struct.pack("<I", STORE_VERSION)
    _write_str(blob, method)
    blob += struct.pack("<I", len(records))
    for clip_id, fp in records:
        _write_str(blob, clip_id)
        if method == "constellation":
            entries = np.ascontiguousarray(fp.entries, dtype="<u4")
            blob += struct.pack("<I", entries.shape[0])
            blob += entries.tobytes()
        elif method == "slides":
            profiles = np.ascontiguousarray(fp.profiles, dtype="<i4")
            blob += struct.pack("<II", profiles.shape[0], profiles.shape[1])
            blob += profiles.tobytes()
        elif method == "tiles":
            positions = np.ascontiguousarray(fp.positions, dtype="<i4")
            blob += struct.pack("<II", positions.shape[0], positions.shape[1])
            blob += positions.tobytes()
            blob += np.ascontiguousarray(fp.occupancy, dtype="<i4").tobytes()
        else:
            raise ValueError(f"unknown fingerprint method: {method}")
    if method == "constellation":
        blob += _packed_inverted_index(make_inverted_index(records))
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


@dataclass
class InvertedIndex:
    hashes: np.ndarray  # sorted unique hashes
    starts: np.ndarray  # posting offsets, len(hashes) + 1
    clips: np.ndarray  # posting clip indices
    times: np.ndarray  # posting anchor times
    clip_ids: list[str]


def make_inverted_index(records: list[tuple[str, baselines.ConstellationFingerprint]]) -> InvertedIndex:
    """hash -> (clip index, anchor time) postings over many fingerprints."""
    clip_ids = [cid for cid, _ in records]
    rows = []
    for clip_index, (_, fp) in enumerate(records):
        if fp.entries.shape[0]:
            rows.append(
                np.column_stack(
                    [
                        fp.entries[:, 0].astype(np.uint32),
                        np.full(fp.entries.shape[0], clip_index, dtype=np.uint32),
                        fp.entries[:, 1].astype(np.uint32),
                    ]
                )
            )
    if not rows:
        empty = np.zeros(0, dtype=np.uint32)
        return InvertedIndex(empty, np.zeros(1, dtype=np.int64), empty.copy(), empty.copy(), clip_ids)
    table = np.concatenate(rows)
    table = table[np.lexsort((table[:, 2], table[:, 1], table[:, 0]))]
    hashes, first = np.unique(table[:, 0], return_index=True)
    starts = np.append(first, table.shape[0]).astype(np.int64)
    return InvertedIndex(
        hashes=hashes.astype(np.uint32),
        starts=starts,
        clips=table[:, 1].copy(),
        times=table[:, 2].copy(),
        clip_ids=clip_ids,
    )


def _packed_inverted_index(inverted: InvertedIndex) -> bytes:
    blob = bytearray()
    blob += struct.pack("<I", inverted.hashes.shape[0])
    for i, h in enumerate(inverted.hashes):
        start, stop = int(inverted.starts[i]), int(inverted.starts[i + 1])
        blob += struct.pack("<II", int(h), stop - start)
        postings = np.column_stack([inverted.clips[start:stop], inverted.times[start:stop]])
        blob += np.ascontiguousarray(postings, dtype="<u4").tobytes()
    return bytes(blob)


def read_fingerprint_db(path: str | Path) -> tuple[str, dict[str, object], InvertedIndex | None]:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != FINGERPRINT_MAGIC:
        raise DataError(f"not a fingerprint database: {path}")
    if r.u32() != STORE_VERSION:
        raise DataError(f"unsupported fingerprint database version: {path}")
    method = r.string()
    count = r.u32()
    records: dict[str, object] = {}
    clip_ids: list[str] = []
    for _ in range(count):
        clip_id = r.string()
        clip_ids.append(clip_id)
        if method == "constellation":
            n = r.u32()
            entries = np.frombuffer(r.take(8 * n), dtype="<u4").reshape(n, 2)
            records[clip_id] = baselines.ConstellationFingerprint(entries=entries.copy())
        elif method == "slides":
            n, dim = r.u32(), r.u32()
            profiles = np.frombuffer(r.take(4 * n * dim), dtype="<i4").reshape(n, dim)
            records[clip_id] = baselines.SlidesFingerprint(profiles=profiles.copy())
        elif method == "tiles":
            n, k = r.u32(), r.u32()
            positions = np.frombuffer(r.take(4 * n * k), dtype="<i4").reshape(n, k)
            occupancy = np.frombuffer(r.take(4 * n), dtype="<i4")
            records[clip_id] = baselines.TilesFingerprint(positions=positions.copy(), occupancy=occupancy.copy())
        else:
            raise DataError(f"unknown fingerprint method in store: {method}")
    inverted = None
    if method == "constellation":
        n_hashes = r.u32()
        hashes = np.zeros(n_hashes, dtype=np.uint32)
        starts = np.zeros(n_hashes + 1, dtype=np.int64)
        clips_parts = []
        times_parts = []
        for i in range(n_hashes):
            hashes[i] = r.u32()
            n_post = r.u32()
            postings = np.frombuffer(r.take(8 * n_post), dtype="<u4").reshape(n_post, 2)
            clips_parts.append(postings[:, 0])
            times_parts.append(postings[:, 1])
            starts[i + 1] = starts[i] + n_post
        inverted = InvertedIndex(
            hashes=hashes,
            starts=starts,
            clips=np.concatenate(clips_parts) if clips_parts else np.zeros(0, dtype=np.uint32),
            times=np.concatenate(times_parts) if times_parts else np.zeros(0, dtype=np.uint32),
            clip_ids=clip_ids,
        )
    return method, records, inverted


def constellation_scores(query_fp: baselines.ConstellationFingerprint, inverted: InvertedIndex) -> dict[str, float]:
    """Match one query against every indexed clip via the inverted index."""
    scores = {clip_id: 0.0 for clip_id in inverted.clip_ids}
    n_query = query_fp.entries.shape[0]
    if n_query == 0 or inverted.hashes.shape[0] == 0:
        return scores
    q_hashes = query_fp.entries[:, 0].astype(np.uint32)
    q_times = query_fp.entries[:, 1].astype(np.int64)
    pos = np.searchsorted(inverted.hashes, q_hashes)
    pos_clipped = np.minimum(pos, inverted.hashes.shape[0] - 1)
    valid = inverted.hashes[pos_clipped] == q_hashes
    if not np.any(valid):
        return scores
    starts = inverted.starts[pos_clipped[valid]]
    stops = inverted.starts[pos_clipped[valid] + 1]
    lengths = (stops - starts).astype(np.int64)
    total = int(lengths.sum())
    if total == 0:
        return scores
    # Flatten all posting ranges without a Python loop.
    offsets = np.repeat(np.cumsum(lengths) - lengths, lengths)
    flat = np.repeat(starts, lengths) + (np.arange(total) - offsets)
    clip_idx = inverted.clips[flat].astype(np.int64)
    delta = inverted.times[flat].astype(np.int64) - np.repeat(q_times[valid], lengths)
    span = delta.max() - delta.min() + 1
    keys = clip_idx * span + (delta - delta.min())
    uniq, counts = np.unique(keys, return_counts=True)
    owner = uniq // span
    boundaries = np.flatnonzero(np.diff(owner)) + 1
    group_starts = np.concatenate([[0], boundaries])
    best = np.maximum.reduceat(counts, group_starts)
    for clip, votes in zip(owner[group_starts], best):
        scores[inverted.clip_ids[int(clip)]] = float(votes) / n_query
    return scores


# -- Index directories ----------------------------------------------------------


@dataclass
class IndexInfo:
    method: str
    variant: str
    step_seconds: float
    model_sha256: str
    count: int


def _index_meta_path(index_dir: Path) -> Path:
    return index_dir / "index.json"


def save_index_info(index_dir: Path, info: IndexInfo) -> None:
    payload = {
        "count": info.count,
        "method": info.method,
        "model_sha256": info.model_sha256,
        "step_seconds": info.step_seconds,
        "variant": info.variant,
    }
    _index_meta_path(index_dir).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")

def load_index_info(index_dir: str | Path) -> IndexInfo:
    path = _index_meta_path(Path(index_dir))
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"no index at {path.parent}") from None
    return IndexInfo(
        method=payload["method"],
        variant=payload["variant"],
        step_seconds=payload["step_seconds"],
        model_sha256=payload["model_sha256"],
        count=payload["count"],
    )


def _descriptor_variant(variant: str) -> str:
    if variant not in AUSIL_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {AUSIL_VARIANTS}")
    return "mac" if variant == "mac" else "refined"


def extract_features(
    manifest: DatasetManifest,
    clip_ids: list[str],
    model: Model,
    step_seconds: float,
    variant: str,
    workers: int | None = None,
) -> dict[str, np.ndarray]:
    desc_variant = _descriptor_variant(variant)

    def one(clip_id: str) -> tuple[str, np.ndarray]:
        clip = load_audio(manifest.path(clip_id))
        return clip_id, model.descriptor(clip, step_seconds, desc_variant).matrix

    return dict(map_ordered(one, sorted(clip_ids), workers))


def extract_fingerprints(
    manifest: DatasetManifest,
    clip_ids: list[str],
    method: str,
    workers: int | None = None,
    spectrograms: dict[str, np.ndarray] | None = None,
) -> dict[str, object]:
    def one(clip_id: str) -> tuple[str, object]:
        if spectrograms is not None and clip_id in spectrograms:
            spec = spectrograms[clip_id]
        else:
            spec = mel_spectrogram(load_audio(manifest.path(clip_id)))
        return clip_id, baselines.fingerprint_spectrogram(spec, method)

    return dict(map_ordered(one, sorted(clip_ids), workers))


def build_index(
    manifest: DatasetManifest,
    method: str,
    out_dir: str | Path,
    model: Model | None = None,
    step_seconds: float = 1.0,
    variant: str = "cnn",
    workers: int | None = None,
) -> IndexInfo:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clip_ids = manifest.searchable()
    if method == "ausil":
        if model is None:
            raise ModelError("indexing with the learned method requires a model file")
        features = extract_features(manifest, clip_ids, model, step_seconds, variant, workers)
        records = [(cid, features[cid]) for cid in sorted(features)]
        write_feature_store(out_dir / "features.bin", records, model.sha256 or "", variant, step_seconds)
        info = IndexInfo(method, variant, step_seconds, model.sha256 or "", len(records))
    else:
        prints = extract_fingerprints(manifest, clip_ids, method, workers)
        records = [(cid, prints[cid]) for cid in sorted(prints)]
        write_fingerprint_db(out_dir / "fingerprints.bin", method, records)
        info = IndexInfo(method, "", 0.0, "", len(records))
    save_index_info(out_dir, info)
    return info


def search(
    index_dir: str | Path,
    query: AudioClip,
    top_k: int | None = None,
    model: Model | None = None,
) -> list[tuple[str, float]]:
    """Rank indexed clips against a query clip; ties break by ascending id."""
    index_dir = Path(index_dir)
    info = load_index_info(index_dir)
    if info.method == "ausil":
        if model is None:
            raise ModelError("searching a learned-descriptor index requires the model file")
        if model.sha256 != info.model_sha256:
            raise ModelError(
                f"index at {index_dir} was built with model {info.model_sha256[:12]}, "
                f"got {str(model.sha256)[:12]}; rebuild the index"
            )
        meta, features = read_feature_store(index_dir / "features.bin")
        desc = model.descriptor(query, info.step_seconds, _descriptor_variant(info.variant))
        scores = score_many(
            desc.matrix,
            sorted(features.items()),
            model.tensors if info.variant == "cnn" else None,
            refined=info.variant == "cnn",
        )
    else:
        spec = mel_spectrogram(query)
        method, records, inverted = read_fingerprint_db(index_dir / "fingerprints.bin")
        query_fp = baselines.fingerprint_spectrogram(spec, method)
        if method == "constellation":
            scores = constellation_scores(query_fp, inverted)
        elif method == "slides":
            scores = {cid: baselines.slides_match(query_fp, fp) for cid, fp in records.items()}
        else:
            scores = {cid: baselines.tiles_match(query_fp, fp) for cid, fp in records.items()}
    ranking = rank_candidates(scores)
    if top_k is not None:
        ranking = ranking[:top_k]
    return [(cid, scores[cid]) for cid in ranking]


# -- Evaluation harness ---------------------------------------------------------


def _score_query_against(
    query_rep,
    candidates: dict[str, object],
    method: str,
    variant: str,
    model: Model | None,
    inverted: InvertedIndex | None = None,
) -> dict[str, float]:
    if method == "ausil":
        return score_many(
            query_rep,
            sorted(candidates.items()),
            model.tensors if variant == "cnn" else None,
            refined=variant == "cnn",
        )
    if method == "constellation":
        if inverted is None:
            inverted = make_inverted_index(sorted(candidates.items()))
        return constellation_scores(query_rep, inverted)
    if method == "slides":
        return {cid: baselines.slides_match(query_rep, fp) for cid, fp in candidates.items()}
    return {cid: baselines.tiles_match(query_rep, fp) for cid, fp in candidates.items()}


def evaluate_method(
    manifest: DatasetManifest,
    method: str,
    model: Model | None = None,
    step_seconds: float = 1.0,
    variant: str = "cnn",
    workers: int | None = None,
    query_reps: dict | None = None,
    candidate_reps: dict | None = None,
) -> tuple[EvalReport, list[tuple[list[str], set[str]]]]:
    """Rank the searchable set for every annotated query and score the ranking.

    Precomputed representation maps may be passed to share work across calls;
    they must match the method and variant.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    queries = manifest.queries()
    searchable = manifest.searchable()
    if method == "ausil":
        if model is None:
            raise ModelError("evaluating the learned method requires a model")
        if candidate_reps is None:
            candidate_reps = extract_features(manifest, searchable, model, step_seconds, variant, workers)
        if query_reps is None:
            query_reps = extract_features(manifest, queries, model, step_seconds, variant, workers)
    else:
        if candidate_reps is None:
            candidate_reps = extract_fingerprints(manifest, searchable, method, workers)
        if query_reps is None:
            query_reps = extract_fingerprints(manifest, queries, method, workers)

    report = EvalReport(
        method=method,
        variant=variant if method == "ausil" else "",
        step_seconds=step_seconds if method == "ausil" else 0.0,
        model_id=(model.sha256 or "") if method == "ausil" else "",
    )
    inverted = None
    if method == "constellation":
        inverted = make_inverted_index(sorted(candidate_reps.items()))
    rankings: list[tuple[list[str], set[str]]] = []
    for query in sorted(queries):
        relevant = set(manifest.positives.get(query, ()))
        if not relevant:
            report.skipped.append(query)
            continue
        scores = _score_query_against(query_reps[query], candidate_reps, method, variant, model, inverted)
        ranking = complete_ranking(scores, relevant)
        rankings.append((ranking, relevant))
        report.per_query.append((query, average_precision(ranking, relevant), len(relevant)))
    return report, rankings


# -- Speed-transformation benchmark ----------------------------------------------


@dataclass
class SpeedBenchReport:
    method: str
    variant: str
    factors: list[float]
    per_factor_map: dict[float, float]
    overall_map: float


def speed_benchmark(
    manifest: DatasetManifest,
    method: str,
    factors: Iterable[float] = (0.25, 0.5, 0.75, 1.25, 1.5, 2.0),
    model: Model | None = None,
    step_seconds: float = 1.0,
    variant: str = "cnn",
    workers: int | None = None,
    base_reps: dict | None = None,
    transformed_clips: dict[float, dict[str, AudioClip]] | None = None,
) -> SpeedBenchReport:
    """mAP against speed-transformed copies injected into the database.

    Original annotated duplicates are removed from the searchable set; for
    each factor the only relevant item per query is its own transformed copy,
    and the transformed copies of other queries act as distractors.

    Precomputed base representations and transformed query clips may be
    passed to share work across methods; both are recomputed when absent.
    """
    factors = [float(f) for f in factors]
    queries = [q for q in sorted(manifest.queries()) if manifest.positives.get(q)]
    if not queries:
        raise DataError("speed benchmark needs queries with annotated positives")
    original_dups = {d for dups in manifest.positives.values() for d in dups}
    base_ids = [cid for cid in manifest.searchable() if cid not in original_dups]

    def load(cid: str) -> AudioClip:
        return load_audio(manifest.path(cid))

    def represent(clip: AudioClip):
        if method == "ausil":
            return model.descriptor(clip, step_seconds, _descriptor_variant(variant)).matrix
        return baselines.fingerprint_spectrogram(mel_spectrogram(clip), method)

    if method == "ausil" and model is None:
        raise ModelError("speed benchmark for the learned method requires a model")

    if base_reps is None:
        base_reps = dict(zip(base_ids, map_ordered(lambda cid: represent(load(cid)), base_ids, workers)))
    else:
        base_reps = {cid: base_reps[cid] for cid in base_ids}
    query_clips = {q: load(q) for q in queries}
    query_reps = {q: represent(query_clips[q]) for q in queries}
    base_inverted = make_inverted_index(sorted(base_reps.items())) if method == "constellation" else None
    base_scores = {
        q: _score_query_against(query_reps[q], base_reps, method, variant, model, base_inverted)
        for q in queries
    }

    per_factor: dict[float, float] = {}
    all_aps: list[float] = []
    for factor in factors:
        if transformed_clips is not None and factor in transformed_clips:
            t_clips = transformed_clips[factor]
        else:
            t_clips = {q: speed_transform(query_clips[q], factor) for q in queries}
        injected = {f"{q}~speed{factor:g}": represent(t_clips[q]) for q in queries}
        inj_inverted = make_inverted_index(sorted(injected.items())) if method == "constellation" else None
        aps = []
        for q in queries:
            scores = dict(base_scores[q])
            scores.update(_score_query_against(query_reps[q], injected, method, variant, model, inj_inverted))
            relevant = {f"{q}~speed{factor:g}"}
            aps.append(average_precision(complete_ranking(scores, relevant), relevant))
        per_factor[factor] = float(np.mean(aps))
        all_aps.extend(aps)
    return SpeedBenchReport(
        method=method,
        variant=variant if method == "ausil" else "",
        factors=factors,
        per_factor_map=per_factor,
        overall_map=float(np.mean(all_aps)),
    )


def format_speed_report(report: SpeedBenchReport) -> str:
    lines = [f"method\t{report.method}"]
    if report.variant:
        lines.append(f"variant\t{report.variant}")
    lines.append("")
    lines.append("factor\tmAP")
    for factor in report.factors:
        lines.append(f"{factor:g}\t{report.per_factor_map[factor]:.6f}")
    lines.append(f"overall\t{report.overall_map:.6f}")
    return "\n".join(lines) + "\n"
