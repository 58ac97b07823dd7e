"""Dataset manifests and the synthetic desk-scale corpus generator.

A corpus directory holds WAV files plus a line-delimited manifest: one JSON
object per line, either a clip record (id, path, role, and provenance for
transformed duplicates) or a positives record mapping a query to its known
duplicates.  Roles are query, reference, and distractor; duplicates are
reference-role clips derived from a query by a recorded transform chain.

Synthesis is fully determined by the recipe seed.  Base clips are mixtures
of tones, chirps, and band-limited noise under gated amplitude envelopes.
References and queries are generated in small families that share a theme
with per-clip perturbations, so the searchable set contains genuinely
confusable non-duplicates (the raw material for hard-negative mining).
Distractors are independent draws with private themes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft

from .audio import SAMPLE_RATE, AudioClip, save_wav, speed_transform
from .errors import DataError
from .seeds import stream

ROLES = ("query", "reference", "distractor")
SPEED_FACTORS = (0.25, 0.5, 0.75, 1.25, 1.5, 2.0)


# -- Manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ClipEntry:
    clip_id: str
    path: str  # relative to the manifest directory
    role: str
    query: str | None = None  # for duplicates: the query they derive from
    transforms: tuple[str, ...] = ()


@dataclass
class DatasetManifest:
    clips: list[ClipEntry]
    positives: dict[str, tuple[str, ...]]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self._by_id = {c.clip_id: c for c in self.clips}

    def ids(self) -> list[str]:
        return [c.clip_id for c in self.clips]

    def entry(self, clip_id: str) -> ClipEntry:
        try:
            return self._by_id[clip_id]
        except KeyError:
            raise DataError(f"manifest has no clip {clip_id}") from None

    def path(self, clip_id: str) -> Path:
        return self.root / self.entry(clip_id).path

    def queries(self) -> list[str]:
        return [c.clip_id for c in self.clips if c.role == "query"]

    def searchable(self) -> list[str]:
        return [c.clip_id for c in self.clips if c.role in ("reference", "distractor")]

    def validate(self) -> None:
        seen: set[str] = set()
        for clip in self.clips:
            if clip.clip_id in seen:
                raise DataError(f"duplicate clip id in manifest: {clip.clip_id}")
            seen.add(clip.clip_id)
            if clip.role not in ROLES:
                raise DataError(f"clip {clip.clip_id} has unknown role {clip.role!r}")
        for query, dups in self.positives.items():
            if query not in seen:
                raise DataError(f"positives entry references unknown query {query}")
            for dup in dups:
                if dup not in seen:
                    raise DataError(f"positives for {query} reference unknown clip {dup}")


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = []
    for clip in manifest.clips:
        record: dict = {"type": "clip", "id": clip.clip_id, "path": clip.path, "role": clip.role}
        if clip.query is not None:
            record["query"] = clip.query
            record["transforms"] = list(clip.transforms)
        lines.append(json.dumps(record, sort_keys=True))
    for query in sorted(manifest.positives):
        record = {"type": "positives", "query": query, "duplicates": sorted(manifest.positives[query])}
        lines.append(json.dumps(record, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    clips: list[ClipEntry] = []
    positives: dict[str, tuple[str, ...]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: not valid JSON: {exc}") from None
        kind = record.get("type")
        if kind == "clip":
            clips.append(
                ClipEntry(
                    clip_id=record["id"],
                    path=record["path"],
                    role=record["role"],
                    query=record.get("query"),
                    transforms=tuple(record.get("transforms", ())),
                )
            )
        elif kind == "positives":
            positives[record["query"]] = tuple(record["duplicates"])
        else:
            raise DataError(f"{path}:{lineno}: unknown record type {kind!r}")
    manifest = DatasetManifest(clips=clips, positives=positives, root=path.parent)
    manifest.validate()
    return manifest


# -- Recipe -------------------------------------------------------------------

TRANSFORM_KINDS = ("gain", "noise", "lowpass", "babble", "trim", "speed")


@dataclass(frozen=True)
class SyntheticRecipe:
    seed: int = 0
    references: int = 200
    queries: int = 40
    duplicates_per_query: int = 6
    distractors: int = 500
    duration_range: tuple[float, float] = (4.0, 12.0)
    family_size: int = 4
    transforms: tuple[str, ...] = TRANSFORM_KINDS
    min_transforms: int = 1
    max_transforms: int = 2

    def __post_init__(self):
        for kind in self.transforms:
            if kind not in TRANSFORM_KINDS:
                raise ValueError(f"unknown transform kind: {kind}")
        if self.duration_range[0] < 3.0 or self.duration_range[1] > 30.0:
            raise ValueError("base clip durations must stay within 3-30 s")
        if self.min_transforms > self.max_transforms:
            raise ValueError("min_transforms must not exceed max_transforms")


# -- Signal synthesis ---------------------------------------------------------


def _brickwall(x: np.ndarray, low_hz: float, high_hz: float) -> np.ndarray:
    """Zero all spectral content outside [low_hz, high_hz]."""
    n = x.shape[0]
    m = next_fast_len(n, real=True)  # padding keeps the FFT off slow prime sizes
    spectrum = rfft(x, n=m)
    freqs = np.fft.rfftfreq(m, d=1.0 / SAMPLE_RATE)
    spectrum[(freqs < low_hz) | (freqs > high_hz)] = 0.0
    return irfft(spectrum, n=m)[:n]


def _gated_envelope(n: int, rng: np.random.Generator, rate_hz: float = 1.5) -> np.ndarray:
    """Piecewise on/off gate with short ramps, the amplitude shape of a clip."""
    n_points = max(3, int(n / SAMPLE_RATE * rate_hz))
    times = np.linspace(0, n, n_points)
    levels = rng.uniform(0.0, 1.0, size=n_points)
    levels[levels < 0.35] = 0.0  # rests
    levels[0] = levels[-1] = 0.0
    return np.interp(np.arange(n), times, levels)


def _component(kind: str, n: int, params: dict, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    if kind == "tone":
        wave = np.sin(2 * np.pi * params["freq"] * t + params["phase"])
    elif kind == "chirp":
        f0, f1 = params["freq"], params["freq2"]
        duration = n / SAMPLE_RATE
        wave = np.sin(2 * np.pi * (f0 * t + (f1 - f0) / (2 * duration) * t**2) + params["phase"])
    elif kind == "band":
        wave = _brickwall(rng.normal(0.0, 1.0, size=n), params["freq"] * 0.8, params["freq"] * 1.25)
        rms = np.sqrt(np.mean(wave**2))
        wave = wave / rms if rms > 0 else wave
    else:
        raise ValueError(f"unknown component kind: {kind}")
    return params["amp"] * wave * _gated_envelope(n, rng, params["gate_rate"])


def _family_theme(seed: int, family: int, recipe: SyntheticRecipe) -> list[dict]:
    rng = stream(seed, f"corpus/family/{family}")
    # Each component gets its own slot of the log-frequency axis; clips made
    # of a few same-register components are too easy to confuse (their
    # thresholded spectrograms collapse onto the same few cells) and too
    # sparse in spectral peaks for pair hashing.
    n_components = int(rng.integers(4, 7))
    edges = np.exp(np.linspace(np.log(80.0), np.log(8000.0), n_components + 1))
    slots = rng.permutation(n_components)
    components = []
    for i in range(n_components):
        lo, hi = edges[slots[i]], edges[slots[i] + 1]
        freq = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        if i == 0:
            # one percussive noise-burst track per theme: bursts at a few Hz
            # scatter local spectral maxima through every second of audio
            kind = "band"
            amp = float(rng.uniform(0.6, 1.0))
            gate_rate = float(rng.uniform(2.5, 5.0))
        else:
            kind = ("tone", "chirp", "band")[int(rng.integers(0, 3))]
            amp = float(rng.uniform(0.3, 1.0))
            gate_rate = float(rng.uniform(0.8, 3.0))
        components.append(
            {
                "kind": kind,
                "freq": freq,
                "freq2": freq * float(rng.uniform(0.5, 2.0)),
                "amp": amp,
                "gate_rate": gate_rate,
            }
        )
    return components


def _synth_base(seed: int, index: int, family: int, recipe: SyntheticRecipe) -> AudioClip:
    theme = _family_theme(seed, family, recipe)
    rng = stream(seed, f"corpus/base/{index}")
    lo, hi = recipe.duration_range
    duration = float(rng.uniform(lo, hi))
    n = int(round(duration * SAMPLE_RATE))
    mix = np.zeros(n)
    for component in theme:
        jittered = dict(component)
        jittered["freq"] = component["freq"] * float(rng.uniform(0.96, 1.04))
        jittered["freq2"] = component["freq2"] * float(rng.uniform(0.96, 1.04))
        jittered["amp"] = component["amp"] * float(rng.uniform(0.8, 1.2))
        jittered["phase"] = float(rng.uniform(0, 2 * np.pi))
        mix += _component(component["kind"], n, jittered, rng)
    peak = np.abs(mix).max()
    if peak > 0:
        mix *= float(rng.uniform(0.35, 0.45)) / peak
    return AudioClip(samples=mix, sample_rate=SAMPLE_RATE)


# -- Duplicate transforms -----------------------------------------------------


def apply_transform(clip: AudioClip, kind: str, rng: np.random.Generator) -> tuple[AudioClip, str]:
    """One named corruption; returns the clip and a provenance tag."""
    x = clip.samples
    if kind == "gain":
        db = 6.0 if rng.uniform() < 0.5 else -6.0
        out = np.clip(x * 10.0 ** (db / 20.0), -1.0, 1.0)
        return AudioClip(out, clip.sample_rate), f"gain({db:+.0f}dB)"
    if kind == "noise":
        snr_db = 20.0 if rng.uniform() < 0.5 else 10.0
        rms = np.sqrt(np.mean(x**2))
        sigma = rms / 10.0 ** (snr_db / 20.0)
        return AudioClip(x + rng.normal(0.0, sigma, size=x.shape), clip.sample_rate), f"noise(snr={snr_db:.0f}dB)"
    if kind == "lowpass":
        return AudioClip(_brickwall(x, 0.0, 4000.0), clip.sample_rate), "lowpass(4000Hz)"
    if kind == "babble":
        rms = np.sqrt(np.mean(x**2))
        babble = np.zeros_like(x)
        for _ in range(5):
            voice = _brickwall(rng.normal(0.0, 1.0, size=x.shape), 300.0, 3400.0)
            babble += voice * _gated_envelope(x.shape[0], rng, rate_hz=5.0)
        brms = np.sqrt(np.mean(babble**2))
        if brms > 0:
            babble *= (rms / 10.0 ** (10.0 / 20.0)) / brms
        return AudioClip(x + babble, clip.sample_rate), "babble(snr=10dB)"
    if kind == "trim":
        duration = x.shape[0] / clip.sample_rate
        frac = float(rng.uniform(0.2, 0.6))
        frac = min(frac, max(0.0, 1.0 - 2.5 / duration))  # keep at least 2.5 s
        cut = int(round(x.shape[0] * frac))
        front = int(round(cut * float(rng.uniform(0.0, 1.0))))
        kept = x[front : x.shape[0] - (cut - front)]
        return AudioClip(kept, clip.sample_rate), f"trim({frac:.2f},front={front / max(1, x.shape[0]):.2f})"
    if kind == "speed":
        factor = float(SPEED_FACTORS[int(rng.integers(0, len(SPEED_FACTORS)))])
        return speed_transform(clip, factor), f"speed({factor:g})"
    raise ValueError(f"unknown transform kind: {kind}")


def make_duplicate(base: AudioClip, recipe: SyntheticRecipe, query_index: int, dup_index: int) -> tuple[AudioClip, tuple[str, ...]]:
    rng = stream(recipe.seed, f"corpus/dup/{query_index}/{dup_index}")
    clip = base
    chain: list[str] = []
    if recipe.transforms:
        count = int(rng.integers(recipe.min_transforms, recipe.max_transforms + 1))
        picks = rng.choice(len(recipe.transforms), size=min(count, len(recipe.transforms)), replace=False)
        for pick in picks:
            clip, tag = apply_transform(clip, recipe.transforms[int(pick)], rng)
            chain.append(tag)
    return clip, tuple(chain)


# -- Corpus generation ---------------------------------------------------------


def synth_corpus(recipe: SyntheticRecipe, out_dir: str | Path) -> DatasetManifest:
    """Write WAVs and manifest; returns the loaded, validated manifest."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    # References and queries share themes in small families (the confusable
    # non-duplicates that make mining and ranking non-trivial); distractors
    # are independent draws, each with a private theme.
    themed = recipe.references + recipe.queries
    role_pool = ["reference"] * recipe.references + ["query"] * recipe.queries
    order = stream(recipe.seed, "corpus/roles").permutation(themed)
    role_of = [role_pool[int(i)] for i in order] + ["distractor"] * recipe.distractors
    themed_families = -(-themed // recipe.family_size)

    counters = {"reference": 0, "query": 0, "distractor": 0}
    prefix = {"reference": "ref", "query": "qry", "distractor": "dis"}
    clips: list[ClipEntry] = []
    query_bases: list[tuple[str, AudioClip]] = []

    for base_index in range(themed + recipe.distractors):
        role = role_of[base_index]
        clip_id = f"{prefix[role]}{counters[role]:04d}"
        counters[role] += 1
        if base_index < themed:
            family = base_index // recipe.family_size
        else:
            family = themed_families + (base_index - themed)
        base = _synth_base(recipe.seed, base_index, family, recipe)
        rel_path = f"wav/{clip_id}.wav"
        save_wav(out_dir / rel_path, base)
        clips.append(ClipEntry(clip_id=clip_id, path=rel_path, role=role))
        if role == "query":
            query_bases.append((clip_id, base))

    positives: dict[str, tuple[str, ...]] = {}
    for query_index, (query_id, base) in enumerate(query_bases):
        dup_ids = []
        for dup_index in range(recipe.duplicates_per_query):
            dup, chain = make_duplicate(base, recipe, query_index, dup_index)
            dup_id = f"dup{query_index:04d}_{dup_index:02d}"
            rel_path = f"wav/{dup_id}.wav"
            save_wav(out_dir / rel_path, dup)
            clips.append(ClipEntry(clip_id=dup_id, path=rel_path, role="reference", query=query_id, transforms=chain))
            dup_ids.append(dup_id)
        if dup_ids:
            positives[query_id] = tuple(dup_ids)

    manifest = DatasetManifest(clips=clips, positives=positives, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    manifest.validate()
    return manifest


def directory_digest(path: str | Path) -> str:
    """SHA-256 over sorted relative paths and file contents."""
    path = Path(path)
    digest = hashlib.sha256()
    for file in sorted(p for p in path.rglob("*") if p.is_file()):
        digest.update(str(file.relative_to(path)).encode())
        digest.update(file.read_bytes())
    return digest.hexdigest()
