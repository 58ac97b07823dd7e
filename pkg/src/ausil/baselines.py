"""Classical spectrogram fingerprinting baselines.

Three methods, all over the same log-Mel spectrograms used elsewhere:

* constellation: spectral peaks paired into time-offset hashes; matching
  counts hash hits that agree on a single time offset.
* slides: per 2-second window, counts of above-average cells per band plus
  coarse time profiles; matching finds nearest windows and checks that they
  line up at a consistent offset.
* tiles: per 2-second window, the positions of the 8 busiest 16x16 cells;
  matching averages shared positions at the best window offset.

All scores are in [0, 1].  These methods key on absolute spectrogram
positions, which makes them fast but brittle under pitch/tempo changes; they
are the reference points the learned scorer is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter, maximum_filter1d

from .audio import FRAMES_PER_SEGMENT, MelSpectrogram, segment_starts


# -- Constellation ------------------------------------------------------------


@dataclass(frozen=True)
class ConstellationParams:
    neighborhood: int = 15  # square side of the local-max test, in cells
    threshold_sigmas: float = 1.0  # peaks must exceed mean + k * std
    fanout: int = 5  # target peaks paired with each anchor
    target_window: int = 64  # how far ahead (frames) targets may be


@dataclass(frozen=True)
class ConstellationFingerprint:
    entries: np.ndarray  # (n, 2) uint32 rows of (hash, anchor frame)


def spectral_peaks(spec: MelSpectrogram, params: ConstellationParams) -> np.ndarray:
    """(n, 2) array of (frame, band) peak positions in row-major order."""
    values = spec.values
    footprint = maximum_filter(values, size=params.neighborhood, mode="constant", cval=-np.inf)
    # strictly above, so a perfectly flat spectrogram (silence) has no peaks
    threshold = values.mean() + params.threshold_sigmas * values.std()
    return np.argwhere((values == footprint) & (values > threshold))


def pack_hash(band1: int, band2: int, dt: int) -> int:
    return ((band1 & 0x7F) << 14) | ((band2 & 0x7F) << 7) | (dt & 0x7F)


def constellation_fingerprint(spec: MelSpectrogram, params: ConstellationParams = ConstellationParams()) -> ConstellationFingerprint:
    peaks = spectral_peaks(spec, params)
    rows: list[tuple[int, int]] = []
    frames = peaks[:, 0]
    for i in range(peaks.shape[0]):
        t1, b1 = int(peaks[i, 0]), int(peaks[i, 1])
        lo = np.searchsorted(frames, t1 + 1, side="left")
        hi = np.searchsorted(frames, t1 + params.target_window, side="right")
        for j in range(lo, min(hi, lo + params.fanout)):
            t2, b2 = int(peaks[j, 0]), int(peaks[j, 1])
            rows.append((pack_hash(b1, b2, t2 - t1), t1))
    rows.sort(key=lambda r: (r[1], r[0]))
    entries = np.array([(h, t) for h, t in rows], dtype=np.uint32).reshape(-1, 2)
    return ConstellationFingerprint(entries=entries)


def constellation_offset_votes(
    query: ConstellationFingerprint, reference: ConstellationFingerprint
) -> tuple[np.ndarray, np.ndarray]:
    """(offsets, vote counts) over matching hashes, offsets ascending."""
    if query.entries.shape[0] == 0 or reference.entries.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.argsort(reference.entries[:, 0], kind="stable")
    ref_hashes = reference.entries[order, 0]
    ref_times = reference.entries[order, 1].astype(np.int64)
    lo = np.searchsorted(ref_hashes, query.entries[:, 0], side="left")
    hi = np.searchsorted(ref_hashes, query.entries[:, 0], side="right")
    lengths = (hi - lo).astype(np.int64)
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    # Flatten the per-hash posting ranges without a Python loop.
    starts = np.repeat(np.cumsum(lengths) - lengths, lengths)
    flat = np.repeat(lo, lengths) + (np.arange(total) - starts)
    delta = ref_times[flat] - np.repeat(query.entries[:, 1].astype(np.int64), lengths)
    return np.unique(delta, return_counts=True)


def constellation_match(query: ConstellationFingerprint, reference: ConstellationFingerprint) -> float:
    """Fraction of query hashes that agree on the best single time offset."""
    _, counts = constellation_offset_votes(query, reference)
    if counts.shape[0] == 0:
        return 0.0
    return float(counts.max()) / query.entries.shape[0]


# -- Binary-image methods -----------------------------------------------------


@dataclass(frozen=True)
class SlidesParams:
    time_groups: int = 8  # frames pooled per coarse time bin
    align_slack: int = 2  # window offset tolerance after alignment


@dataclass(frozen=True)
class TilesParams:
    cell_size: int = 16
    top_k: int = 8
    align_slack: int = 2  # window offset tolerance after alignment


def binary_image(spec: MelSpectrogram) -> np.ndarray:
    """Cells above the clip-wide mean level."""
    return spec.values > spec.values.mean()


def _binary_windows(spec: MelSpectrogram) -> np.ndarray:
    """Stack of per-window binary images (n, FRAMES_PER_SEGMENT, bands)."""
    image = binary_image(spec)
    starts = segment_starts(spec.n_frames, 2.0, spec.frame_rate)
    out = np.zeros((len(starts), FRAMES_PER_SEGMENT, image.shape[1]), dtype=bool)
    for i, s in enumerate(starts):
        piece = image[s : s + FRAMES_PER_SEGMENT]
        out[i, : piece.shape[0]] = piece
    return out


@dataclass(frozen=True)
class SlidesFingerprint:
    profiles: np.ndarray  # (n_windows, bands + time bins) int32


def slides_fingerprint(spec: MelSpectrogram, params: SlidesParams = SlidesParams()) -> SlidesFingerprint:
    windows = _binary_windows(spec)
    band_counts = windows.sum(axis=1, dtype=np.int32)  # (n, bands)
    n, frames, _ = windows.shape
    n_groups = -(-frames // params.time_groups)
    padded = np.zeros((n, n_groups * params.time_groups, windows.shape[2]), dtype=bool)
    padded[:, :frames] = windows
    time_counts = padded.reshape(n, n_groups, params.time_groups, -1).sum(axis=(2, 3), dtype=np.int32)
    return SlidesFingerprint(profiles=np.concatenate([band_counts, time_counts], axis=1))


# Strictly below the smallest possible gap between alignment ratios, so the
# distance tie-break reorders equal ratios but never crosses ratio levels.
TIE_EPSILON = 1.0 / 1024.0


def _best_alignment(
    goodness: np.ndarray,
    countable: np.ndarray,
    denom: int,
    slack: int,
) -> tuple[float, int]:
    """Best fraction of query windows aligned at one offset, plus that offset.

    A countable query window is aligned at an offset when some reference
    window within `slack` of its shifted position reaches the window's best
    achievable goodness.  Equal fractions are split by the number of exact
    (no-slack) hits, so the reported offset is the best-supported shift; any
    remaining tie picks the smallest offset.
    """
    v, r = goodness.shape
    row_best = goodness.max(axis=1)
    padded = np.full((v, r + 2 * slack), -np.inf)
    padded[:, slack : slack + r] = goodness
    band = maximum_filter1d(padded, size=2 * slack + 1, axis=1, mode="constant", cval=-np.inf)
    rows = np.arange(v)
    best = (0, -1)
    best_offset = 0
    for offset in range(-(v - 1) - slack, r + slack):
        centers = rows + offset
        inside = (centers >= -slack) & (centers < r + slack) & countable
        aligned = inside & (band[rows, np.clip(centers + slack, 0, band.shape[1] - 1)] >= row_best)
        exact_in = (centers >= 0) & (centers < r) & aligned
        exact = exact_in & (goodness[rows, np.clip(centers, 0, r - 1)] >= row_best)
        key = (int(aligned.sum()), int(exact.sum()))
        if key > best:
            best, best_offset = key, offset
    return best[0] / denom, best_offset


def slides_alignment(
    query: SlidesFingerprint, reference: SlidesFingerprint, params: SlidesParams = SlidesParams()
) -> tuple[float, int]:
    """(score, best window offset) for the slide-profile matcher.

    Windows whose binary image is entirely empty carry no evidence: empty
    query windows never count as matched and empty reference windows are not
    candidates.  The alignment ratio is refined by a sub-resolution term that
    grows with the nearest-profile distances, so among candidates with the
    same ratio, closer profiles rank first and only an exact profile match
    reaches 1.0.
    """
    q, r = query.profiles, reference.profiles
    q_ok, r_ok = q.any(axis=1), r.any(axis=1)
    denom = int(q_ok.sum())
    if denom == 0 or not r_ok.any():
        return 0.0, 0
    distances = np.abs(q[:, None, :].astype(np.int64) - r[None, :, :]).sum(axis=2)
    goodness = np.where(r_ok[None, :], -distances.astype(np.float64), -np.inf)
    fraction, offset = _best_alignment(goodness, q_ok, denom, params.align_slack)
    if fraction == 0.0:
        return 0.0, offset
    mean_distance = float(-goodness.max(axis=1)[q_ok].mean())
    score = fraction - TIE_EPSILON * mean_distance / (1.0 + mean_distance)
    return max(score, 0.0), offset


def slides_match(query: SlidesFingerprint, reference: SlidesFingerprint, params: SlidesParams = SlidesParams()) -> float:
    return slides_alignment(query, reference, params)[0]


@dataclass(frozen=True)
class TilesFingerprint:
    positions: np.ndarray  # (n_windows, top_k) int32 cell indices, sorted
    occupancy: np.ndarray  # (n_windows,) int32 count of above-mean cells


def tiles_fingerprint(spec: MelSpectrogram, params: TilesParams = TilesParams()) -> TilesFingerprint:
    windows = _binary_windows(spec)
    n, frames, bands = windows.shape
    size = params.cell_size
    rows, cols = -(-frames // size), -(-bands // size)
    padded = np.zeros((n, rows * size, cols * size), dtype=bool)
    padded[:, :frames, :bands] = windows
    sums = padded.reshape(n, rows, size, cols, size).sum(axis=(2, 4), dtype=np.int32).reshape(n, rows * cols)
    # Busiest cells first; ties go to the lower cell index.
    top = np.argsort(-sums, axis=1, kind="stable")[:, : params.top_k]
    return TilesFingerprint(
        positions=np.sort(top, axis=1).astype(np.int32),
        occupancy=sums.sum(axis=1, dtype=np.int32),
    )


def tiles_alignment(
    query: TilesFingerprint, reference: TilesFingerprint, params: TilesParams = TilesParams()
) -> tuple[float, int]:
    """(score, best window offset) for the top-tile matcher.

    Shared top-tile count plays the role of closeness: a query window can only
    match reference windows it shares at least one tile with.  Same empty
    window rules and tie refinement as the slides matcher.
    """
    q, r = query.positions, reference.positions
    q_ok, r_ok = query.occupancy > 0, reference.occupancy > 0
    denom = int(q_ok.sum())
    if denom == 0 or not r_ok.any():
        return 0.0, 0
    shared = (q[:, None, :, None] == r[None, :, None, :]).sum(axis=(2, 3), dtype=np.int64)
    goodness = np.where(r_ok[None, :], shared.astype(np.float64), -np.inf)
    row_best = goodness.max(axis=1)
    fraction, offset = _best_alignment(goodness, q_ok & (row_best > 0), denom, params.align_slack)
    if fraction == 0.0:
        return 0.0, offset
    mean_missing = float((params.top_k - row_best[q_ok]).mean())
    score = fraction - TIE_EPSILON * mean_missing / (1.0 + mean_missing)
    return max(score, 0.0), offset


def tiles_match(query: TilesFingerprint, reference: TilesFingerprint, params: TilesParams = TilesParams()) -> float:
    return tiles_alignment(query, reference, params)[0]


def fingerprint_spectrogram(spec: MelSpectrogram, method: str):
    if method == "constellation":
        return constellation_fingerprint(spec)
    if method == "slides":
        return slides_fingerprint(spec)
    if method == "tiles":
        return tiles_fingerprint(spec)
    raise ValueError(f"unknown fingerprint method: {method}")
