"""Audio loading, resampling, log-Mel spectrograms, and segmentation.

All downstream processing assumes mono audio at 44.1 kHz.  Spectrograms use a
1024-sample Hann window with a 512-sample hop and a 128-band Mel filterbank
spanning the full 0..22050 Hz range.  A clip is then cut into 2-second
windows taken every `step_seconds`; the final window may extend past the end
of the clip and is padded with silence.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal.windows import hann

from .errors import DataError

SAMPLE_RATE = 44100
WINDOW_SIZE = 1024
HOP_SIZE = 512
N_MELS = 128
LOG_FLOOR = 1e-10
SEGMENT_SECONDS = 2.0

# Frames covered by one 2-second window at the fixed frame rate.
FRAME_RATE = SAMPLE_RATE / HOP_SIZE
FRAMES_PER_SEGMENT = int(round(SEGMENT_SECONDS * FRAME_RATE))

# Silence maps to log(LOG_FLOOR); used to pad partial segments.
SILENCE_LOG = float(np.log(LOG_FLOOR))


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # float64, mono, range roughly [-1, 1]
    sample_rate: int
    source_id: str = ""

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (frames, N_MELS) float64, natural-log power
    sample_rate: int

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / HOP_SIZE

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SegmentedSpectrogram:
    segments: np.ndarray  # (n_segments, FRAMES_PER_SEGMENT, N_MELS)
    step_seconds: float
    clip_id: str = ""

    @property
    def n_segments(self) -> int:
        return self.segments.shape[0]


def _to_float_samples(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        return (raw.astype(np.float64) - 128.0) / 128.0
    if raw.dtype == np.int16:
        return raw.astype(np.float64) / 32768.0
    if raw.dtype == np.int32:
        return raw.astype(np.float64) / 2147483648.0
    if raw.dtype in (np.float32, np.float64):
        return raw.astype(np.float64)
    raise DataError(f"unsupported WAV sample format: {raw.dtype}")


def load_audio(path: str | Path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a WAV file as mono float64 at `target_rate`."""
    path = Path(path)
    try:
        rate, raw = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"audio file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    if raw.size == 0:
        raise DataError(f"audio file is empty: {path}")
    samples = _to_float_samples(raw)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise DataError(f"audio file contains non-finite samples: {path}")
    peak = np.abs(samples).max()
    if peak > 1.0:
        samples = samples / peak
    if rate != target_rate:
        samples = resample(samples, rate, target_rate)
    return AudioClip(samples=samples, sample_rate=target_rate, source_id=path.stem)


def save_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM."""
    scaled = np.clip(clip.samples, -1.0, 1.0) * 32767.0
    wavfile.write(Path(path), clip.sample_rate, np.round(scaled).astype(np.int16))


# -- Resampling -------------------------------------------------------------
#
# Windowed-sinc interpolation with a Kaiser window.  Taps are precomputed on
# a fixed grid of fractional phases so that resampling is a gather plus a
# dot product per output sample, which keeps long clips cheap.

_HALF_TAPS = 32
_N_TAPS = 2 * _HALF_TAPS
_N_PHASES = 512
_KAISER_BETA = 8.0
_TAP_OFFSETS = np.arange(_N_TAPS) - (_HALF_TAPS - 1)
_tap_cache: dict[float, np.ndarray] = {}


def _phase_table(cutoff: float) -> np.ndarray:
    table = _tap_cache.get(cutoff)
    if table is None:
        phases = np.arange(_N_PHASES)[:, None] / _N_PHASES
        u = phases - _TAP_OFFSETS[None, :]  # signal-time offset of each tap
        window = np.i0(_KAISER_BETA * np.sqrt(np.clip(1.0 - (u / _HALF_TAPS) ** 2, 0.0, 1.0)))
        window /= np.i0(_KAISER_BETA)
        table = cutoff * np.sinc(cutoff * u) * window
        table /= table.sum(axis=1, keepdims=True)
        _tap_cache[cutoff] = table
    return table


def _sinc_interpolate(x: np.ndarray, positions_ratio: float, out_len: int, cutoff: float) -> np.ndarray:
    """Evaluate x at positions i / positions_ratio for i in [0, out_len)."""
    n = x.shape[0]
    taps = _phase_table(cutoff)
    padded = np.concatenate([np.zeros(_HALF_TAPS - 1), x, np.zeros(_HALF_TAPS + 1)])
    out = np.empty(out_len, dtype=np.float64)
    chunk = 1 << 16
    for start in range(0, out_len, chunk):
        stop = min(start + chunk, out_len)
        pos = np.arange(start, stop, dtype=np.float64) / positions_ratio
        base = np.floor(pos).astype(np.int64)
        phase = np.rint((pos - base) * _N_PHASES).astype(np.int64)
        base += phase // _N_PHASES
        phase %= _N_PHASES
        np.clip(base, 0, n - 1, out=base)
        gather = padded[base[:, None] + (_TAP_OFFSETS[None, :] + _HALF_TAPS - 1)]
        out[start:stop] = np.einsum("ij,ij->i", gather, taps[phase])
    return out


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Convert a signal between sample rates; identical rates pass through."""
    if rate_in <= 0 or rate_out <= 0:
        raise ValueError("sample rates must be positive")
    if x.ndim != 1:
        raise ValueError("resample expects a mono signal")
    if rate_in == rate_out:
        return x.astype(np.float64, copy=True)
    ratio = rate_out / rate_in
    out_len = max(1, int(round(x.shape[0] * ratio)))
    cutoff = min(1.0, ratio)
    return _sinc_interpolate(x.astype(np.float64), ratio, out_len, cutoff)


def speed_transform(clip: AudioClip, factor: float) -> AudioClip:
    """Play the clip `factor` times faster; the sample-rate label is kept.

    Both the duration and the pitch change, as with a turntable speed knob.
    """
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    if factor == 1.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.source_id)
    x = clip.samples.astype(np.float64)
    out_len = max(1, int(round(x.shape[0] / factor)))
    cutoff = min(1.0, 1.0 / factor)
    warped = _sinc_interpolate(x, 1.0 / factor, out_len, cutoff)
    return AudioClip(warped, clip.sample_rate, clip.source_id)


# -- Mel spectrogram --------------------------------------------------------

_MEL_BREAK_HZ = 1000.0
_MEL_LINEAR_STEP = 200.0 / 3.0
_MEL_LOG_STEP = np.log(6.4) / 27.0
_MEL_BREAK = _MEL_BREAK_HZ / _MEL_LINEAR_STEP


def _hz_to_mel(freq: np.ndarray) -> np.ndarray:
    freq = np.asarray(freq, dtype=np.float64)
    mel = freq / _MEL_LINEAR_STEP
    above = freq >= _MEL_BREAK_HZ
    mel = np.where(above, _MEL_BREAK + np.log(np.maximum(freq, _MEL_BREAK_HZ) / _MEL_BREAK_HZ) / _MEL_LOG_STEP, mel)
    return mel


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    freq = mel * _MEL_LINEAR_STEP
    above = mel >= _MEL_BREAK
    return np.where(above, _MEL_BREAK_HZ * np.exp(_MEL_LOG_STEP * (mel - _MEL_BREAK)), freq)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WINDOW_SIZE, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular Mel filters, area-normalized, over rFFT bin frequencies."""
    fft_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    mel_pts = np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    return weights


_filterbank_cache: dict[tuple[int, int, int], np.ndarray] = {}


def mel_spectrogram(clip: AudioClip) -> MelSpectrogram:
    """Log-power Mel spectrogram; frames start every HOP_SIZE samples."""
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    x = clip.samples.astype(np.float64)
    if x.shape[0] == 0:
        raise DataError("cannot compute a spectrogram of empty audio")
    if x.shape[0] < WINDOW_SIZE:
        x = np.concatenate([x, np.zeros(WINDOW_SIZE - x.shape[0])])
    n_frames = 1 + (x.shape[0] - WINDOW_SIZE) // HOP_SIZE
    frames = np.lib.stride_tricks.as_strided(
        x,
        shape=(n_frames, WINDOW_SIZE),
        strides=(x.strides[0] * HOP_SIZE, x.strides[0]),
        writeable=False,
    )
    spectrum = np.fft.rfft(frames * hann(WINDOW_SIZE, sym=False), axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    key = (N_MELS, WINDOW_SIZE, SAMPLE_RATE)
    fb = _filterbank_cache.get(key)
    if fb is None:
        fb = mel_filterbank(*key)
        _filterbank_cache[key] = fb
    mel = power @ fb.T
    return MelSpectrogram(values=np.log(mel + LOG_FLOOR), sample_rate=clip.sample_rate)


def segment_starts(n_frames: int, step_seconds: float, frame_rate: float = FRAME_RATE) -> list[int]:
    """Start frames of the 2-second windows covering `n_frames` frames.

    Windows start every `step_seconds`; all fully contained windows are kept,
    plus one trailing padded window whenever frames remain past the last full
    start.  Any nonempty spectrogram yields at least one window.
    """
    if step_seconds <= 0:
        raise ValueError("step_seconds must be positive")
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    step = step_seconds * frame_rate
    starts = []
    k = 0
    while int(round(k * step)) + FRAMES_PER_SEGMENT <= n_frames:
        starts.append(int(round(k * step)))
        k += 1
    tail = int(round(k * step))
    if tail < n_frames:
        starts.append(tail)
    return starts


def segment_spectrogram(spec: MelSpectrogram, step_seconds: float, clip_id: str = "") -> SegmentedSpectrogram:
    """Cut a spectrogram into 2-second windows every `step_seconds`."""
    starts = segment_starts(spec.n_frames, step_seconds, spec.frame_rate)
    out = np.full((len(starts), FRAMES_PER_SEGMENT, N_MELS), SILENCE_LOG, dtype=np.float64)
    for i, s in enumerate(starts):
        piece = spec.values[s : s + FRAMES_PER_SEGMENT]
        out[i, : piece.shape[0]] = piece
    return SegmentedSpectrogram(segments=out, step_seconds=step_seconds, clip_id=clip_id)
