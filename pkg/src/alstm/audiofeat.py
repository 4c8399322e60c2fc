"""Acoustic front-end: WAV ingestion, 48 -> 16 kHz decimation, framing and a
36-dimensional per-frame feature vector.

Feature order (columns of a feature sequence):

    0-12   MFCC c0..c12
    13     zero crossing rate
    14     energy
    15     entropy of energy
    16     spectral centroid
    17     spectral spread
    18     spectral entropy
    19     spectral flux
    20     spectral rolloff
    21-32  chroma vector (C, C#, ..., B)
    33     chroma deviation
    34     harmonic ratio
    35     pitch (Hz, 0 when unvoiced)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import DataError, FormatError, RateError

RATE = 16000
SUPPORTED_RATES = (16000, 48000)
N_FFT = 512
N_BINS = N_FFT // 2 + 1
N_MFCC = 13
N_MEL = 40
LOG_FLOOR = 1e-10
EPS = 1e-10
ROLLOFF = 0.90
PITCH_RANGE = (60.0, 400.0)
VOICING_THRESHOLD = 0.2
PEAK_TOLERANCE = 1e-3

FEATURE_NAMES = (
    [f"mfcc{i}" for i in range(N_MFCC)]
    + ["zcr", "energy", "energy_entropy", "spectral_centroid", "spectral_spread",
       "spectral_entropy", "spectral_flux", "spectral_rolloff"]
    + [f"chroma_{n}" for n in ("C", "Cs", "D", "Ds", "E", "F", "Fs", "G", "Gs", "A", "As", "B")]
    + ["chroma_deviation", "harmonic_ratio", "pitch"]
)
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 36

ALSF_MAGIC = b"ALSF"
ALSF_VERSION = 1


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameSpec:
    window: int = 400
    hop: int = 160

    def __post_init__(self):
        if not self.window > self.hop > 0:
            raise DataError(f"frame spec needs window > hop > 0, got {self.window}/{self.hop}")


# --------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> AudioClip:
    """Read a PCM16 RIFF/WAVE file; stereo is averaged to mono."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError(f"{path}: missing RIFF/WAVE header")
    pos = 12
    fmt = None
    while pos + 8 <= len(buf):
        cid, size = struct.unpack("<4sI", buf[pos:pos + 8])
        body = buf[pos + 8:pos + 8 + size]
        name = cid.decode("latin-1")
        if len(body) < size:
            raise FormatError(f"{path}: chunk {name!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: chunk 'fmt ' too short")
            audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if audio_format != 1 or bits != 16:
                raise FormatError(f"{path}: chunk 'fmt ' declares format {audio_format}, "
                                  f"{bits}-bit; only PCM16 is supported")
            if channels not in (1, 2):
                raise FormatError(f"{path}: chunk 'fmt ' declares {channels} channels")
            fmt = (channels, rate)
        elif cid == b"data":
            if fmt is None:
                raise FormatError(f"{path}: chunk 'data' precedes chunk 'fmt '")
            channels, rate = fmt
            if rate not in SUPPORTED_RATES:
                raise RateError(f"{path}: sample rate {rate} Hz not in {SUPPORTED_RATES}")
            if size % (2 * channels):
                raise FormatError(f"{path}: chunk 'data' size {size} is not whole frames")
            pcm = np.frombuffer(body, dtype="<i2").astype(np.float64) / 32768.0
            if channels == 2:
                pcm = pcm.reshape(-1, 2).mean(axis=1)
            return AudioClip(pcm, rate)
        pos += 8 + size + (size & 1)
    raise FormatError(f"{path}: no chunk 'data' found")


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    """Write mono PCM16; samples are clipped to [-1, 1)."""
    import wave

    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# resampling and framing


def lowpass_taps(n_taps: int = 63, cutoff: float = 7200.0, rate: float = 48000.0) -> np.ndarray:
    """Hamming-windowed sinc FIR with unit DC gain."""
    n = np.arange(n_taps) - (n_taps - 1) / 2
    fc = cutoff / rate
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(n_taps)
    return h / h.sum()


def decimate_48_to_16(clip: AudioClip) -> AudioClip:
    if clip.sample_rate != 48000:
        raise RateError(f"decimation expects 48000 Hz input, got {clip.sample_rate}")
    filtered = np.convolve(clip.samples, lowpass_taps(), mode="same")
    return AudioClip(filtered[::3].copy(), RATE)


def to_16k(clip: AudioClip) -> AudioClip:
    if clip.sample_rate == RATE:
        return clip
    return decimate_48_to_16(clip)


def frame_signal(clip: AudioClip, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Hamming-windowed frames, shape (n_frames, window)."""
    if clip.sample_rate != RATE:
        raise RateError(f"framing expects {RATE} Hz audio, got {clip.sample_rate}")
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < spec.window:
        raise DataError(f"clip of {len(x)} samples is shorter than one {spec.window}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, spec.window)[::spec.hop]
    return frames * np.hamming(spec.window)


# --------------------------------------------------------------------------
# per-frame features


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _build_mel_filterbank(n_filters: int = N_MEL, rate: int = RATE, n_fft: int = N_FFT,
                          fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_filters + 2))
    fb = np.zeros((n_filters, len(freqs)))
    for j in range(n_filters):
        lo, mid, hi = edges[j:j + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[j] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def _build_chroma_map(rate: int = RATE, n_fft: int = N_FFT) -> np.ndarray:
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    cmap = np.zeros((12, len(freqs)))
    for k, f in enumerate(freqs):
        if f < 27.5:
            continue
        # A440 reference; pitch class 0 is C, so A sits at 9
        pc = (int(np.round(12 * np.log2(f / 440.0))) + 9) % 12
        cmap[pc, k] = 1.0
    return cmap


MEL_FB = _build_mel_filterbank()
CHROMA_MAP = _build_chroma_map()
NORM_FREQS = (np.arange(N_BINS) + 1.0) / N_BINS


def magnitude_spectrum(frame: np.ndarray) -> np.ndarray:
    return np.abs(np.fft.rfft(frame, N_FFT))


def normalized_spectrum(frame: np.ndarray) -> np.ndarray:
    """Sum-normalized magnitude spectrum, the state carried between frames for flux."""
    mag = magnitude_spectrum(frame)
    return mag / (mag.sum() + EPS)


def _entropy(parts: np.ndarray) -> float:
    p = parts / (parts.sum() + EPS)
    return float(-np.sum(p * np.log2(p + EPS)))


def zero_crossing_rate(frame: np.ndarray) -> float:
    s = frame >= 0
    return float(np.count_nonzero(s[1:] != s[:-1]) / (len(frame) - 1))


def normalized_autocorrelation(x: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """``sum x[n] x[n+l] / sqrt(energy of both overlapping segments)`` per lag."""
    n = len(x)
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    out = np.zeros(len(lags))
    for j, lag in enumerate(lags):
        den = np.sqrt(csum[n - lag] * (csum[n] - csum[lag]))
        if den > EPS:
            out[j] = np.dot(x[:n - lag], x[lag:]) / den
    return out


def pitch_and_harmonic_ratio(frame: np.ndarray, rate: int = RATE,
                             windowed: bool = True) -> tuple[float, float]:
    """Voicing strength and pitch from the normalized autocorrelation.

    Lags cover 60-400 Hz.  The harmonic ratio is the peak correlation.  Whole
    multiples of the period score (almost) the same as the period itself, so
    the pitch lag is the first lag within ``PEAK_TOLERANCE`` of the peak,
    advanced to its local maximum.  A frame produced by :func:`frame_signal`
    has the Hamming window divided back out first (``windowed=True``) so the
    taper does not bias the correlation.
    """
    x = np.asarray(frame, dtype=np.float64)
    if windowed:
        x = x / np.hamming(len(x))
    n = len(x)
    lo = int(np.ceil(rate / PITCH_RANGE[1]))
    hi = min(int(np.floor(rate / PITCH_RANGE[0])), n - 1)
    r = normalized_autocorrelation(x, np.arange(lo, hi + 1))
    peak = float(r.max(initial=0.0))
    ratio = min(max(peak, 0.0), 1.0)
    if ratio <= VOICING_THRESHOLD:
        return 0.0, ratio
    j = int(np.argmax(r >= peak - PEAK_TOLERANCE))
    while j + 1 < len(r) and r[j + 1] > r[j]:
        j += 1
    return rate / (lo + j), ratio


def frame_features(frame: np.ndarray, prev_spectrum: np.ndarray | None = None) -> np.ndarray:
    """36 features of one windowed 400-sample frame.

    ``prev_spectrum`` is the previous frame's :func:`normalized_spectrum`
    (zeros for the first frame) and only affects spectral flux.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if prev_spectrum is None:
        prev_spectrum = np.zeros(N_BINS)
    mag = magnitude_spectrum(frame)
    power = mag * mag
    mag_sum = mag.sum()
    power_sum = power.sum()

    mfcc = dct(np.log(np.maximum(MEL_FB @ power, LOG_FLOOR)), type=2, norm="ortho")[:N_MFCC]

    zcr = zero_crossing_rate(frame)
    energy = float(np.mean(frame * frame))
    sub = frame[: len(frame) // 10 * 10].reshape(10, -1)
    energy_entropy = _entropy(np.sum(sub * sub, axis=1))

    centroid = float(np.sum(NORM_FREQS * power) / (power_sum + EPS))
    spread = float(np.sqrt(np.sum((NORM_FREQS - centroid) ** 2 * power) / (power_sum + EPS)))
    block = N_BINS // 10
    spectral_entropy = _entropy(power[: block * 10].reshape(10, block).sum(axis=1))
    flux = float(np.sum((mag / (mag_sum + EPS) - prev_spectrum) ** 2))
    if power_sum > EPS:
        k = int(np.searchsorted(np.cumsum(power), ROLLOFF * power_sum))
        rolloff = float(NORM_FREQS[min(k, N_BINS - 1)])
    else:
        rolloff = 0.0

    chroma = CHROMA_MAP @ power
    chroma = chroma / (chroma.sum() + EPS)
    chroma_dev = float(np.std(chroma))

    pitch, ratio = pitch_and_harmonic_ratio(frame)

    return np.concatenate([
        mfcc,
        [zcr, energy, energy_entropy, centroid, spread, spectral_entropy, flux, rolloff],
        chroma,
        [chroma_dev, ratio, pitch],
    ])


def extract_sequence(clip: AudioClip, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Raw (un-normalized) feature matrix of shape (n_frames, 36)."""
    frames = frame_signal(clip, spec)
    out = np.empty((len(frames), N_FEATURES))
    prev = np.zeros(N_BINS)
    for i, frame in enumerate(frames):
        out[i] = frame_features(frame, prev)
        prev = normalized_spectrum(frame)
    return out


def extract_file(path) -> np.ndarray:
    return extract_sequence(to_16k(load_wav(path)))


# --------------------------------------------------------------------------
# ALSF feature files


def write_alsf(path, features: np.ndarray) -> None:
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] != N_FEATURES:
        raise DataError(f"feature matrix must be (frames, {N_FEATURES}), got {feats.shape}")
    header = ALSF_MAGIC + struct.pack("<III", ALSF_VERSION, feats.shape[0], feats.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_alsf(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != ALSF_MAGIC:
        raise FormatError(f"{path}: not an ALSF feature file (bad magic)")
    version, n_frames, dim = struct.unpack("<III", buf[4:16])
    if version != ALSF_VERSION:
        raise FormatError(f"{path}: unsupported ALSF version {version}")
    if dim != N_FEATURES:
        raise FormatError(f"{path}: feature dim {dim} != {N_FEATURES}")
    expected = 16 + 4 * n_frames * dim
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(n_frames, dim).astype(np.float64)
