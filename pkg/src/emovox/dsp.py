"""Feature-extraction mathematics.

Radix-2 FFT, short-time Fourier transform, mel scale and filterbank,
decibel scaling, orthonormal DCT-II, and the two audio descriptors built
from them: dB mel spectrograms and MFCCs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio_io import AudioClip
from .errors import (InputTooShort, LengthNotPowerOfTwo, MalformedContainer,
                     NegativeFrequency)

MEL_SCALE = 1127.01048  # makes mel(1000 Hz) = 1000 mels


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    hop: int = 512
    window: str = "hann"  # "hann" | "rectangular"
    center: bool = True

    def __post_init__(self):
        if self.n_fft < 1 or self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError("hop must be in (0, n_fft]")
        if self.window not in ("hann", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float | None = None  # None -> sample_rate / 2
    power: float = 2.0
    db_floor: float = -80.0

    def __post_init__(self):
        if self.n_mels < 2:
            raise ValueError("n_mels must be >= 2")
        if self.power <= 0:
            raise ValueError("power must be positive")
        if self.f_min < 0:
            raise ValueError("f_min must be >= 0")

    def resolve_f_max(self, sample_rate: int) -> float:
        f_max = sample_rate / 2 if self.f_max is None else self.f_max
        if not self.f_min < f_max <= sample_rate / 2:
            raise ValueError("need f_min < f_max <= sample_rate/2")
        return f_max


@dataclass(frozen=True)
class MfccConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    n_mfcc: int = 100

    def __post_init__(self):
        if not 1 <= self.n_mfcc <= self.mel.n_mels:
            raise ValueError("need 1 <= n_mfcc <= n_mels")


@dataclass(frozen=True)
class FeatureMap:
    """2-D feature matrix (bins, frames) with frame-center timestamps."""

    values: np.ndarray
    frame_times: np.ndarray
    descriptor: str  # "mel_spectrogram_db" | "mfcc"

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("values must be (bins, frames) with frames >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if np.any(np.diff(self.frame_times) <= 0) and self.frame_times.size > 1:
            raise ValueError("frame_times must be strictly increasing")

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


# --- FFT -----------------------------------------------------------------

@lru_cache(maxsize=32)
def _bit_reverse(n: int) -> np.ndarray:
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    bits = n.bit_length() - 1
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    half = size // 2
    return np.exp(-2j * np.pi * np.arange(half) / size)


def _fft_last_axis(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (any leading
    shape), unnormalized forward transform."""
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise LengthNotPowerOfTwo(f"length {n} is not a power of two")
    out = np.ascontiguousarray(x[..., _bit_reverse(n)], dtype=np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        w = _twiddles(size)
        v = out.reshape(*out.shape[:-1], n // size, size)
        t = v[..., half:] * w
        v[..., half:] = v[..., :half] - t
        v[..., :half] += t
        size *= 2
    return out


def fft(x) -> np.ndarray:
    """Unnormalized DFT of a power-of-two-length vector."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("fft expects a 1-D vector")
    return _fft_last_axis(x)


def ifft(x) -> np.ndarray:
    """Inverse of :func:`fft` (1/N normalization)."""
    x = np.asarray(x)
    return np.conj(_fft_last_axis(np.conj(x))) / x.shape[-1]


# --- STFT ----------------------------------------------------------------

def _window_values(cfg: StftConfig) -> np.ndarray:
    if cfg.window == "hann":
        n = cfg.n_fft
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return np.ones(cfg.n_fft)


def stft(samples: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex STFT, shape (n_fft/2 + 1, frames).

    Centered mode reflect-pads by n_fft/2 so frame t is centered on sample
    t*hop; uncentered frames start at t*hop and need len >= n_fft.
    """
    x = np.asarray(samples, dtype=np.float64)
    n_fft, hop = cfg.n_fft, cfg.hop
    if cfg.center:
        pad = n_fft // 2
        if x.size <= pad:
            raise InputTooShort(f"need more than {pad} samples for centered STFT")
        x = np.pad(x, pad, mode="reflect")
        n_frames = 1 + (x.size - n_fft) // hop
    else:
        if x.size < n_fft:
            raise InputTooShort(f"need at least {n_fft} samples")
        n_frames = 1 + (x.size - n_fft) // hop

    s = x.strides[0]
    frames = np.lib.stride_tricks.as_strided(x, (n_frames, n_fft), (hop * s, s))
    spec = _fft_last_axis(frames * _window_values(cfg))
    return spec[:, : n_fft // 2 + 1].T.copy()


def frame_times(n_frames: int, cfg: StftConfig, sample_rate: int) -> np.ndarray:
    t = np.arange(n_frames) * cfg.hop
    if not cfg.center:
        t = t + cfg.n_fft // 2
    return t / sample_rate


# --- mel scale and filterbank ---------------------------------------------

def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise NegativeFrequency("frequency must be >= 0")
    return MEL_SCALE * np.log1p(f / 700.0)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise NegativeFrequency("mel value must be >= 0")
    return 700.0 * np.expm1(m / MEL_SCALE)


def mel_center_frequencies(cfg: MelConfig, sample_rate: int) -> np.ndarray:
    """Hz centers of the n_mels triangular filters (pre-snapping)."""
    f_max = cfg.resolve_f_max(sample_rate)
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(cfg: MelConfig, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on mel-spaced corners, shape (n_mels, n_fft/2+1).

    Corners are snapped onto FFT bins; every filter peaks at exactly 1.
    """
    f_max = cfg.resolve_f_max(sample_rate)
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    hz = mel_to_hz(mels)
    n_bins = n_fft // 2 + 1
    pts = np.minimum(np.round(hz * n_fft / sample_rate).astype(int), n_bins - 1)

    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, cen, hi = pts[i], pts[i + 1], pts[i + 2]
        for m in range(lo + 1, cen):
            fb[i, m] = (m - lo) / (cen - lo)
        fb[i, cen] = 1.0
        for m in range(cen + 1, hi):
            fb[i, m] = (hi - m) / (hi - cen)
    return fb


def power_to_db(m: np.ndarray, floor: float = -80.0) -> np.ndarray:
    """dB relative to the matrix maximum, clamped at ``floor``.

    An all-zero input maps to ``floor`` everywhere.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("power values must be >= 0")
    ref = m.max() if m.size else 0.0
    if ref <= 0.0:
        return np.full(m.shape, floor)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(m / ref)
    return np.maximum(db, floor)


# --- DCT ------------------------------------------------------------------

@lru_cache(maxsize=16)
def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * j + 1) * k / (2 * n))
    mat[0] *= np.sqrt(1.0 / n)
    mat[1:] *= np.sqrt(2.0 / n)
    return mat


def dct2_ortho(v: np.ndarray) -> np.ndarray:
    """Orthonormal type-II DCT of a vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("dct2_ortho expects a non-empty 1-D vector")
    return _dct_matrix(v.size) @ v


# --- descriptors -----------------------------------------------------------

def _mel_power(clip: AudioClip, stft_cfg: StftConfig, mel_cfg: MelConfig):
    if clip.channels != 1:
        raise ValueError("feature extraction expects mono clips")
    spec = stft(clip.samples, stft_cfg)
    power = np.abs(spec) ** mel_cfg.power
    fb = mel_filterbank(mel_cfg, stft_cfg.n_fft, clip.sample_rate)
    return fb @ power


def mel_spectrogram(clip: AudioClip,
                    stft_cfg: StftConfig = StftConfig(),
                    mel_cfg: MelConfig = MelConfig()) -> FeatureMap:
    """dB-scaled mel spectrogram, shape (n_mels, frames)."""
    mel_pow = _mel_power(clip, stft_cfg, mel_cfg)
    values = power_to_db(mel_pow, floor=mel_cfg.db_floor)
    return FeatureMap(values=values,
                      frame_times=frame_times(values.shape[1], stft_cfg, clip.sample_rate),
                      descriptor="mel_spectrogram_db")


def mfcc(clip: AudioClip, cfg: MfccConfig = MfccConfig()) -> FeatureMap:
    """Mel-frequency cepstral coefficients, shape (n_mfcc, frames).

    Log-energies use the same dB convention as the spectrogram path; the
    DCT runs along the mel axis and the first n_mfcc coefficients are kept.
    """
    mel_pow = _mel_power(clip, cfg.stft, cfg.mel)
    log_mel = power_to_db(mel_pow, floor=cfg.mel.db_floor)
    coeffs = _dct_matrix(cfg.mel.n_mels)[: cfg.n_mfcc] @ log_mel
    return FeatureMap(values=coeffs,
                      frame_times=frame_times(coeffs.shape[1], cfg.stft, clip.sample_rate),
                      descriptor="mfcc")


def extract(clip: AudioClip, descriptor: str, cfg: MfccConfig = MfccConfig()) -> FeatureMap:
    """Dispatch on descriptor name ("mfcc" or "mel_spectrogram_db")."""
    if descriptor == "mfcc":
        return mfcc(clip, cfg)
    if descriptor == "mel_spectrogram_db":
        return mel_spectrogram(clip, cfg.stft, cfg.mel)
    raise ValueError(f"unknown descriptor {descriptor!r}")


# --- FeatureMap persistence -------------------------------------------------

_FMAP_MAGIC = b"FMAP"
_FMAP_VERSION = 1
_DESCRIPTOR_TAGS = {"mel_spectrogram_db": 0, "mfcc": 1}
_TAG_DESCRIPTORS = {v: k for k, v in _DESCRIPTOR_TAGS.items()}


def write_fmap(fm: FeatureMap, path) -> None:
    """Raw binary form: FMAP magic, version, dims, tag, f32 LE row-major."""
    with open(path, "wb") as fh:
        fh.write(_FMAP_MAGIC)
        fh.write(struct.pack("<IIIB", _FMAP_VERSION, fm.bins, fm.frames,
                             _DESCRIPTOR_TAGS[fm.descriptor]))
        fh.write(fm.values.astype("<f4").tobytes())


def read_fmap(path, hop: int = 512, sample_rate: int = 22050) -> FeatureMap:
    """Load an FMAP file; frame times are rebuilt from hop/sample_rate
    (the container does not store them)."""
    with open(path, "rb") as fh:
        head = fh.read(4 + 13)
        if len(head) < 17 or head[:4] != _FMAP_MAGIC:
            raise MalformedContainer(f"{path}: bad FMAP header")
        version, bins, frames, tag = struct.unpack("<IIIB", head[4:])
        if version != _FMAP_VERSION:
            raise MalformedContainer(f"{path}: unsupported FMAP version {version}")
        payload = fh.read(bins * frames * 4)
        if len(payload) < bins * frames * 4:
            raise MalformedContainer(f"{path}: truncated FMAP payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(bins, frames)
    return FeatureMap(values=values,
                      frame_times=np.arange(frames) * hop / sample_rate,
                      descriptor=_TAG_DESCRIPTORS.get(tag, "mfcc"))



def write_feature_csv(fm: FeatureMap, path) -> None:
    """CSV export: bins as rows, frames as columns, 9 significant digits."""
    np.savetxt(path, fm.values, delimiter=",", fmt="%.9g")
