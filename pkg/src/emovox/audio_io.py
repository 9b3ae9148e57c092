"""Audio decoding, downmixing, resampling and segmentation.

Everything downstream of this module sees mono float samples in
[-1.0, 1.0) at one canonical rate (22,050 Hz by default).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ClipTooShort, MalformedContainer, UnsupportedEncoding

CANONICAL_RATE = 22050

# Smallest clip the classifier accepts: the network needs 17 feature frames,
# i.e. floor(n/hop) >= 16 at hop 512, so n >= 8192 samples.
MIN_CLIP_SAMPLES = 16 * 512
MIN_CLIP_SECONDS = MIN_CLIP_SAMPLES / CANONICAL_RATE


@dataclass(frozen=True)
class AudioClip:
    """Decoded audio: interleaved samples plus rate/channel metadata."""

    samples: np.ndarray  # float64, interleaved if channels > 1
    sample_rate: int
    channels: int = 1
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if self.samples.size % self.channels != 0:
            raise ValueError("sample count is not a multiple of channels")

    @property
    def n_frames(self) -> int:
        return self.samples.size // self.channels

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.sample_rate


@dataclass(frozen=True)
class SegmentPolicy:
    """How to cut a clip: n equal pieces, or fixed-duration windows.

    ``min_duration_s`` defaults to the shortest clip the model can
    featurize (17 STFT frames).
    """

    mode: str  # "equal_splits" | "fixed_window"
    n: int = 1
    duration_s: float = 1.0
    min_duration_s: float = field(default=MIN_CLIP_SECONDS)

    def __post_init__(self):
        if self.mode not in ("equal_splits", "fixed_window"):
            raise ValueError(f"unknown segment mode {self.mode!r}")
        if self.mode == "equal_splits" and self.n < 1:
            raise ValueError("equal_splits needs n >= 1")
        if self.mode == "fixed_window" and self.duration_s < self.min_duration_s:
            raise ValueError("fixed_window duration below min_duration_s")

    @staticmethod
    def equal_splits(n: int, min_duration_s: float = MIN_CLIP_SECONDS) -> "SegmentPolicy":
        return SegmentPolicy(mode="equal_splits", n=n, min_duration_s=min_duration_s)

    @staticmethod
    def fixed_window(duration_s: float, min_duration_s: float = MIN_CLIP_SECONDS) -> "SegmentPolicy":
        return SegmentPolicy(mode="fixed_window", duration_s=duration_s,
                             min_duration_s=min_duration_s)


# --- WAV container ------------------------------------------------------

_PCM_SCALE = {8: 128.0, 16: 32768.0, 24: 8388608.0, 32: 2147483648.0}
_ONE_MINUS = np.nextafter(1.0, 0.0)


def decode_wav(data: bytes, source_id: str = "") -> AudioClip:
    """Parse a little-endian RIFF/WAVE container into an AudioClip.

    Accepts PCM 8/16/24/32-bit integer and IEEE 32-bit float payloads.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedContainer("not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedContainer("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise MalformedContainer("data chunk truncated")
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise MalformedContainer("missing fmt or data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format == 0xFFFE:  # WAVE_FORMAT_EXTENSIBLE
        raise UnsupportedEncoding("extensible WAV not supported")
    if channels < 1 or sample_rate < 1:
        raise MalformedContainer("bad channel count or sample rate")

    if audio_format == 1:  # integer PCM
        if bits == 8:
            x = np.frombuffer(payload, dtype=np.uint8)
            samples = (x.astype(np.float64) - 128.0) / _PCM_SCALE[8]
        elif bits == 16:
            samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / _PCM_SCALE[16]
        elif bits == 24:
            raw = np.frombuffer(payload, dtype=np.uint8)
            raw = raw[: (raw.size // 3) * 3].reshape(-1, 3).astype(np.int64)
            vals = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
            vals = np.where(vals >= 1 << 23, vals - (1 << 24), vals)
            samples = vals.astype(np.float64) / _PCM_SCALE[24]
        elif bits == 32:
            samples = np.frombuffer(payload, dtype="<i4").astype(np.float64) / _PCM_SCALE[32]
        else:
            raise UnsupportedEncoding(f"{bits}-bit integer PCM not supported")
    elif audio_format == 3:  # IEEE float
        if bits != 32:
            raise UnsupportedEncoding(f"{bits}-bit float PCM not supported")
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        samples = np.clip(samples, -1.0, _ONE_MINUS)
    else:
        raise UnsupportedEncoding(f"compressed/unknown format tag {audio_format}")

    n = (samples.size // channels) * channels
    return AudioClip(samples=samples[:n], sample_rate=sample_rate,
                     channels=channels, source_id=source_id)


def encode_wav_pcm16(clip: AudioClip) -> bytes:
    """Serialize a clip as 16-bit PCM WAV bytes."""
    x = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = x.tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, clip.channels, clip.sample_rate,
                                 clip.sample_rate * 2 * clip.channels,
                                 2 * clip.channels, 16)
    hdr += b"data" + struct.pack("<I", len(payload))
    return hdr + payload


def probe_wav(path) -> tuple[int, int, int]:
    """Read (n_frames, sample_rate, channels) from a WAV header without
    loading the sample payload."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise MalformedContainer(f"{path}: not a RIFF/WAVE file")
        fmt = None
        data_size = None
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                break
            cid = chunk[:4]
            (size,) = struct.unpack("<I", chunk[4:])
            if cid == b"fmt ":
                body = fh.read(size + (size & 1))
                if len(body) < 16:
                    raise MalformedContainer(f"{path}: fmt chunk too short")
                fmt = struct.unpack_from("<HHIIHH", body, 0)
            else:
                if cid == b"data":
                    data_size = size
                fh.seek(size + (size & 1), 1)
    if fmt is None or data_size is None:
        raise MalformedContainer(f"{path}: missing fmt or data chunk")
    _, channels, rate, _, block_align, bits = fmt
    bytes_per_frame = block_align or channels * (bits // 8)
    return data_size // max(bytes_per_frame, 1), rate, channels


def load_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        return decode_wav(fh.read(), source_id=str(path))


# --- channel and rate conversion ----------------------------------------

def to_mono(clip: AudioClip) -> AudioClip:
    """Average interleaved channels down to one."""
    if clip.channels == 1:
        return clip
    x = clip.samples.reshape(-1, clip.channels).mean(axis=1)
    return replace(clip, samples=x, channels=1)


@lru_cache(maxsize=32)
def _polyphase_filter(up: int, down: int) -> tuple[np.ndarray, int]:
    """Windowed-sinc lowpass split into ``up`` polyphase branches.

    Cutoff sits at 0.45x the smaller of the two Nyquist rates; each branch
    is normalized to unit sum so DC passes exactly.  Returns the branch
    matrix (up, taps_per_phase) and the prototype's center index.
    """
    half = 10 * max(up, down)
    k = np.arange(-half, half + 1, dtype=np.float64)
    fc = 0.225 / max(up, down)  # cycles/sample at the upsampled rate
    h = 2.0 * fc * np.sinc(2.0 * fc * k) * np.kaiser(2 * half + 1, 8.555)
    taps_per_phase = -(-h.size // up)
    h = np.concatenate([h, np.zeros(taps_per_phase * up - h.size)])
    branches = h.reshape(taps_per_phase, up).T.copy()  # [p, q] = h[q*up + p]
    branches /= branches.sum(axis=1, keepdims=True)
    return branches, half


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase rational-rate conversion of a mono clip.

    Output length is ceil(n * target / source); a same-rate call returns
    the clip untouched.
    """
    if clip.channels != 1:
        raise ValueError("resample expects a mono clip")
    if target_rate == clip.sample_rate:
        return clip
    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g

    branches, center = _polyphase_filter(up, down)
    taps = branches.shape[1]
    flipped = branches[:, ::-1].copy()
    x = clip.samples
    n_out = -(-x.size * up // down)

    # replicate-pad so edge outputs see a constant extension of the signal
    pad_left = taps + 2
    pad_right = taps + center // up + 4
    xp = np.concatenate([np.full(pad_left, x[0]), x, np.full(pad_right, x[-1])])

    # output m taps the prototype centered at up-rate position m*down:
    # y[m] = sum_q h[q*up + r] * x[s - q],  r=(m*down+center)%up, s=...//up
    m = np.arange(n_out)
    virt = m * down + center
    phase = virt % up
    starts_all = virt // up - taps + 1 + pad_left
    y = np.empty(n_out, dtype=np.float64)
    offs = np.arange(taps)
    for p in range(up):
        sel = np.nonzero(phase == p)[0]
        if sel.size == 0:
            continue
        idx = starts_all[sel][:, None] + offs[None, :]
        y[sel] = xp[idx] @ flipped[p]
    return replace(clip, samples=y, sample_rate=target_rate)


def segment(clip: AudioClip, policy: SegmentPolicy) -> list[AudioClip]:
    """Cut a mono clip into contiguous pieces per the policy.

    Concatenating the returned segments always reproduces the input
    sample-for-sample.
    """
    if clip.duration_s < policy.min_duration_s:
        raise ClipTooShort(
            f"clip is {clip.duration_s:.3f} s, policy minimum is {policy.min_duration_s:.3f} s")
    n = clip.samples.size
    sr = clip.sample_rate

    if policy.mode == "equal_splits":
        k = policy.n
        base = n // k
        bounds = [i * base for i in range(k)] + [n]  # last piece takes the remainder
    else:
        step = int(round(policy.duration_s * sr))
        min_samples = int(math.ceil(policy.min_duration_s * sr))
        bounds = list(range(0, n, step)) + [n]
        if len(bounds) >= 3 and bounds[-1] - bounds[-2] < min_samples:
            del bounds[-2]  # merge short tail into the previous window

    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        out.append(replace(clip, samples=clip.samples[a:b]))
    return out
