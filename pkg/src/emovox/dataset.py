"""Corpus discovery, label parsing, splits, batching and synthesis.

Label schemes map filenames to emotions via editable key=value tables;
the built-in defaults live in ``emovox/schemes``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import audio_io, dsp
from .errors import (DatasetTooSmall, EmptyDataset, FeatureBelowMinimum,
                     UnrecognizedFilename)
from .nn_core import Rng

SCHEME_NAMES = ("ravdess_fields", "emodb_letter", "tess_token", "regex_manifest")

DEFAULT_SYNTH_CLASSES = ("anger", "boredom", "disgust", "fear",
                         "happiness", "neutral", "sadness")


@dataclass(frozen=True)
class EmotionLabel:
    name: str
    index: int


@dataclass(frozen=True)
class LabelScheme:
    name: str
    table: dict[str, str]
    class_names: tuple[str, ...]

    def key_for(self, filename: str) -> str | None:
        stem = Path(filename).stem
        if self.name == "ravdess_fields":
            parts = stem.split("-")
            return parts[2] if len(parts) >= 3 else None
        if self.name == "emodb_letter":
            return stem[5] if len(stem) >= 6 else None
        if self.name == "tess_token":
            return stem.split("_")[-1].lower()
        # regex_manifest: first pattern that matches the bare filename wins
        base = Path(filename).name
        for pattern, label in self.table.items():
            if re.match(pattern, base):
                return pattern
        return None


def _parse_scheme_lines(name: str, lines) -> LabelScheme:
    table: dict[str, str] = {}
    classes: tuple[str, ...] | None = None
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key == "classes":
            classes = tuple(v.strip() for v in value.split(","))
        else:
            table[key] = value.strip()
    if classes is None:
        classes = tuple(sorted(set(table.values())))
    return LabelScheme(name=name, table=table, class_names=classes)


def load_scheme_file(name: str, path) -> LabelScheme:
    """Read a key=value mapping file (an "classes=" line fixes the order)."""
    with open(path, encoding="utf-8") as fh:
        return _parse_scheme_lines(name, fh)


def builtin_scheme(name: str) -> LabelScheme:
    if name not in SCHEME_NAMES:
        raise ValueError(f"unknown scheme {name!r}; choose from {SCHEME_NAMES}")
    text = resources.files("emovox.schemes").joinpath(f"{name}.txt").read_text("utf-8")
    return _parse_scheme_lines(name, text.splitlines())


def parse_label(filename: str, scheme: LabelScheme) -> EmotionLabel:
    key = scheme.key_for(filename)
    label = scheme.table.get(key) if key is not None else None
    if label is None or label not in scheme.class_names:
        raise UnrecognizedFilename(f"{filename}: no {scheme.name} mapping")
    return EmotionLabel(name=label, index=scheme.class_names.index(label))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: EmotionLabel
    duration_s: float


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    scheme_name: str
    class_names: tuple[str, ...]
    rejects: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def scan_dataset(root, scheme: LabelScheme) -> DatasetManifest:
    """Recursively discover and label every WAV under ``root``.

    Unparseable filenames go to ``rejects``; an empty result raises.
    """
    paths = sorted(p for p in Path(root).rglob("*") if p.suffix.lower() == ".wav")
    entries, rejects, seen = [], [], set()
    for p in paths:
        sp = str(p)
        if sp in seen:
            continue
        seen.add(sp)
        try:
            label = parse_label(p.name, scheme)
            n, sr, _ = audio_io.probe_wav(p)
            entries.append(ManifestEntry(path=sp, label=label, duration_s=n / sr))
        except Exception:
            rejects.append(sp)
    if not entries:
        raise EmptyDataset(f"no labeled WAV files under {root} ({len(rejects)} rejects)")
    return DatasetManifest(entries=entries, scheme_name=scheme.name,
                           class_names=scheme.class_names, rejects=rejects)


def write_manifest_csv(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "duration_s", "scheme"])
        for e in manifest.entries:
            w.writerow([e.path, e.label.name, f"{e.duration_s:.9g}", manifest.scheme_name])


def read_manifest_csv(path, class_names: tuple[str, ...] | None = None) -> DatasetManifest:
    rows = []
    scheme_name = "regex_manifest"
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["path"], row["label"], float(row["duration_s"])))
            scheme_name = row.get("scheme", scheme_name)
    if not rows:
        raise EmptyDataset(f"{path}: empty manifest")
    if class_names is None:
        class_names = tuple(sorted({label for _, label, _ in rows}))
    entries = [ManifestEntry(path=p, duration_s=d,
                             label=EmotionLabel(name=l, index=class_names.index(l)))
               for p, l, d in rows]
    return DatasetManifest(entries=entries, scheme_name=scheme_name, class_names=class_names)


# --- splits -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    folds: list[tuple[np.ndarray, np.ndarray]]  # (train indices, test indices)
    ratio: float
    seed: int


def monte_carlo_split(manifest: DatasetManifest, ratio: float = 0.8,
                      k: int = 5, seed: int = 0) -> SplitPlan:
    """k independent random re-splits of the whole dataset (resampling,
    not a partition across folds)."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(manifest.entries)
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise DatasetTooSmall(f"{n} entries at ratio {ratio} leaves an empty side")
    rng = Rng(seed)
    folds = []
    for _ in range(k):
        perm = rng.permutation(n)
        folds.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return SplitPlan(folds=folds, ratio=ratio, seed=seed)


# --- batching ----------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray        # (N, H_max, W_max, 1) float32, zero padded
    valid_extents: list[tuple[int, int]]
    labels: np.ndarray          # (N, C) one-hot float32
    indices: list[int]          # positions in the input list


def _build_batch(feats, label_idx, order, n_classes):
    h_max = max(feats[i].bins for i in order)
    w_max = max(feats[i].frames for i in order)
    block = np.zeros((len(order), h_max, w_max, 1), dtype=np.float32)
    extents = []
    onehot = np.zeros((len(order), n_classes), dtype=np.float32)
    for row, i in enumerate(order):
        v = feats[i].values
        block[row, : v.shape[0], : v.shape[1], 0] = v
        extents.append((v.shape[0], v.shape[1]))
        onehot[row, label_idx[i]] = 1.0
    return Batch(features=block, valid_extents=extents, labels=onehot,
                 indices=list(order))


def make_batches(features, label_indices, n_classes: int, batch_size: int,
                 mode: str = "pad_mask", rng: Rng | None = None,
                 min_shape: tuple[int, int] = (17, 17)) -> list[Batch]:
    """Group variable-length feature maps for training.

    pad_mask: shuffle, chunk, zero-pad each chunk to its own max extents.
    equal_shape_buckets: group by exact shape first, then chunk (no padding).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode not in ("pad_mask", "equal_shape_buckets"):
        raise ValueError(f"unknown batching mode {mode!r}")
    for fmp in features:
        if fmp.bins < min_shape[0] or fmp.frames < min_shape[1]:
            raise FeatureBelowMinimum(
                f"feature {(fmp.bins, fmp.frames)} below minimum {min_shape}")

    n = len(features)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = []
    if mode == "pad_mask":
        for start in range(0, n, batch_size):
            chunk = order[start:start + batch_size]
            batches.append(_build_batch(features, label_indices, chunk, n_classes))
    else:
        groups: dict[tuple[int, int], list[int]] = {}
        for i in order:
            groups.setdefault((features[i].bins, features[i].frames), []).append(i)
        for shape_key in groups:
            members = groups[shape_key]
            for start in range(0, len(members), batch_size):
                chunk = members[start:start + batch_size]
                batches.append(_build_batch(features, label_indices, chunk, n_classes))
    return batches


# --- feature extraction with cache -------------------------------------------

def _config_digest(descriptor: str, cfg: dsp.MfccConfig) -> str:
    blob = json.dumps({
        "descriptor": descriptor,
        "n_fft": cfg.stft.n_fft, "hop": cfg.stft.hop,
        "window": cfg.stft.window, "center": cfg.stft.center,
        "n_mels": cfg.mel.n_mels, "f_min": cfg.mel.f_min, "f_max": cfg.mel.f_max,
        "power": cfg.mel.power, "db_floor": cfg.mel.db_floor,
        "n_mfcc": cfg.n_mfcc,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _extract_one(args):
    path, descriptor, cfg, cache_dir, cfg_digest = args
    raw = Path(path).read_bytes()
    if cache_dir is not None:
        key = hashlib.sha256(raw + cfg_digest.encode()).hexdigest()
        cached = Path(cache_dir) / f"{key}.fmap"
        if cached.exists():
            return dsp.read_fmap(cached, hop=cfg.stft.hop, sample_rate=audio_io.CANONICAL_RATE)
    clip = audio_io.decode_wav(raw, source_id=str(path))
    clip = audio_io.to_mono(clip)
    clip = audio_io.resample(clip, audio_io.CANONICAL_RATE)
    fmp = dsp.extract(clip, descriptor, cfg)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        dsp.write_fmap(fmp, cached)
        # features always pass through the f32 container so cached and
        # fresh runs batch identically
        return dsp.read_fmap(cached, hop=cfg.stft.hop, sample_rate=audio_io.CANONICAL_RATE)
    return fmp


def extract_features(entries, descriptor: str, cfg: dsp.MfccConfig | None = None,
                     cache_dir=None, workers: int = 1) -> list[dsp.FeatureMap]:
    """Featurize manifest entries (decode, downmix, resample, describe).

    Results are cached as FMAP files keyed by content + config digest when
    ``cache_dir`` is given.
    """
    cfg = cfg or dsp.MfccConfig()
    digest = _config_digest(descriptor, cfg)
    jobs = [(e.path, descriptor, cfg, cache_dir, digest) for e in entries]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_extract_one, jobs, chunksize=8))
    return [_extract_one(j) for j in jobs]


# --- synthetic corpus ---------------------------------------------------------

def synth_corpus(out_dir, class_names=DEFAULT_SYNTH_CLASSES, per_class: int = 10,
                 seed: int = 0, duration_range: tuple[float, float] = (0.6, 3.0),
                 sample_rate: int = audio_io.CANONICAL_RATE) -> DatasetManifest:
    """Generate a labeled corpus of parametric sounds, one family per class.

    Family k combines band-limited noise and a harmonic tone around a
    class-specific mel center (classes spaced widely on the mel axis) with
    a class-specific amplitude-modulation rate, over a broadband noise
    bed; durations vary across ``duration_range``.  Deterministic for a
    given seed.
    """
    if len(class_names) < 2:
        raise ValueError("need at least 2 classes")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    n_classes = len(class_names)
    mel_lo, mel_hi = 550.0, 2350.0
    center_mels = np.linspace(mel_lo, mel_hi, n_classes)
    fundamentals = dsp.mel_to_hz(center_mels)

    entries = []
    for ci, cname in enumerate(class_names):
        f0 = float(fundamentals[ci])
        center_mel = float(center_mels[ci])
        am_rate = 1.5 + 1.9 * ci
        for j in range(per_class):
            dur = float(rng.uniform(duration_range[0], duration_range[1]))
            n = int(round(dur * sample_rate))
            t = np.arange(n) / sample_rate
            f = f0 * (1.0 + 0.004 * float(rng.uniform(-1, 1)))
            phase = float(rng.uniform(0, 2 * np.pi))
            x = np.zeros(n)
            for harm, amp in ((1, 1.0), (2, 0.25)):
                if harm * f < 0.45 * sample_rate:
                    x += amp * np.sin(2 * np.pi * harm * f * t + phase * harm)
            # band-limited noise around the class center (mel-domain window)
            white = rng.uniform(-1, 1, n)
            spec = np.fft.rfft(white)
            freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
            band = np.exp(-0.5 * ((dsp.hz_to_mel(freqs) - center_mel) / 130.0) ** 2)
            banded = np.fft.irfft(spec * band, n)
            banded *= 0.8 / max(1e-9, np.abs(banded).max())
            x = 0.6 * x + banded
            x *= 0.55 + 0.45 * np.sin(2 * np.pi * am_rate * t)
            # broadband bed keeps every mel band above the dB floor
            x += 0.02 * rng.uniform(-1, 1, n)
            x *= 0.4 / max(1e-9, np.abs(x).max())
            clip = audio_io.AudioClip(samples=x, sample_rate=sample_rate)
            path = out / f"{cname}_{j:03d}.wav"
            path.write_bytes(audio_io.encode_wav_pcm16(clip))
            entries.append(ManifestEntry(path=str(path), duration_s=n / sample_rate,
                                         label=EmotionLabel(name=cname, index=ci)))

    scheme_path = out / "label_scheme.txt"
    with open(scheme_path, "w", encoding="utf-8") as fh:
        fh.write("# leading-token labels for the generated corpus\n")
        fh.write("classes=" + ",".join(class_names) + "\n")
        for cname in class_names:
            fh.write(f"^{re.escape(cname)}[_-].*={cname}\n")
    return DatasetManifest(entries=entries, scheme_name="regex_manifest",
                           class_names=tuple(class_names))
