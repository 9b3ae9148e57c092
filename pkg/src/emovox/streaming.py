"""Near-real-time emotion tracking.

Offline: split a clip per policy and classify each piece independently.
Online: push raw sample chunks into an engine that emits one prediction
per tumbling cadence window.  Every window is featurized from its own raw
samples, exactly as a live stream would see them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import audio_io, dsp, fcn_model
from .audio_io import AudioClip, SegmentPolicy


@dataclass(frozen=True)
class TimelineEntry:
    start_s: float
    end_s: float
    prediction: fcn_model.Prediction


@dataclass
class EmotionTimeline:
    entries: list[TimelineEntry]
    overall: fcn_model.Prediction | None = None
    clip_label: str | None = None


def stream_predict(model: fcn_model.FcnModel, clip: AudioClip,
                   policy: SegmentPolicy, descriptor: str = "mfcc",
                   cfg: dsp.MfccConfig | None = None,
                   include_overall: bool = True,
                   clip_label: str | None = None) -> EmotionTimeline:
    """Segment-wise classification of one clip plus an optional
    whole-file prediction."""
    cfg = cfg or dsp.MfccConfig()
    pieces = audio_io.segment(clip, policy)
    entries = []
    pos = 0
    for seg in pieces:
        start = pos / clip.sample_rate
        pos += seg.samples.size
        end = pos / clip.sample_rate
        pred = fcn_model.predict(model, dsp.extract(seg, descriptor, cfg))
        entries.append(TimelineEntry(start_s=start, end_s=end, prediction=pred))
    overall = None
    if include_overall:
        overall = fcn_model.predict(model, dsp.extract(clip, descriptor, cfg))
    return EmotionTimeline(entries=entries, overall=overall, clip_label=clip_label)


@dataclass
class StreamEngine:
    """Tumbling-window online classifier over pushed sample chunks.

    Accumulates mono samples at ``sample_rate``; each full cadence window
    is featurized, classified and dropped from the buffer.  Sub-minimum
    audio left at flush is discarded (counted, never padded).
    """

    model: fcn_model.FcnModel
    descriptor: str = "mfcc"
    cfg: dsp.MfccConfig = field(default_factory=dsp.MfccConfig)
    cadence_s: float = 1.0
    sample_rate: int = audio_io.CANONICAL_RATE
    min_samples: int = audio_io.MIN_CLIP_SAMPLES

    def __post_init__(self):
        self._buffer = np.empty(0, dtype=np.float64)
        self._window = int(round(self.cadence_s * self.sample_rate))
        if self._window < self.min_samples:
            raise ValueError("cadence window below the model's minimum clip length")
        self.emitted = 0
        self.dropped_windows = 0

    def _classify(self, samples: np.ndarray) -> fcn_model.Prediction:
        clip = AudioClip(samples=samples, sample_rate=self.sample_rate)
        return fcn_model.predict(self.model, dsp.extract(clip, self.descriptor, self.cfg))

    def push_samples(self, chunk) -> list[tuple[float, fcn_model.Prediction]]:
        """Append samples; returns one (timestamp, prediction) per
        completed cadence window (possibly none)."""
        chunk = np.asarray(chunk, dtype=np.float64)
        self._buffer = np.concatenate([self._buffer, chunk])
        out = []
        while self._buffer.size >= self._window:
            window, self._buffer = self._buffer[:self._window], self._buffer[self._window:]
            self.emitted += 1
            out.append((self.emitted * self.cadence_s, self._classify(window)))
        return out

    def flush(self) -> list[tuple[float, fcn_model.Prediction]]:
        """Classify the remainder if it is long enough, then reset."""
        out = []
        if self._buffer.size >= self.min_samples:
            t = self.emitted * self.cadence_s + self._buffer.size / self.sample_rate
            out.append((t, self._classify(self._buffer)))
            self.emitted += 1
        elif self._buffer.size > 0:
            self.dropped_windows += 1
        self._buffer = np.empty(0, dtype=np.float64)
        return out


# --- timeline serialization -------------------------------------------------

def write_timeline_jsonl(timeline: EmotionTimeline, fh) -> None:
    """One JSON object per line: {start_s, end_s, label, probs}."""
    for e in timeline.entries:
        fh.write(json.dumps({"start_s": e.start_s, "end_s": e.end_s,
                             "label": e.prediction.label,
                             "probs": [float(p) for p in e.prediction.probs]}))
        fh.write("\n")


def write_timeline_csv(timeline: EmotionTimeline, fh) -> None:
    w = csv.writer(fh)
    w.writerow(["start_s", "end_s", "label", "probs"])
    for e in timeline.entries:
        w.writerow([f"{e.start_s:.6f}", f"{e.end_s:.6f}", e.prediction.label,
                    " ".join(f"{p:.9g}" for p in e.prediction.probs)])
