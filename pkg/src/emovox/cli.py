"""Command-line entry point.

Subcommands: synth, extract, train, crossval, evaluate, predict, stream,
report.  Settings resolve as defaults < config file < flags, and every
run that writes outputs also writes the fully resolved configuration next
to them (re-running from that file reproduces the outputs).

Exit codes: 0 success, 2 usage error, 1 runtime error.  Diagnostics go to
stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import audio_io, dataset, dsp, fcn_model, streaming, train_eval
from .errors import EmovoxError
from .nn_core import Rng

DEFAULTS = {
    "common": {"seed": 0, "workers": os.cpu_count() or 1, "cache_dir": ""},
    "features": {"descriptor": "mfcc", "n_fft": 2048, "hop": 512, "window": "hann",
                 "center": True, "n_mels": 128, "f_min": 0.0, "f_max": "",
                 "power": 2.0, "db_floor": -80.0, "n_mfcc": 100},
    "model": {"dropout_rate": 0.5},
    "train": {"max_epochs": 10000, "batch_size": 80, "patience": 50,
              "min_delta": 1e-4, "val_fraction": 0.1, "lr": 1e-3,
              "batch_mode": "pad_mask"},
    "crossval": {"folds": 5, "ratio": 0.8},
    "stream": {"cadence_s": 1.0, "policy": "equal_splits:3"},
}

_FLAG_MAP = {
    "seed": ("common", "seed"), "workers": ("common", "workers"),
    "cache_dir": ("common", "cache_dir"),
    "descriptor": ("features", "descriptor"), "n_fft": ("features", "n_fft"),
    "hop": ("features", "hop"), "window": ("features", "window"),
    "n_mels": ("features", "n_mels"), "n_mfcc": ("features", "n_mfcc"),
    "dropout_rate": ("model", "dropout_rate"),
    "max_epochs": ("train", "max_epochs"), "batch_size": ("train", "batch_size"),
    "patience": ("train", "patience"), "min_delta": ("train", "min_delta"),
    "val_fraction": ("train", "val_fraction"), "lr": ("train", "lr"),
    "batch_mode": ("train", "batch_mode"),
    "folds": ("crossval", "folds"), "ratio": ("crossval", "ratio"),
    "cadence": ("stream", "cadence_s"), "policy": ("stream", "policy"),
}


def _resolve_settings(args) -> dict:
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        with open(args.config, encoding="utf-8") as fh:
            parser.read_file(fh)
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                if sec in cfg and key in cfg[sec]:
                    default = DEFAULTS[sec][key]
                    if isinstance(default, bool):
                        cfg[sec][key] = raw.strip().lower() in ("1", "true", "yes")
                    elif isinstance(default, int):
                        cfg[sec][key] = int(raw)
                    elif isinstance(default, float):
                        cfg[sec][key] = float(raw)
                    else:
                        cfg[sec][key] = raw
    if getattr(args, "seed", None) is None:
        env = os.environ.get("EMOVOX_SEED")
        if env is not None:
            cfg["common"]["seed"] = int(env)
    for flag, (sec, key) in _FLAG_MAP.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[sec][key] = val
    return cfg


def _write_run_config(cfg: dict, out_dir, command: str, inputs: dict) -> None:
    parser = configparser.ConfigParser()
    parser["run"] = {"command": command, **{k: str(v) for k, v in inputs.items()}}
    for sec, vals in cfg.items():
        parser[sec] = {k: str(v) for k, v in vals.items()}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.ini", "w", encoding="utf-8") as fh:
        parser.write(fh)


def _feature_cfg(cfg: dict) -> dsp.MfccConfig:
    f = cfg["features"]
    return dsp.MfccConfig(
        stft=dsp.StftConfig(n_fft=f["n_fft"], hop=f["hop"], window=f["window"],
                            center=f["center"]),
        mel=dsp.MelConfig(n_mels=f["n_mels"], f_min=f["f_min"],
                          f_max=float(f["f_max"]) if f["f_max"] != "" else None,
                          power=f["power"], db_floor=f["db_floor"]),
        n_mfcc=f["n_mfcc"])


def _train_cfg(cfg: dict) -> train_eval.TrainConfig:
    t = cfg["train"]
    return train_eval.TrainConfig(
        max_epochs=t["max_epochs"], batch_size=t["batch_size"],
        patience=t["patience"], min_delta=t["min_delta"],
        val_fraction=t["val_fraction"], lr=t["lr"], batch_mode=t["batch_mode"],
        seed=cfg["common"]["seed"], descriptor=cfg["features"]["descriptor"])


def _load_manifest(args) -> dataset.DatasetManifest:
    if getattr(args, "manifest", None):
        return dataset.read_manifest_csv(args.manifest)
    if getattr(args, "data", None):
        if args.scheme_file:
            scheme = dataset.load_scheme_file(args.scheme, args.scheme_file)
        else:
            scheme = dataset.builtin_scheme(args.scheme)
        return dataset.scan_dataset(args.data, scheme)
    raise EmovoxError("provide --manifest CSV or --data DIR")


def _parse_policy(text: str, min_duration_s: float) -> audio_io.SegmentPolicy:
    kind, _, arg = text.partition(":")
    if kind == "equal_splits":
        return audio_io.SegmentPolicy.equal_splits(int(arg or 3), min_duration_s)
    if kind == "fixed_window":
        return audio_io.SegmentPolicy.fixed_window(float(arg or 1.0), min_duration_s)
    raise EmovoxError(f"unknown policy {text!r} (use equal_splits:N or fixed_window:SECONDS)")


def _cache(cfg) -> str | None:
    return cfg["common"]["cache_dir"] or None


# --- subcommands -----------------------------------------------------------

def _cmd_synth(args) -> int:
    cfg = _resolve_settings(args)
    classes = tuple(args.classes.split(",")) if args.classes else dataset.DEFAULT_SYNTH_CLASSES
    manifest = dataset.synth_corpus(args.out, class_names=classes,
                                    per_class=args.per_class,
                                    seed=cfg["common"]["seed"],
                                    duration_range=(args.duration_min, args.duration_max))
    dataset.write_manifest_csv(manifest, Path(args.out) / "manifest.csv")
    _write_run_config(cfg, args.out, "synth",
                      {"out": args.out, "per_class": args.per_class,
                       "classes": ",".join(classes),
                       "duration_min": args.duration_min,
                       "duration_max": args.duration_max})
    print(f"wrote {len(manifest.entries)} clips to {args.out}", file=sys.stderr)
    return 0


def _cmd_extract(args) -> int:
    cfg = _resolve_settings(args)
    fcfg = _feature_cfg(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for item in args.inputs:
        p = Path(item)
        paths.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() == ".wav")
                     if p.is_dir() else [p])
    if not paths:
        raise EmovoxError("no input WAV files found")
    descriptor = cfg["features"]["descriptor"]
    for p in paths:
        clip = audio_io.to_mono(audio_io.load_wav(p))
        clip = audio_io.resample(clip, audio_io.CANONICAL_RATE)
        fmp = dsp.extract(clip, descriptor, fcfg)
        if args.format in ("fmap", "both"):
            dsp.write_fmap(fmp, out / f"{p.stem}.fmap")
        if args.format in ("csv", "both"):
            dsp.write_feature_csv(fmp, out / f"{p.stem}.csv")
    _write_run_config(cfg, args.out, "extract",
                      {"inputs": ";".join(map(str, args.inputs)), "format": args.format})
    print(f"extracted {len(paths)} files", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_settings(args)
    manifest = _load_manifest(args)
    tcfg = _train_cfg(cfg)
    fcfg = _feature_cfg(cfg)
    feats = dataset.extract_features(manifest.entries, tcfg.descriptor, fcfg,
                                     _cache(cfg), cfg["common"]["workers"])
    labels = [e.label.index for e in manifest.entries]
    model_cfg = fcn_model.FcnConfig(n_classes=len(manifest.class_names),
                                    dropout_rate=cfg["model"]["dropout_rate"])
    model = fcn_model.build_fcn(model_cfg, manifest.class_names, Rng(tcfg.seed))
    model, report = train_eval.train(model, feats, labels, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fcn_model.save_model(model, out / "model.fcna")
    train_eval.write_report_csv(report, out / "history.csv")
    _write_run_config(cfg, args.out, "train",
                      {"manifest": args.manifest or "", "data": args.data or "",
                       "scheme": args.scheme, "out": args.out})
    print(f"stopped at epoch {report.stopped_epoch} (best {report.best_epoch}), "
          f"{report.wall_time_s:.1f}s", file=sys.stderr)
    return 0


def _cmd_crossval(args) -> int:
    cfg = _resolve_settings(args)
    manifest = _load_manifest(args)
    tcfg = _train_cfg(cfg)
    fcfg = _feature_cfg(cfg)
    model_cfg = fcn_model.FcnConfig(n_classes=len(manifest.class_names),
                                    dropout_rate=cfg["model"]["dropout_rate"])
    summary, _ = train_eval.cross_validate(
        manifest, tcfg, fcn_config=model_cfg, feature_cfg=fcfg,
        k=cfg["crossval"]["folds"], ratio=cfg["crossval"]["ratio"],
        seed=cfg["common"]["seed"], out_dir=args.out,
        cache_dir=_cache(cfg), workers=cfg["common"]["workers"])
    _write_run_config(cfg, args.out, "crossval",
                      {"manifest": args.manifest or "", "data": args.data or "",
                       "scheme": args.scheme, "out": args.out})
    print(json.dumps({"per_fold": summary.per_fold, "mean": summary.mean,
                      "median": summary.median, "std": summary.std}))
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _resolve_settings(args)
    manifest = _load_manifest(args)
    model = fcn_model.load_model(args.model)
    fcfg = _feature_cfg(cfg)
    feats = dataset.extract_features(manifest.entries, cfg["features"]["descriptor"],
                                     fcfg, _cache(cfg), cfg["common"]["workers"])
    labels = [e.label.index for e in manifest.entries]
    acc, cm = train_eval.evaluate(model, feats, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_eval.write_confusion_csv(cm, out / "confusion.csv")
    _write_run_config(cfg, args.out, "evaluate",
                      {"model": args.model, "manifest": args.manifest or "",
                       "data": args.data or "", "scheme": args.scheme})
    print(json.dumps({"accuracy": acc}))
    return 0


def _cmd_predict(args) -> int:
    cfg = _resolve_settings(args)
    model = fcn_model.load_model(args.model)
    clip = audio_io.to_mono(audio_io.load_wav(args.wav))
    clip = audio_io.resample(clip, audio_io.CANONICAL_RATE)
    fmp = dsp.extract(clip, cfg["features"]["descriptor"], _feature_cfg(cfg))
    pred = fcn_model.predict(model, fmp)
    print(json.dumps({"label": pred.label,
                      "probs": [float(p) for p in pred.probs]}))
    return 0


def _cmd_stream(args) -> int:
    cfg = _resolve_settings(args)
    model = fcn_model.load_model(args.model)
    fcfg = _feature_cfg(cfg)
    descriptor = cfg["features"]["descriptor"]
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        if args.wav:
            clip = audio_io.to_mono(audio_io.load_wav(args.wav))
            clip = audio_io.resample(clip, audio_io.CANONICAL_RATE)
            policy = _parse_policy(cfg["stream"]["policy"], audio_io.MIN_CLIP_SECONDS)
            timeline = streaming.stream_predict(model, clip, policy, descriptor, fcfg)
            streaming.write_timeline_jsonl(timeline, sink)
        else:
            # raw PCM16 LE on stdin at --rate
            engine = streaming.StreamEngine(model, descriptor, fcfg,
                                            cadence_s=cfg["stream"]["cadence_s"],
                                            sample_rate=audio_io.CANONICAL_RATE)
            rate = args.rate
            src = sys.stdin.buffer
            while True:
                raw = src.read(8192)
                if not raw:
                    break
                x = np.frombuffer(raw[: len(raw) // 2 * 2], dtype="<i2") / 32768.0
                if rate != audio_io.CANONICAL_RATE:
                    clip = audio_io.AudioClip(samples=x, sample_rate=rate)
                    x = audio_io.resample(clip, audio_io.CANONICAL_RATE).samples
                for t, pred in engine.push_samples(x):
                    sink.write(json.dumps({"t": t, "label": pred.label,
                                           "probs": [float(p) for p in pred.probs]}) + "\n")
                    sink.flush()
            for t, pred in engine.flush():
                sink.write(json.dumps({"t": t, "label": pred.label,
                                       "probs": [float(p) for p in pred.probs]}) + "\n")
    finally:
        if args.out:
            sink.close()
    return 0


def _cmd_report(args) -> int:
    rows = []
    for item in args.summaries:
        s = train_eval.read_cv_summary_json(item)
        rows.append((Path(item).parent.name or item, s))
    name_w = max(len("Run"), max(len(r[0]) for r in rows))
    print(f"{'Run':<{name_w}}  {'Mean':>8}  {'Median':>8}  {'Std':>8}")
    for name, s in rows:
        print(f"{name:<{name_w}}  {s.mean:>8.2f}  {s.median:>8.2f}  {s.std:>8.4f}")
    return 0


# --- argument wiring ---------------------------------------------------------

def _add_common(p, out_required=True):
    p.add_argument("--config", help="sectioned key=value settings file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--cache-dir", dest="cache_dir", default=None)
    if out_required:
        p.add_argument("--out", required=True, help="output directory")


def _add_data(p):
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--data", help="directory of labeled WAV files")
    p.add_argument("--scheme", default="regex_manifest", choices=dataset.SCHEME_NAMES)
    p.add_argument("--scheme-file", dest="scheme_file", help="override mapping file")


def _add_features(p):
    p.add_argument("--descriptor", choices=("mfcc", "mel_spectrogram_db"), default=None)
    p.add_argument("--n-fft", dest="n_fft", type=int, default=None)
    p.add_argument("--hop", type=int, default=None)
    p.add_argument("--n-mels", dest="n_mels", type=int, default=None)
    p.add_argument("--n-mfcc", dest="n_mfcc", type=int, default=None)


def _add_train(p):
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--min-delta", dest="min_delta", type=float, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-mode", dest="batch_mode",
                   choices=("pad_mask", "equal_shape_buckets"), default=None)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emovox",
                                 description="Variable-length speech emotion recognition")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    _add_common(p)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--per-class", dest="per_class", type=int, default=10)
    p.add_argument("--duration-min", dest="duration_min", type=float, default=0.6)
    p.add_argument("--duration-max", dest="duration_max", type=float, default=3.0)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("extract", help="WAVs to feature files")
    _add_common(p)
    _add_features(p)
    p.add_argument("inputs", nargs="+", help="WAV files or directories")
    p.add_argument("--format", choices=("fmap", "csv", "both"), default="fmap")
    p.set_defaults(fn=_cmd_extract)

    p = sub.add_parser("train", help="train a model on a labeled dataset")
    _add_common(p)
    _add_data(p)
    _add_features(p)
    _add_train(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("crossval", help="Monte Carlo cross-validation")
    _add_common(p)
    _add_data(p)
    _add_features(p)
    _add_train(p)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.set_defaults(fn=_cmd_crossval)

    p = sub.add_parser("evaluate", help="accuracy + confusion matrix of a model")
    _add_common(p)
    _add_data(p)
    _add_features(p)
    p.add_argument("--model", required=True)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("predict", help="classify one WAV file")
    _add_common(p, out_required=False)
    _add_features(p)
    p.add_argument("model")
    p.add_argument("wav")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("stream", help="per-segment timeline for a WAV or PCM stdin")
    _add_common(p, out_required=False)
    _add_features(p)
    p.add_argument("--model", required=True)
    p.add_argument("--wav", help="offline mode: segment this file")
    p.add_argument("--rate", type=int, default=audio_io.CANONICAL_RATE,
                   help="sample rate of PCM16 stdin")
    p.add_argument("--policy", default=None, help="equal_splits:N or fixed_window:SECONDS")
    p.add_argument("--cadence", type=float, default=None, help="online window seconds")
    p.add_argument("--out", help="write JSONL here instead of stdout")
    p.set_defaults(fn=_cmd_stream)

    p = sub.add_parser("report", help="summary table from cv_summary.json files")
    p.add_argument("summaries", nargs="+")
    p.set_defaults(fn=_cmd_report)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except EmovoxError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
