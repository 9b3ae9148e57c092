"""Training loop, evaluation, and the Monte Carlo cross-validation protocol."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataset, dsp, fcn_model
from .errors import DatasetTooSmall, NonFiniteLoss
from .nn_core import AdamState, Rng, adam_step, softmax_cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 10_000
    batch_size: int = 80
    patience: int = 50
    min_delta: float = 1e-4
    restore_best: bool = True
    val_fraction: float = 0.1
    seed: int = 0
    descriptor: str = "mfcc"
    batch_mode: str = "pad_mask"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TrainReport:
    history: list[dict]  # per-epoch train/val loss and accuracy
    stopped_epoch: int
    best_epoch: int
    wall_time_s: float


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows true, columns predicted
    class_names: tuple[str, ...]

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return 100.0 * self.counts.trace() / total if total else 0.0


@dataclass
class CvSummary:
    per_fold: list[float]  # accuracies in percent
    mean: float
    median: float
    std: float

    @staticmethod
    def from_accuracies(accs) -> "CvSummary":
        a = np.asarray(accs, dtype=np.float64)
        return CvSummary(per_fold=[float(v) for v in a], mean=float(a.mean()),
                         median=float(np.median(a)), std=float(a.std()))


def _eval_batches(model, batches):
    loss_sum, correct, count = 0.0, 0, 0
    for b in batches:
        probs, cache = fcn_model.forward(model, b.features, b.valid_extents, training=False)
        loss, _, _ = softmax_cross_entropy(cache["logits"], b.labels)
        loss_sum += loss * len(b.indices)
        correct += int((probs.argmax(1) == b.labels.argmax(1)).sum())
        count += len(b.indices)
    return loss_sum / count, 100.0 * correct / count


def train(model: fcn_model.FcnModel, features, label_indices,
          cfg: TrainConfig = TrainConfig()):
    """Adam + cross-entropy with early stopping on a validation carve-out.

    Mutates ``model`` in place and also returns it with a TrainReport.
    Deterministic for a fixed (seed, data, config).
    """
    t0 = time.perf_counter()
    n = len(features)
    n_classes = model.config.n_classes
    rng = Rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n - n_val < 1:
        raise DatasetTooSmall(f"{n} clips cannot support a {cfg.val_fraction} validation split")
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    val_batches = dataset.make_batches([features[i] for i in val_idx],
                                       [label_indices[i] for i in val_idx],
                                       n_classes, cfg.batch_size, cfg.batch_mode)
    tr_feats = [features[i] for i in tr_idx]
    tr_labels = [label_indices[i] for i in tr_idx]

    opt = model.optimizer_state
    if opt is None:
        opt = {name: AdamState.fresh(p, lr=cfg.lr, beta1=cfg.beta1,
                                     beta2=cfg.beta2, eps=cfg.eps)
               for name, p in model.params.items()}

    history = []
    best_val = np.inf
    best_epoch = 0
    best_params = None
    wait = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        erng = rng.derive(epoch)
        batches = dataset.make_batches(tr_feats, tr_labels, n_classes,
                                       cfg.batch_size, cfg.batch_mode, rng=erng)
        loss_sum, correct, count = 0.0, 0, 0
        for bi, b in enumerate(batches):
            probs, cache = fcn_model.forward(model, b.features, b.valid_extents,
                                             training=True, rng=erng)
            loss, _, grad_logits = softmax_cross_entropy(cache["logits"], b.labels)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = fcn_model.backward(model, grad_logits, cache)
            for name in fcn_model.PARAM_ORDER:
                model.params[name], opt[name] = adam_step(model.params[name],
                                                          grads[name], opt[name])
            loss_sum += loss * len(b.indices)
            correct += int((probs.argmax(1) == b.labels.argmax(1)).sum())
            count += len(b.indices)

        val_loss, val_acc = _eval_batches(model, val_batches)
        history.append({"epoch": epoch, "train_loss": loss_sum / count,
                        "train_acc": 100.0 * correct / count,
                        "val_loss": val_loss, "val_acc": val_acc})

        if val_loss < best_val - cfg.min_delta:
            best_val, best_epoch, wait = val_loss, epoch, 0
            if cfg.restore_best:
                best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            wait += 1
            if wait > cfg.patience:
                break

    if cfg.restore_best and best_params is not None:
        model.params = best_params
    model.optimizer_state = opt
    return model, TrainReport(history=history, stopped_epoch=epoch,
                              best_epoch=best_epoch,
                              wall_time_s=time.perf_counter() - t0)


def evaluate(model: fcn_model.FcnModel, features, label_indices):
    """Whole-file inference per clip; returns (accuracy %, ConfusionMatrix)."""
    c = model.config.n_classes
    counts = np.zeros((c, c), dtype=np.int64)
    for fmp, true_idx in zip(features, label_indices):
        pred = fcn_model.predict(model, fmp)
        counts[true_idx, pred.argmax_index] += 1
    cm = ConfusionMatrix(counts=counts, class_names=tuple(model.class_names))
    return cm.accuracy, cm


def _run_fold(args):
    (fold_index, seed, train_pack, test_pack, fcn_config, class_names,
     cfg, out_dir) = args
    fold_seed = seed ^ fold_index
    model = fcn_model.build_fcn(fcn_config, class_names, Rng(fold_seed))
    fold_cfg = replace(cfg, seed=fold_seed)
    model, report = train(model, train_pack[0], train_pack[1], fold_cfg)
    acc, cm = evaluate(model, test_pack[0], test_pack[1])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fcn_model.save_model(model, out / f"fold{fold_index}.fcna")
        write_confusion_csv(cm, out / f"fold{fold_index}_confusion.csv")
        write_report_csv(report, out / f"fold{fold_index}_history.csv")
    return acc, cm, report


def cross_validate(manifest: dataset.DatasetManifest, cfg: TrainConfig,
                   fcn_config: fcn_model.FcnConfig | None = None,
                   feature_cfg: dsp.MfccConfig | None = None,
                   k: int = 5, ratio: float = 0.8, seed: int = 0,
                   out_dir=None, cache_dir=None, workers: int = 1):
    """k independent 80-20 resamplings, a fresh model per fold.

    Returns (CvSummary, list of per-fold (accuracy, ConfusionMatrix,
    TrainReport)).  Fold model seeds are seed XOR fold index.
    """
    fcn_config = fcn_config or fcn_model.FcnConfig(n_classes=len(manifest.class_names))
    features = dataset.extract_features(manifest.entries, cfg.descriptor,
                                        feature_cfg, cache_dir, workers)
    labels = [e.label.index for e in manifest.entries]
    plan = dataset.monte_carlo_split(manifest, ratio, k, seed)

    jobs = []
    for fi, (tr, te) in enumerate(plan.folds):
        train_pack = ([features[i] for i in tr], [labels[i] for i in tr])
        test_pack = ([features[i] for i in te], [labels[i] for i in te])
        jobs.append((fi, seed, train_pack, test_pack, fcn_config,
                     manifest.class_names, cfg, out_dir))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]

    summary = CvSummary.from_accuracies([r[0] for r in results])
    if out_dir is not None:
        write_cv_summary_json(summary, Path(out_dir) / "cv_summary.json")
    return summary, results


# --- report serialization ------------------------------------------------

def write_report_csv(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for row in report.history:
            w.writerow([row["epoch"], f"{row['train_loss']:.9g}", f"{row['train_acc']:.9g}",
                        f"{row['val_loss']:.9g}", f"{row['val_acc']:.9g}"])


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *cm.class_names])
        for name, row in zip(cm.class_names, cm.counts):
            w.writerow([name, *row.tolist()])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts=counts, class_names=names)


def write_cv_summary_json(summary: CvSummary, path) -> None:
    with open(path, "w") as fh:
        json.dump({"per_fold": summary.per_fold, "mean": summary.mean,
                   "median": summary.median, "std": summary.std}, fh, indent=2)
        fh.write("\n")


def read_cv_summary_json(path) -> CvSummary:
    with open(path) as fh:
        d = json.load(fh)
    return CvSummary(per_fold=d["per_fold"], mean=d["mean"],
                     median=d["median"], std=d["std"])
