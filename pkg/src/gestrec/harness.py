"""Training loop, evaluation reports, and the loss-ablation experiment.

Training is deterministic given the config seed: parameter init, epoch
shuffling, and per-clip preprocessing all draw from fixed streams
(preprocessing streams are keyed by each clip's own manifest seed, so a
clip preprocesses identically no matter which run touches it). Reference
mode is single-threaded; ``n_jobs > 1`` preprocesses clips in a thread
pool, which does not change results because each clip's pipeline is pure.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model, objective, ops
from .autodiff import backward, no_grad
from .objective import Batch, LongLossParams
from .preproc import PreprocConfig, preprocess_clip
from .rng import Rng
from .synthdata import DatasetManifest, load_clip


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries epoch, batch and norms."""


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_mode: str = "longloss"              # "ce" or "longloss"
    loss_params: LongLossParams = field(default_factory=LongLossParams)
    checkpoint_path: str | None = None
    eval_cadence: int = 0                    # epochs between evals; 0 = never
    n_jobs: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.loss_mode not in ("ce", "longloss"):
            raise ValueError(f"loss_mode must be ce or longloss, got {self.loss_mode!r}")


@dataclass
class EvalReport:
    """Aggregate test metrics; distance bins are 1 m wide over [4, 20)."""

    accuracy: float
    mean_loss: float
    mean_ap: float
    bin_counts: list[int]
    bin_correct: list[int]
    per_class_accuracy: list[float]
    confusion: list[list[int]]

    @property
    def bin_accuracy(self) -> list[float]:
        return [c / n if n else 0.0 for c, n in zip(self.bin_correct, self.bin_counts)]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
            "mean_ap": self.mean_ap,
            "bin_counts": self.bin_counts,
            "bin_correct": self.bin_correct,
            "bin_accuracy": self.bin_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


N_BINS = 16


def distance_bin(d: float) -> int:
    return int(np.clip(np.floor(d - 4.0), 0, N_BINS - 1))


@dataclass
class ClipArrays:
    """Preprocessed dataset held in memory: frames, labels, distances."""

    frames: np.ndarray       # (N, k, C, h, w) float32
    labels: np.ndarray       # (N,) int64
    distances: np.ndarray    # (N,) float64


def load_and_preprocess(manifest: DatasetManifest, pre_cfg: PreprocConfig,
                        n_jobs: int = 1) -> ClipArrays:
    """Load every manifest clip and run preprocessing once per clip.

    Each clip's keyframe rng derives from its own manifest seed, so the
    result is independent of ordering and of the training seed. Unreadable
    clips fail fast with the offending path.
    """
    def one(record):
        path = manifest.clip_path(record)
        try:
            clip = load_clip(path)
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"failed loading clip {path}: {exc}") from exc
        return preprocess_clip(clip, pre_cfg, rng=Rng(record.seed).child(1))

    records = manifest.records
    if not records:
        raise ValueError("manifest is empty")
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            frames = list(pool.map(one, records))
    else:
        frames = [one(r) for r in records]
    return ClipArrays(
        frames=np.stack(frames),
        labels=np.array([r.label_id for r in records], dtype=np.int64),
        distances=np.array([r.distance_m for r in records], dtype=np.float64),
    )


class Adam:
    """Adam with bias correction, keyed by parameter name."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: model.SftParams) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, node in params.items():
            g = node.grad
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(node.value))
            v = self.v.setdefault(name, np.zeros_like(node.value))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            node.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(node.dtype)


def _batch_loss(logits, labels, distances, cfg: TrainConfig):
    if cfg.loss_mode == "ce":
        return objective.mean_cross_entropy(logits, labels)
    return objective.long_loss(Batch(logits, labels, distances), cfg.loss_params)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    eval_metrics: dict | None = None


def train_on_arrays(data: ClipArrays, model_cfg: model.SftConfig, cfg: TrainConfig,
                    eval_data: ClipArrays | None = None):
    """Train on preprocessed arrays; returns (params, list of EpochLog)."""
    params = model.init_params(model_cfg, Rng(cfg.seed).child(0))
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    N = data.frames.shape[0]
    logs: list[EpochLog] = []
    for epoch in range(cfg.epochs):
        order = Rng(cfg.seed).child(2, epoch).permutation(N)
        losses = []
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = model.sft_forward(data.frames[idx], params)
            loss = _batch_loss(logits, data.labels[idx], data.distances[idx], cfg)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                norms = {n: float(np.linalg.norm(p.value)) for n, p in params.items()}
                worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}; "
                    f"largest parameter norms: {worst}")
            backward(loss)
            opt.step(params)
            for p in params.values():
                p.grad = None
            losses.append(loss_val)
        entry = EpochLog(epoch=epoch, train_loss=float(np.mean(losses)))
        if (eval_data is not None and cfg.eval_cadence > 0
                and (epoch + 1) % cfg.eval_cadence == 0):
            report = evaluate_arrays(eval_data, params, cfg.loss_params)
            entry.eval_metrics = {"accuracy": report.accuracy, "mean_loss": report.mean_loss,
                                  "mean_ap": report.mean_ap}
        logs.append(entry)
    if cfg.checkpoint_path:
        model.save_checkpoint(params, cfg.checkpoint_path)
    return params, logs


def train(manifest: DatasetManifest, model_cfg: model.SftConfig, cfg: TrainConfig,
          pre_cfg: PreprocConfig | None = None, eval_manifest: DatasetManifest | None = None):
    """Load, preprocess, and train; see :func:`train_on_arrays`."""
    pre_cfg = pre_cfg or PreprocConfig(k=model_cfg.k, out_hw=model_cfg.input_hw)
    data = load_and_preprocess(manifest, pre_cfg, cfg.n_jobs)
    eval_data = (load_and_preprocess(eval_manifest, pre_cfg, cfg.n_jobs)
                 if eval_manifest is not None else None)
    return train_on_arrays(data, model_cfg, cfg, eval_data)


def _scores_for(data: ClipArrays, params: model.SftParams,
                batch_size: int = 64) -> np.ndarray:
    """Softmax class scores (N, m) under no_grad, batched for speed."""
    outs = []
    with no_grad():
        for start in range(0, data.frames.shape[0], batch_size):
            logits = model.sft_forward(data.frames[start:start + batch_size], params)
            outs.append(ops.softmax(logits, axis=-1).value)
    return np.concatenate(outs, axis=0)


def report_from_scores(scores: np.ndarray, labels: np.ndarray, distances: np.ndarray,
                       loss_params: LongLossParams, n_classes: int) -> EvalReport:
    """Assemble an EvalReport from per-clip class scores.

    The reported mean loss is the same distance-weighted loss used for
    training (for comparability across loss modes); accuracy, per-bin,
    per-class and mAP numbers are unweighted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    preds = scores.argmax(axis=1)
    logp = np.log(np.clip(scores, 1e-300, None))
    ce = -logp[np.arange(labels.size), labels]
    weights = loss_params.weights(distances)
    mean_loss = float((ce * weights).mean())

    bins = np.array([distance_bin(d) for d in distances])
    bin_counts = np.bincount(bins, minlength=N_BINS)
    bin_correct = np.bincount(bins[preds == labels], minlength=N_BINS)

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    class_counts = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / class_counts[c]) if class_counts[c] else 0.0
                 for c in range(n_classes)]

    return EvalReport(
        accuracy=objective.accuracy(preds, labels),
        mean_loss=mean_loss,
        mean_ap=objective.mean_average_precision(scores, labels),
        bin_counts=[int(x) for x in bin_counts],
        bin_correct=[int(x) for x in bin_correct],
        per_class_accuracy=per_class,
        confusion=confusion.tolist(),
    )


def evaluate_arrays(data: ClipArrays, params: model.SftParams,
                    loss_params: LongLossParams) -> EvalReport:
    scores = _scores_for(data, params)
    return report_from_scores(scores, data.labels, data.distances, loss_params,
                              params.cfg.n_classes)


def evaluate(manifest: DatasetManifest, params: model.SftParams,
             loss_params: LongLossParams | None = None,
             pre_cfg: PreprocConfig | None = None) -> EvalReport:
    """Predict every manifest clip and aggregate metrics."""
    cfg = params.cfg
    pre_cfg = pre_cfg or PreprocConfig(k=cfg.k, out_hw=cfg.input_hw)
    data = load_and_preprocess(manifest, pre_cfg)
    return evaluate_arrays(data, params, loss_params or LongLossParams())


@dataclass
class ComparisonRow:
    seed: int | str
    loss_mode: str
    accuracy: float
    mean_ap: float
    far_accuracy: float
    mean_loss: float


def far_bin_threshold(p: LongLossParams) -> float:
    """Lower edge of the top third of the distance range."""
    return p.b0 + (p.b1 - p.b0) * 2.0 / 3.0


def compare_losses(train_data: ClipArrays, test_data: ClipArrays,
                   model_cfg: model.SftConfig, seeds, cfg: TrainConfig,
                   out_csv=None) -> list[ComparisonRow]:
    """Paired CE vs LongLoss runs per seed, plus per-mode mean rows.

    Far-bin accuracy counts only clips with d >= the top-third threshold.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError(f"need at least 3 seeds for a comparison, got {len(seeds)}")
    thresh = far_bin_threshold(cfg.loss_params)
    far_mask = test_data.distances >= thresh
    if not far_mask.any():
        raise ValueError("no test clip lies in the far bin")

    rows: list[ComparisonRow] = []
    for seed in seeds:
        for mode in ("ce", "longloss"):
            run_cfg = replace(cfg, seed=seed, loss_mode=mode, checkpoint_path=None)
            params, _ = train_on_arrays(train_data, model_cfg, run_cfg)
            scores = _scores_for(test_data, params)
            report = report_from_scores(scores, test_data.labels, test_data.distances,
                                        cfg.loss_params, model_cfg.n_classes)
            preds = scores.argmax(axis=1)
            far_acc = objective.accuracy(preds[far_mask], test_data.labels[far_mask])
            rows.append(ComparisonRow(seed=seed, loss_mode=mode, accuracy=report.accuracy,
                                      mean_ap=report.mean_ap, far_accuracy=far_acc,
                                      mean_loss=report.mean_loss))
    for mode in ("ce", "longloss"):
        sub = [r for r in rows if r.loss_mode == mode and isinstance(r.seed, int)]
        rows.append(ComparisonRow(
            seed="mean", loss_mode=mode,
            accuracy=float(np.mean([r.accuracy for r in sub])),
            mean_ap=float(np.mean([r.mean_ap for r in sub])),
            far_accuracy=float(np.mean([r.far_accuracy for r in sub])),
            mean_loss=float(np.mean([r.mean_loss for r in sub]))))
    if out_csv:
        write_comparison_csv(out_csv, rows)
    return rows


def compare_losses_from_manifests(train_manifest: DatasetManifest,
                                  test_manifest: DatasetManifest,
                                  model_cfg: model.SftConfig, seeds,
                                  cfg: TrainConfig,
                                  pre_cfg: PreprocConfig | None = None,
                                  out_csv=None) -> list[ComparisonRow]:
    """Manifest-level entry point: preprocess once, then run the pairs."""
    pre_cfg = pre_cfg or PreprocConfig(k=model_cfg.k, out_hw=model_cfg.input_hw)
    train_data = load_and_preprocess(train_manifest, pre_cfg, cfg.n_jobs)
    test_data = load_and_preprocess(test_manifest, pre_cfg, cfg.n_jobs)
    return compare_losses(train_data, test_data, model_cfg, seeds, cfg, out_csv)


def write_comparison_csv(path, rows: list[ComparisonRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "loss_mode", "accuracy", "mean_ap",
                         "far_accuracy", "mean_loss"])
        for r in rows:
            writer.writerow([r.seed, r.loss_mode, repr(r.accuracy), repr(r.mean_ap),
                             repr(r.far_accuracy), repr(r.mean_loss)])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
