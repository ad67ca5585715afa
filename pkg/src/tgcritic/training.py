"""Training strategies, evaluation metrics, and the weighted score.

Two strategies exist: one-step (both branches together, 200 epochs at
lr 1e-4) and two-step (the high-resolution branch first under a temporary
classification head at lr 1e-4, then frozen while the timbre branch and
fusion head train at lr 5e-5). An epoch is 500 batches of 32, sampled
class-balanced. A scale factor divides epochs and batches-per-epoch for
desk-scale runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .cqt import normalize_values
from .model import N_CLASSES, TgCritic, WINDOW_FRAMES

LABELS = ("A", "M", "I")


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; the model was rolled back to the last epoch."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined for zero-variance inputs."""


@dataclass
class TrainingExample:
    sample_id: str
    cqt_values: np.ndarray  # (T, 96) log-compressed magnitudes, T >= 256
    timbre: np.ndarray  # (512,)
    label: int  # index into LABELS

    def __post_init__(self):
        if self.cqt_values.shape[0] < WINDOW_FRAMES:
            raise ValueError(
                f"training clip must have >= {WINDOW_FRAMES} frames, "
                f"got {self.cqt_values.shape[0]}"
            )
        if not 0 <= self.label < N_CLASSES:
            raise ValueError(f"label index out of range: {self.label}")


@dataclass(frozen=True)
class TrainSchedule:
    strategy: str = "one_step"
    epochs: tuple = (200,)
    learning_rates: tuple = (1e-4,)
    batches_per_epoch: int = 500
    batch_size: int = 32
    master_seed: int = 0
    scale_factor: int = 1
    dtype: str = "float64"
    chunk_size: int = 16
    target_accuracy: float | None = None
    eval_each_epoch: bool = True

    def __post_init__(self):
        if self.strategy not in ("one_step", "two_step"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        n_phases = 1 if self.strategy == "one_step" else 2
        if len(self.epochs) != n_phases or len(self.learning_rates) != n_phases:
            raise ValueError("epochs/learning_rates must match the strategy phases")
        if self.scale_factor < 1 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValueError("counts must be positive")

    def scaled_epochs(self, phase) -> int:
        return max(1, self.epochs[phase] // self.scale_factor)

    @property
    def scaled_batches(self) -> int:
        return max(1, self.batches_per_epoch // self.scale_factor)


def one_step_schedule(**overrides) -> TrainSchedule:
    return replace(TrainSchedule(), **overrides)


def two_step_schedule(**overrides) -> TrainSchedule:
    base = TrainSchedule(strategy="two_step", epochs=(100, 100), learning_rates=(1e-4, 5e-5))
    return replace(base, **overrides)


@dataclass
class EpochLog:
    phase: int
    epoch: int
    mean_loss: float
    train_accuracy: float | None


def write_log_csv(logs, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "mean_loss", "train_accuracy"])
        for row in logs:
            acc = "" if row.train_accuracy is None else f"{row.train_accuracy:.6f}"
            writer.writerow([row.epoch, row.phase, f"{row.mean_loss:.8f}", acc])


def _crop_starts(n_frames, max_options=None):
    n = n_frames - WINDOW_FRAMES + 1
    if max_options is not None and n > max_options:
        return np.linspace(0, n - 1, max_options).astype(int)
    return np.arange(n)


def _window_input(example, start, dtype):
    crop = example.cqt_values[start:start + WINDOW_FRAMES].astype(np.float64)
    return normalize_values(crop).astype(dtype)[:, :, None]


def _sample_batch(examples, by_class, batch_size, rng):
    """Class-balanced draw: uniform over present classes, then uniform
    within the class; each draw picks a fresh random crop."""
    classes = sorted(by_class)
    picks = []
    for _ in range(batch_size):
        cls = classes[rng.integers(len(classes))]
        idx = by_class[cls][rng.integers(len(by_class[cls]))]
        ex = examples[idx]
        starts = _crop_starts(ex.cqt_values.shape[0])
        picks.append((idx, int(starts[rng.integers(starts.size)])))
    return picks


def _forward_probs_full(model, xb, tvb):
    return model.forward_tensor(xb, tvb)


def evaluate_accuracy(model, examples, forward_fn=None, chunk=16) -> float:
    """Argmax accuracy over the training set at the deterministic center crop."""
    forward_fn = forward_fn or _forward_probs_full
    dtype = model.dtype
    correct = 0
    for c0 in range(0, len(examples), chunk):
        part = examples[c0:c0 + chunk]
        xb = np.stack(
            [
                _window_input(ex, (ex.cqt_values.shape[0] - WINDOW_FRAMES) // 2, dtype)
                for ex in part
            ]
        )
        tvb = np.stack([ex.timbre for ex in part]).astype(dtype)
        probs = forward_fn(model, xb, tvb).data
        correct += int((probs.argmax(axis=-1) == [ex.label for ex in part]).sum())
    return correct / len(examples)


def _train_phase(
    model,
    examples,
    *,
    phase,
    lr,
    n_epochs,
    n_batches,
    schedule,
    rng,
    trainable,
    forward_fn,
    logs,
):
    """Adam/cross-entropy loop over one phase; returns True if the target
    accuracy was reached early. NaN loss rolls back to the epoch start."""
    optimizer = nn.Adam(trainable, lr=lr)
    dtype = model.dtype
    by_class = {}
    for i, ex in enumerate(examples):
        by_class.setdefault(ex.label, []).append(i)
    chunk = max(1, schedule.chunk_size)
    for epoch in range(1, n_epochs + 1):
        snapshot = model.clone_state()
        losses = []
        for _ in range(n_batches):
            picks = _sample_batch(examples, by_class, schedule.batch_size, rng)
            xb = np.stack([_window_input(examples[i], s, dtype) for i, s in picks])
            tvb = np.stack([examples[i].timbre for i, s in picks]).astype(dtype)
            yb = np.array([examples[i].label for i, _ in picks])
            optimizer.zero_grad()
            batch_loss = 0.0
            grads = {}
            for c0 in range(0, len(picks), chunk):
                c1 = min(len(picks), c0 + chunk)
                tape = nn.Tape()
                with tape:
                    probs = forward_fn(model, xb[c0:c1], tvb[c0:c1])
                    loss = nn.cross_entropy(probs, yb[c0:c1])
                tape.backward(loss)
                weight = (c1 - c0) / len(picks)
                batch_loss += float(loss.data) * weight
                for p in optimizer.params:
                    if p.grad is not None:
                        if p.name in grads:
                            grads[p.name] += p.grad * weight
                        else:
                            grads[p.name] = p.grad * weight
                        p.grad = None
            for p in optimizer.params:
                p.grad = grads.get(p.name)
            if not np.isfinite(batch_loss):
                model.restore_state(snapshot)
                raise TrainingDivergedError(
                    f"non-finite loss in phase {phase} epoch {epoch}"
                )
            optimizer.step()
            losses.append(batch_loss)
        accuracy = None
        if schedule.eval_each_epoch or schedule.target_accuracy is not None:
            accuracy = evaluate_accuracy(model, examples, forward_fn, chunk)
        logs.append(EpochLog(phase, epoch, float(np.mean(losses)), accuracy))
        if schedule.target_accuracy is not None and accuracy >= schedule.target_accuracy:
            return True
    return False


def train_one_step(model: TgCritic, examples, schedule: TrainSchedule):
    """Train every parameter jointly; returns (model, per-epoch logs)."""
    if schedule.strategy != "one_step":
        raise ValueError("schedule is not one_step")
    _require_dtype(model, schedule)
    logs = []
    rng = np.random.default_rng(schedule.master_seed)
    _train_phase(
        model,
        examples,
        phase=1,
        lr=schedule.learning_rates[0],
        n_epochs=schedule.scaled_epochs(0),
        n_batches=schedule.scaled_batches,
        schedule=schedule,
        rng=rng,
        trainable=list(model.params.values()),
        forward_fn=_forward_probs_full,
        logs=logs,
    )
    return model, logs


def train_two_step(model: TgCritic, examples, schedule: TrainSchedule):
    """Phase 1 trains the high-resolution branch under a temporary
    dense+softmax head; phase 2 freezes it (weights stay bit-identical)
    and trains the timbre branch plus fusion head on cached branch
    outputs at the smaller learning rate."""
    if schedule.strategy != "two_step":
        raise ValueError("schedule is not two_step")
    _require_dtype(model, schedule)
    logs = []
    rng = np.random.default_rng(schedule.master_seed)
    dtype = model.dtype

    temp_w = nn.Parameter(
        (0.01 * rng.standard_normal((64, N_CLASSES))).astype(dtype), "temp_head/w"
    )
    temp_b = nn.Parameter(np.zeros(N_CLASSES, dtype=dtype), "temp_head/b")

    def hr_only_forward(mdl, xb, tvb):
        return nn.softmax(nn.dense(mdl.hr_forward(xb), temp_w, temp_b))

    _train_phase(
        model,
        examples,
        phase=1,
        lr=schedule.learning_rates[0],
        n_epochs=schedule.scaled_epochs(0),
        n_batches=schedule.scaled_batches,
        schedule=schedule,
        rng=rng,
        trainable=model.branch_params("hr/") + [temp_w, temp_b],
        forward_fn=hr_only_forward,
        logs=logs,
    )

    # freeze the trunk; cache its outputs for every (example, crop start)
    model.set_trainable("hr/", False)
    hr_cache = []
    for ex in examples:
        starts = _crop_starts(ex.cqt_values.shape[0], max_options=4)
        outs = {}
        for s in starts:
            outs[int(s)] = model.hr_forward(_window_input(ex, int(s), dtype)).data
        hr_cache.append(outs)

    def frozen_forward(mdl, xb, tvb, cache_rows):
        hr_vec = nn.Tensor(np.stack(cache_rows), requires_grad=False)
        return mdl.classify(hr_vec, mdl.timbre_forward(tvb))

    by_class = {}
    for i, ex in enumerate(examples):
        by_class.setdefault(ex.label, []).append(i)
    optimizer = nn.Adam(
        model.branch_params("timbre/") + model.branch_params("head/"),
        lr=schedule.learning_rates[1],
    )
    n_epochs = schedule.scaled_epochs(1)
    n_batches = schedule.scaled_batches
    for epoch in range(1, n_epochs + 1):
        snapshot = model.clone_state()
        losses = []
        for _ in range(n_batches):
            picks = []
            for _ in range(schedule.batch_size):
                cls = sorted(by_class)[rng.integers(len(by_class))]
                idx = by_class[cls][rng.integers(len(by_class[cls]))]
                starts = sorted(hr_cache[idx])
                picks.append((idx, starts[rng.integers(len(starts))]))
            tvb = np.stack([examples[i].timbre for i, _ in picks]).astype(dtype)
            yb = np.array([examples[i].label for i, _ in picks])
            cache_rows = [hr_cache[i][s] for i, s in picks]
            optimizer.zero_grad()
            tape = nn.Tape()
            with tape:
                probs = frozen_forward(model, None, tvb, cache_rows)
                loss = nn.cross_entropy(probs, yb)
            tape.backward(loss)
            if not np.isfinite(float(loss.data)):
                model.restore_state(snapshot)
                model.set_trainable("hr/", True)
                raise TrainingDivergedError(f"non-finite loss in phase 2 epoch {epoch}")
            optimizer.step()
            losses.append(float(loss.data))
        accuracy = None
        if schedule.eval_each_epoch:
            accuracy = evaluate_accuracy(model, examples, chunk=schedule.chunk_size)
        logs.append(EpochLog(2, epoch, float(np.mean(losses)), accuracy))
    model.set_trainable("hr/", True)
    return model, logs


def train(model, examples, schedule):
    if schedule.strategy == "one_step":
        return train_one_step(model, examples, schedule)
    return train_two_step(model, examples, schedule)


def _require_dtype(model, schedule):
    if np.dtype(schedule.dtype) != model.dtype:
        raise ValueError(
            f"model dtype {model.dtype} != schedule dtype {schedule.dtype}"
        )


def predict_probs(model, examples, chunk=16) -> np.ndarray:
    """Center-crop class probabilities for a list of examples, (n, 3)."""
    rows = []
    dtype = model.dtype
    for c0 in range(0, len(examples), chunk):
        part = examples[c0:c0 + chunk]
        xb = np.stack(
            [
                _window_input(ex, (ex.cqt_values.shape[0] - WINDOW_FRAMES) // 2, dtype)
                for ex in part
            ]
        )
        tvb = np.stack([ex.timbre for ex in part]).astype(dtype)
        rows.append(model.forward_tensor(xb, tvb).data.astype(np.float64))
    return np.concatenate(rows, axis=0)


# -- metrics ------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    precision: dict
    recall: dict
    confusion: np.ndarray  # confusion[true, pred]
    warnings: list

    def to_json_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": self.confusion.tolist(),
            "warnings": self.warnings,
        }


def metrics(predictions, labels) -> MetricsReport:
    """Per-class precision/recall plus accuracy under the argmax rule.

    A class absent from both predictions and labels gets precision 0 and
    a warning flag rather than an error.
    """
    if len(predictions) == 0 or len(predictions) != len(labels):
        raise ValueError("predictions and labels must be equal-length and nonempty")
    pred_idx = np.array(
        [p.as_array().argmax() if hasattr(p, "as_array") else np.asarray(p).argmax()
         for p in predictions]
    )
    true_idx = np.asarray(labels, dtype=int)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    for t, p in zip(true_idx, pred_idx):
        confusion[t, p] += 1
    precision, recall, warnings = {}, {}, []
    for c, name in enumerate(LABELS):
        col = confusion[:, c].sum()
        row = confusion[c, :].sum()
        if col == 0:
            precision[name] = 0.0
            warnings.append(f"class {name} never predicted; precision set to 0")
        else:
            precision[name] = float(confusion[c, c] / col)
        recall[name] = float(confusion[c, c] / row) if row else 0.0
        if row == 0:
            warnings.append(f"class {name} absent from labels; recall set to 0")
    accuracy = float(np.trace(confusion) / len(true_idx))
    return MetricsReport(accuracy, precision, recall, confusion, warnings)


def weighted_score(probs) -> float:
    """Quality score: P_A * 1.0 + P_M * 0.5 + P_I * 0.0, in [0, 1]."""
    p = probs.as_array() if hasattr(probs, "as_array") else np.asarray(probs, dtype=np.float64)
    if p.shape != (3,) or np.any(p < -1e-9) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("weighted_score needs a valid 3-class distribution")
    return float(p[0] * 1.0 + p[1] * 0.5 + p[2] * 0.0)


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length 1-d arrays, n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom < 1e-300:
        raise UndefinedCorrelationError("zero variance input")
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))
