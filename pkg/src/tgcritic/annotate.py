"""Iterative automatic annotation.

Each iteration trains two binary forests (awesome-vs-rest and
inferior-vs-rest) on the manually labeled seed set, labels the unlabeled
pool with them, trains the quality network on those automatic labels, and
feeds the network's evaluation-curve statistics back into the forests'
feature vector for the next iteration. Iteration 1 uses metadata features
only; later iterations append 12 curve statistics per sample, so the
feature dimension grows from 4 to 16.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import LABEL_TO_INDEX, QUALITY_CLASSES, LabeledSample, save_manifest
from .features import FeatureStore
from .forest import ForestConfig, RandomForest
from .model import EvaluationCurve, ModelConfig, TgCritic
from .training import TrainingExample, TrainSchedule, metrics, train

METADATA_FEATURE_NAMES = ("intonation_score", "rhythm_score", "likes", "comments")

# Desk-scale in-loop schedule: enough steps for the network to pick up the
# audio-quality signal from noisy labels while keeping a 4-iteration loop
# well under an hour.
LOOP_SCHEDULE = TrainSchedule(
    strategy="one_step",
    epochs=(2,),
    learning_rates=(1e-4,),
    batches_per_epoch=20,
    batch_size=32,
    dtype="float32",
    eval_each_epoch=False,
)


def metadata_features(md) -> np.ndarray:
    return np.array(
        [md.intonation_score, md.rhythm_score, float(md.likes), float(md.comments)]
    )


@dataclass(frozen=True)
class CurveFeatures:
    """Per-class mean/std/min/max of window probabilities: 12 reals."""

    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.mean, self.std, self.min, self.max])


def curve_features(curve: EvaluationCurve) -> CurveFeatures:
    if len(curve) == 0:
        raise ValueError("empty evaluation curve")
    probs = curve.probs_matrix()
    return CurveFeatures(
        mean=probs.mean(axis=0),
        std=probs.std(axis=0),
        min=probs.min(axis=0),
        max=probs.max(axis=0),
    )


def assign_label(p_awesome: float, p_inferior: float, tau: float = 0.5) -> str:
    """Combine the two binary forests: the class whose probability clears
    the threshold by the larger margin wins; ties go to awesome; neither
    clearing the threshold means mediocre."""
    if not (0 <= p_awesome <= 1 and 0 <= p_inferior <= 1):
        raise ValueError("probabilities must lie in [0,1]")
    hit_a = p_awesome >= tau
    hit_i = p_inferior >= tau
    if hit_a and (not hit_i or p_awesome >= p_inferior):
        return "A"
    if hit_i:
        return "I"
    return "M"


def sample_features(sample, store: FeatureStore, model: TgCritic | None) -> np.ndarray:
    """Metadata features, plus curve statistics when a model is present."""
    feats = metadata_features(sample.metadata)
    if model is None:
        return feats
    curve = model.evaluation_curve(store.cqt(sample.sample_id), store.timbre(sample.sample_id))
    return np.concatenate([feats, curve_features(curve).as_array()])


@dataclass
class IterationReport:
    iteration: int
    label_counts: dict
    agreement: float | None = None
    per_class_precision: dict | None = None
    per_class_recall: dict | None = None


@dataclass
class LoopResult:
    labels_history: list  # one {sample_id: label} per iteration
    reports: list
    model: TgCritic | None


def default_trainer(labeled_pool, store, iteration, seed, schedule=None, model_config=None):
    """Train a fresh network on the pool's automatic labels."""
    schedule = replace(schedule or LOOP_SCHEDULE, master_seed=seed)
    config = model_config or ModelConfig(seed=seed)
    if config.seed != seed:
        config = replace(config, seed=seed)
    examples = [
        TrainingExample(
            sample_id=s.sample_id,
            cqt_values=store.cqt_values(s.sample_id),
            timbre=store.timbre(s.sample_id),
            label=LABEL_TO_INDEX[label],
        )
        for s, label in labeled_pool
    ]
    model = TgCritic(config, dtype=np.dtype(schedule.dtype))
    model, _ = train(model, examples, schedule)
    return model


def run_iteration(
    seed_set,
    pool,
    store: FeatureStore,
    prev_model: TgCritic | None,
    iteration: int,
    *,
    hidden=None,
    rf_config: ForestConfig = ForestConfig(),
    trainer=default_trainer,
    seed: int = 0,
):
    """One annotation round; returns (pool labels, new model, report)."""
    present = {s.label for s in seed_set}
    if present != set(QUALITY_CLASSES):
        raise ValueError(f"seed set must contain all classes, has {sorted(present)}")

    x_seed = np.stack([sample_features(s, store, prev_model) for s in seed_set])
    y_a = np.array([1 if s.label == "A" else 0 for s in seed_set])
    y_i = np.array([1 if s.label == "I" else 0 for s in seed_set])
    forest_a = RandomForest(rf_config, seed=_derive(seed, iteration, 0)).fit(x_seed, y_a)
    forest_i = RandomForest(rf_config, seed=_derive(seed, iteration, 1)).fit(x_seed, y_i)

    x_pool = np.stack([sample_features(s, store, prev_model) for s in pool])
    p_a = forest_a.predict_proba(x_pool)
    p_i = forest_i.predict_proba(x_pool)
    labels = {
        s.sample_id: assign_label(pa, pi) for s, pa, pi in zip(pool, p_a, p_i)
    }

    model = trainer(
        [(s, labels[s.sample_id]) for s in pool], store, iteration, _derive(seed, iteration, 2)
    )

    counts = {c: sum(1 for v in labels.values() if v == c) for c in QUALITY_CLASSES}
    report = IterationReport(iteration=iteration, label_counts=counts)
    if hidden is not None:
        truth = [LABEL_TO_INDEX[hidden[s.sample_id]] for s in pool]
        assigned = [LABEL_TO_INDEX[labels[s.sample_id]] for s in pool]
        onehot = np.eye(3)[assigned]
        m = metrics(onehot, truth)
        report.agreement = m.accuracy
        report.per_class_precision = m.precision
        report.per_class_recall = m.recall
    return labels, model, report


def _derive(seed, iteration, stream) -> int:
    return int(np.random.SeedSequence((seed, iteration, stream)).generate_state(1)[0])


def run_loop(
    corpus,
    n_iterations: int = 4,
    *,
    seed: int = 0,
    rf_config: ForestConfig = ForestConfig(),
    trainer=default_trainer,
    store: FeatureStore | None = None,
    out_dir=None,
    verbose: bool = False,
) -> LoopResult:
    """Run the full annotation loop; optionally persist per-iteration
    snapshot manifests and an agreement CSV."""
    store = store or FeatureStore(corpus.audio)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model = None
    history, reports = [], []
    for iteration in range(1, n_iterations + 1):
        labels, model, report = run_iteration(
            corpus.seed_set,
            corpus.pool,
            store,
            model,
            iteration,
            hidden=corpus.hidden,
            rf_config=rf_config,
            trainer=trainer,
            seed=seed,
        )
        history.append(labels)
        reports.append(report)
        if verbose:
            agree = "n/a" if report.agreement is None else f"{report.agreement:.3f}"
            print(f"iteration {iteration}: agreement {agree}, labels {report.label_counts}")
        if out_dir is not None:
            snapshot = [
                replace_sample(s, labels[s.sample_id], f"automatic@{iteration}")
                for s in corpus.pool
            ]
            save_manifest(corpus.seed_set + snapshot, out_dir / f"iteration_{iteration}.jsonl")
    if out_dir is not None:
        _write_agreement_csv(reports, out_dir / "agreement.csv")
    return LoopResult(history, reports, model)


def replace_sample(sample: LabeledSample, label, source) -> LabeledSample:
    return LabeledSample(
        sample_id=sample.sample_id,
        metadata=sample.metadata,
        audio_path=sample.audio_path,
        label=label,
        label_source=source,
    )


def _write_agreement_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["iteration", "accuracy"]
        for c in QUALITY_CLASSES:
            header += [f"precision_{c}", f"recall_{c}"]
        writer.writerow(header)
        for r in reports:
            row = [r.iteration, "" if r.agreement is None else f"{r.agreement:.6f}"]
            for c in QUALITY_CLASSES:
                if r.per_class_precision is None:
                    row += ["", ""]
                else:
                    row += [
                        f"{r.per_class_precision[c]:.6f}",
                        f"{r.per_class_recall[c]:.6f}",
                    ]
            writer.writerow(row)
