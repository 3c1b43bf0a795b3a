"""Training protocol: k-fold splits, epoch loop with early stopping,
transfer retraining on corrected failures, and baseline-vs-optimized
comparison.

Folds are seeded, disjoint and balanced. Early stopping fires once the
validation Dice improves by less than ``delta`` over ``patience`` consecutive
epochs, comparing each epoch against the previous one (not best-so-far).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .model import ModelWeights, UNetConfig, loss_and_gradients, predict_labels, sgd_step
from .stats import DiceReport, StatsError, TestResult, dice_binary, paired_t_test
from .volume import LabelMap, PreprocessedStudy


class TrainingError(ValueError):
    pass


@dataclass
class Sample:
    """One study ready for the net: stacked input channels plus labels."""

    study_id: str
    x: np.ndarray  # (in_channels, X, Y, Z) float32
    labels: np.ndarray  # (X, Y, Z) int32


def sample_from_study(study_id: str, pre: PreprocessedStudy) -> Sample:
    if pre.label is None:
        raise TrainingError(f"study {study_id} has no label; cannot train on it")
    x = np.stack([pre.image.data, pre.soft.data]).astype(np.float32)
    return Sample(study_id=study_id, x=x, labels=pre.label.data)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[tuple[int, ...], ...]
    seed: int


def kfold_split(n: int, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle then balanced partition (sizes differ by at most 1)."""
    if k < 2 or k > n:
        raise TrainingError(f"k must satisfy 2 <= k <= n, got k={k}, n={n}")
    order = rng.shuffled(n, seed)
    base, extra = divmod(n, k)
    folds = []
    at = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds.append(tuple(int(i) for i in order[at : at + size]))
        at += size
    return FoldPlan(k=k, folds=tuple(folds), seed=seed)


def early_stop_check(val_dice: list[float], delta: float = 0.001, patience: int = 4) -> bool:
    """True iff the last ``patience`` epoch-over-epoch improvements are all < delta."""
    if len(val_dice) < patience + 1:
        return False
    recent = val_dice[-(patience + 1) :]
    return all(recent[i + 1] - recent[i] < delta for i in range(patience))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max_epochs"  # "max_epochs" | "early_stop"

    @property
    def val_dice(self) -> list[float]:
        return [r.val_dice for r in self.records]


@dataclass(frozen=True)
class TrainConfig:
    model: UNetConfig = UNetConfig()
    max_epochs: int = 150
    lr: float = 0.01
    seed: int = 0
    delta: float = 0.001
    patience: int = 4
    min_epochs: int = 0  # grace period before the stop rule engages
    epsilon: float = 1e-5
    organs: tuple[int, ...] | None = None  # None: every foreground class


def _foreground_organs(cfg: TrainConfig) -> tuple[int, ...]:
    return cfg.organs or tuple(range(1, cfg.model.num_classes))


def mean_foreground_dice(pred: np.ndarray, truth: np.ndarray, organs) -> float:
    """Mean Dice over organ codes; both-empty organs count 1.0."""
    vals = []
    for code in organs:
        vals.append(dice_binary(pred == code, truth == code))
    return float(np.mean(vals))


def evaluate_dice(weights: ModelWeights, samples, organs) -> dict[str, DiceReport]:
    from .stats import dice_per_organ

    out = {}
    for s in samples:
        pred = predict_labels(weights, s.x)
        out[s.study_id] = dice_per_organ(
            LabelMap(pred), LabelMap(s.labels), organs
        )
    return out


def _one_hot_cache(samples, num_classes):
    from .model import one_hot

    return {s.study_id: one_hot(s.labels, num_classes) for s in samples}


def train_model(
    weights_init: ModelWeights,
    train_set: list[Sample],
    val_set: list[Sample],
    cfg: TrainConfig,
    eval_fn=None,
) -> tuple[ModelWeights, TrainHistory]:
    """SGD epoch loop over shuffled scans with the early-stop rule.

    ``eval_fn(weights) -> float`` overrides validation scoring (used to
    inject scripted Dice sequences in tests).
    """
    if not train_set:
        raise TrainingError("training set is empty")
    organs = _foreground_organs(cfg)
    targets = _one_hot_cache(train_set, cfg.model.num_classes)

    if eval_fn is None:
        score_against = val_set if val_set else train_set

        def eval_fn(w: ModelWeights) -> float:
            vals = [
                mean_foreground_dice(predict_labels(w, s.x), s.labels, organs)
                for s in score_against
            ]
            return float(np.mean(vals))

    weights = weights_init
    history = TrainHistory()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.shuffled(len(train_set), rng.derive_seed(cfg.seed, epoch))
        losses = []
        for idx in order:
            s = train_set[idx]
            loss, grads = loss_and_gradients(
                weights, s.x, targets[s.study_id], cfg.epsilon
            )
            weights = sgd_step(weights, grads, cfg.lr)
            losses.append(loss)
        val = eval_fn(weights)
        history.records.append(
            EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)), val_dice=val)
        )
        if epoch > cfg.min_epochs and early_stop_check(
            history.val_dice, cfg.delta, cfg.patience
        ):
            history.stop_reason = "early_stop"
            break
    return weights, history


@dataclass
class FoldResult:
    fold_index: int
    study_ids: list[str]
    reports: dict[str, DiceReport]
    history: TrainHistory
    final_val_dice: float
    mean_epoch_dice: float  # averaged across epochs, the other headline reading


@dataclass
class CVResult:
    plan: FoldPlan
    folds: list[FoldResult]
    pooled_mean_final: float
    pooled_mean_across_epochs: float


def run_cross_validation(
    dataset: list[Sample],
    cfg: TrainConfig,
    k: int = 5,
    init_fn=None,
    predict_fn=None,
) -> CVResult:
    """Train on each fold complement, evaluate Dice on the held-out fold.

    The held-out fold doubles as the early-stop validation set, mirroring the
    retraining protocol. ``predict_fn(weights, sample) -> labels`` can stub
    the model out entirely.
    """
    plan = kfold_split(len(dataset), k, cfg.seed)
    organs = _foreground_organs(cfg)
    if init_fn is None:
        from .model import init_weights

        def init_fn(fold: int) -> ModelWeights:
            return init_weights(cfg.model, rng.derive_seed(cfg.seed, 7000 + fold))

    if predict_fn is None:
        predict_fn = lambda w, s: predict_labels(w, s.x)  # noqa: E731

    from .stats import dice_per_organ

    folds = []
    pooled = []
    for f, held_out in enumerate(plan.folds):
        held = [dataset[i] for i in held_out]
        train = [dataset[i] for i in range(len(dataset)) if i not in set(held_out)]
        fold_cfg = replace(cfg, seed=rng.derive_seed(cfg.seed, 100 + f))
        weights, history = (
            train_model(init_fn(f), train, held, fold_cfg)
            if cfg.max_epochs > 0
            else (init_fn(f), TrainHistory())
        )
        reports = {}
        for s in held:
            pred = predict_fn(weights, s)
            reports[s.study_id] = dice_per_organ(LabelMap(pred), LabelMap(s.labels), organs)
        fold_scores = [r.mean_foreground for r in reports.values()]
        pooled.extend(fold_scores)
        folds.append(
            FoldResult(
                fold_index=f,
                study_ids=[s.study_id for s in held],
                reports=reports,
                history=history,
                final_val_dice=float(np.mean(fold_scores)),
                mean_epoch_dice=(
                    float(np.mean(history.val_dice)) if history.records else float("nan")
                ),
            )
        )
    return CVResult(
        plan=plan,
        folds=folds,
        pooled_mean_final=float(np.mean(pooled)),
        pooled_mean_across_epochs=float(
            np.mean([f.mean_epoch_dice for f in folds])
        )
        if all(f.history.records for f in folds)
        else float("nan"),
    )


REFERENCE_NOTE = (
    "Clinical-scale reference for this workflow: global failure rates fell "
    "13%->9% on the improvement-source cohort and 8%->6% on the withheld "
    "cohort. Desk-scale synthetic cohorts reproduce the direction of the "
    "effect, not those magnitudes."
)


@dataclass
class ArmStats:
    version: str
    per_scan_mean_dice: dict[str, float]
    mean_per_organ: dict[int, float]
    median_per_organ: dict[int, float]
    failure_rates: dict[str, float]  # cohort -> rate over the common scan list


@dataclass
class ComparisonReport:
    versions: tuple[str, str]
    scan_ids: list[str]
    corrected_ids: list[str]
    baseline: ArmStats
    optimized: ArmStats
    t_test: TestResult
    chi_squared: dict[str, TestResult | None]
    chi_squared_detail: dict[str, str]
    notes: str = REFERENCE_NOTE


def improvement_round(
    base_weights: ModelWeights,
    base_train_set: list[Sample],
    base_val_set: list[Sample],
    corrected_failures: list[Sample],
    eval_cohorts: dict[str, list[Sample]],
    cfg: TrainConfig,
    grade_fn,
    ledger=None,
    versions: tuple[str, str] = ("baseline", "optimized"),
    val_fraction: float = 0.2,
    predict_fn=None,
) -> tuple[ModelWeights, ComparisonReport]:
    """Evaluate, retrain with corrected failures appended, re-evaluate, compare.

    ``grade_fn(mean_foreground_dice) -> 0|1|2`` grades each evaluation (the
    automated proxy, or a wrapper around human input). Corrected studies are
    excluded from the optimized arm, so both arms are compared on the scans
    graded under both versions. ``ledger``, when given, receives one record
    per (study, version).
    """
    organs = _foreground_organs(cfg)
    if predict_fn is None:
        predict_fn = lambda w, s: predict_labels(w, s.x)  # noqa: E731
    corrected_ids = {s.study_id for s in corrected_failures}
    train_ids = {s.study_id for s in base_train_set} | {s.study_id for s in base_val_set}
    leaked = sorted(
        sid
        for cohort in eval_cohorts.values()
        for sid in (s.study_id for s in cohort)
        if sid in train_ids
    )
    if leaked:
        raise TrainingError(f"training scans appear in evaluation cohorts: {leaked}")

    def grade_cohorts(weights, version, skip_ids=frozenset()):
        scores: dict[str, dict[str, float]] = {}
        for cohort, samples in eval_cohorts.items():
            scores[cohort] = {}
            for s in samples:
                if s.study_id in skip_ids:
                    continue
                d = mean_foreground_dice(predict_fn(weights, s), s.labels, organs)
                scores[cohort][s.study_id] = d
                if ledger is not None:
                    ledger.record_grade_values(
                        study_id=s.study_id,
                        rater_id="proxy",
                        grade=grade_fn(d),
                        algorithm_version=version,
                    )
        return scores

    base_scores = grade_cohorts(base_weights, versions[0])

    # transfer retraining: corrected failures join the training pool; a slice
    # of them joins validation so early stopping can see the new case mix
    n_val = min(len(corrected_failures), max(1, round(val_fraction * len(corrected_failures)))) if corrected_failures else 0
    order = rng.shuffled(len(corrected_failures), rng.derive_seed(cfg.seed, 4242))
    corr_val = [corrected_failures[i] for i in order[:n_val]]
    corr_train = [corrected_failures[i] for i in order[n_val:]]
    optimized, history = train_model(
        base_weights.copy(),
        base_train_set + corr_train,
        base_val_set + corr_val,
        cfg,
    )

    opt_scores = grade_cohorts(optimized, versions[1], skip_ids=corrected_ids)

    # the comparison population: studies graded under both versions
    scan_ids = []
    per_scan = {versions[0]: {}, versions[1]: {}}
    fail_tables: dict[str, list[list[int]]] = {}
    chi: dict[str, TestResult | None] = {}
    chi_detail: dict[str, str] = {}
    rates: dict[str, dict[str, float]] = {versions[0]: {}, versions[1]: {}}
    for cohort, samples in eval_cohorts.items():
        common = [s.study_id for s in samples if s.study_id in opt_scores[cohort]]
        scan_ids.extend(common)
        grades = {v: {} for v in versions}
        for sid in common:
            per_scan[versions[0]][sid] = base_scores[cohort][sid]
            per_scan[versions[1]][sid] = opt_scores[cohort][sid]
            grades[versions[0]][sid] = grade_fn(base_scores[cohort][sid])
            grades[versions[1]][sid] = grade_fn(opt_scores[cohort][sid])
        table = []
        for v in versions:
            fails = sum(1 for g in grades[v].values() if g == 2)
            table.append([fails, len(common) - fails])
            rates[v][cohort] = fails / len(common) if common else float("nan")
        fail_tables[cohort] = table
        try:
            from .stats import chi_squared_2x2

            chi[cohort] = chi_squared_2x2(table)
            chi_detail[cohort] = f"table={table}"
        except StatsError as e:
            chi[cohort] = None
            chi_detail[cohort] = f"table={table}; degenerate: {e}"

    base_vals = [per_scan[versions[0]][sid] for sid in scan_ids]
    opt_vals = [per_scan[versions[1]][sid] for sid in scan_ids]
    t_res = paired_t_test(opt_vals, base_vals)

    def arm(version) -> ArmStats:
        organ_scores: dict[int, list[float]] = {c: [] for c in organs}
        source = base_scores if version == versions[0] else opt_scores
        which = base_weights if version == versions[0] else optimized
        for cohort, samples in eval_cohorts.items():
            for s in samples:
                if s.study_id not in source[cohort] or s.study_id not in per_scan[version]:
                    continue
                pred = predict_fn(which, s)
                for c in organs:
                    organ_scores[c].append(dice_binary(pred == c, s.labels == c))
        return ArmStats(
            version=version,
            per_scan_mean_dice=per_scan[version],
            mean_per_organ={c: float(np.mean(v)) for c, v in organ_scores.items() if v},
            median_per_organ={c: float(np.median(v)) for c, v in organ_scores.items() if v},
            failure_rates=rates[version],
        )

    report = ComparisonReport(
        versions=versions,
        scan_ids=scan_ids,
        corrected_ids=sorted(corrected_ids),
        baseline=arm(versions[0]),
        optimized=arm(versions[1]),
        t_test=t_res,
        chi_squared=chi,
        chi_squared_detail=chi_detail,
    )
    return optimized, report
