"""
Optimizers, grouped k-fold cross-validation, training loops for both
networks, and the evaluation tables built on top of them.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import f1_score

from . import tensor_core as tc
from .io import parallel_map, save_checkpoint
from .errors import (
    ConfigError,
    EmptyDataset,
    EmptyAfterFilter,
    NoSessions,
    NonFiniteValue,
    NumericError,
    ShapeMismatch,
    SingleClass,
    TooFewGroups,
)
from .heatmap import (
    DEFAULT_FRACTIONS,
    DEFAULT_GRIDS,
    DEFAULT_MAG_BINS,
    SampleFilter,
    accumulate,
    dwell_times,
    magnification_stack,
    mean_unit_map,
    normalize,
    resample,
    resample_fraction,
    temporal_stack,
)
from .metrics import cc, eval_against_mask, fixations_from_mask, kld, nss
from .models import (
    EXPERTISE_MODES,
    ablation_variant,
    expertisenet_logits,
    init_params,
    linear_probe_config,
    prostattformer_forward,
    prostattformer_scores,
)
from .telemetry import EXPERTISE_LEVELS

OPTIMIZERS = ("adam_decoupled", "sgd")
ATTENTION_MODELS = ("prostattformer", "linear_probe")

COHORTS = {
    "all": set(EXPERTISE_LEVELS),
    "specialist": {"specialist"},
    "non_specialist": {"resident", "general"},
    "resident": {"resident"},
    "general": {"general"},
}


# =========================================================
# 1. Hyperparameters and optimizers
# =========================================================

@dataclass(frozen=True)
class HyperParams:
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 50
    seed: int = 0
    optimizer: str = "adam_decoupled"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size and epochs must be positive: {self}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"lr and weight_decay must be non-negative: {self}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unsupported optimizer: {self.optimizer}")


class AdamDecoupled:
    """Adam with weight decay applied directly to the parameters (scaled by lr)."""

    def __init__(self, tensors, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.tensors, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


class SGD:
    def __init__(self, tensors, lr, weight_decay=0.0):
        self.tensors = list(tensors)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self):
        for p in self.tensors:
            if p.grad is not None:
                p.data -= self.lr * (p.grad + self.weight_decay * p.data)


def make_optimizer(hyper, tensors):
    if hyper.optimizer == "sgd":
        return SGD(tensors, hyper.lr, hyper.weight_decay)
    return AdamDecoupled(tensors, hyper.lr, hyper.weight_decay)


# =========================================================
# 2. Grouped k-fold
# =========================================================

def _wsi_of(item):
    if isinstance(item, dict):
        return item["wsi_id"]
    return item.wsi_id


def kfold_split(items, k=5, seed=0, group_key=_wsi_of):
    """
    Partition item indices into k folds so that no group spans two folds.

    Groups are shuffled with ``seed`` and dealt into k chunks whose sizes
    differ by at most one group.

    Returns
    -------
    list of np.ndarray
        Sorted item indices per fold.
    """
    keys = [group_key(it) for it in items]
    groups = sorted(set(keys))
    if k < 2 or k > len(groups):
        raise TooFewGroups(f"cannot split {len(groups)} groups into {k} folds")

    order = np.random.default_rng(seed).permutation(len(groups))
    chunks = np.array_split(order, k)
    fold_of = {}
    for f, chunk in enumerate(chunks):
        for g in chunk:
            fold_of[groups[g]] = f

    folds = [[] for _ in range(k)]
    for i, key in enumerate(keys):
        folds[fold_of[key]].append(i)
    return [np.array(f, dtype=int) for f in folds]


def _train_test(items, folds, i):
    test = [items[j] for j in folds[i]]
    train = [items[j] for f, idx in enumerate(folds) if f != i for j in idx]
    return train, test


def fold_checkpoint_dir(checkpoint_dir, name, i):
    return os.path.join(checkpoint_dir, name, f"fold{i}")


def _save_fold(params, checkpoint_dir, name, i):
    if checkpoint_dir is not None:
        save_checkpoint(params, fold_checkpoint_dir(checkpoint_dir, name, i))


@dataclass
class FoldReport:
    """Per-fold metric rows with population mean/std across folds."""

    name: str
    folds: pd.DataFrame
    metrics: tuple

    @property
    def k(self):
        return len(self.folds)

    def summary(self):
        out = {"name": self.name}
        for m in self.metrics:
            vals = self.folds[m].to_numpy(dtype=np.float64)
            out[f"{m}_mean"] = float(np.nanmean(vals)) if np.isfinite(vals).any() else np.nan
            out[f"{m}_std"] = float(np.nanstd(vals)) if np.isfinite(vals).any() else np.nan
        return out


# =========================================================
# 3. ProstAttFormer training
# =========================================================

@dataclass(frozen=True)
class AttentionSample:
    wsi_id: str
    features: object
    target: object
    fixations: Optional[object] = None


@dataclass
class TrainResult:
    params: object
    curve: pd.DataFrame = field(repr=False)


def _mean_loss(losses):
    total = losses[0]
    for extra in losses[1:]:
        total = tc.add(total, extra)
    return tc.scale(total, 1.0 / len(losses))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _fit(params, train, hyper, batch_loss, score, label):
    """
    Shared mini-batch loop. ``batch_loss(params, samples)`` builds the loss
    graph, ``score(params)`` returns the validation score (higher is better).
    """
    tensors = list(params)
    opt = make_optimizer(hyper, tensors)
    rng = np.random.default_rng(hyper.seed)

    best, best_state, rows = -np.inf, params.state(), []
    for epoch in range(1, hyper.epochs + 1):
        losses = []
        for idx in _batches(len(train), hyper.batch_size, rng):
            loss = batch_loss(params, [train[i] for i in idx])
            tc.backward(loss)
            opt.step()
            losses.append(loss.item() * len(idx))
        train_loss = float(np.sum(losses) / len(train))
        val = score(params)
        rows.append({"epoch": epoch, "train_loss": train_loss, label: val})
        if np.isfinite(val) and val > best:
            best, best_state = val, params.state()
        if epoch == 1 or epoch == hyper.epochs or epoch % 50 == 0:
            logging.info(f"epoch {epoch}/{hyper.epochs}: loss={train_loss:.6f} {label}={val:.4f}")

    for name, data in best_state.items():
        params[name].data[...] = data
    return TrainResult(params, pd.DataFrame(rows, columns=["epoch", "train_loss", label]))


def _attention_cc(params, samples):
    scores = []
    for s in samples:
        pred = prostattformer_scores(s.features, params).data
        try:
            scores.append(cc(pred, np.asarray(s.target.values).ravel()))
        except NumericError:
            scores.append(np.nan)
    scores = np.array(scores)
    return float(np.nanmean(scores)) if np.isfinite(scores).any() else np.nan


def train_attention(config, train, hyper, val=None, params=None):
    """
    Train ProstAttFormer with loss 1 - CC.

    Parameters
    ----------
    config : ProstAttFormerConfig
    train : list of AttentionSample
        Targets minmax-normalized on the config grid.
    hyper : HyperParams
    val : list of AttentionSample, optional
        Checkpoint selection set; the training set is used when omitted.

    Returns
    -------
    TrainResult
        Parameters at the best validation CC and the per-epoch curve.
    """
    if not train:
        raise EmptyDataset("no training samples")
    params = params or init_params(config, hyper.seed)
    val = val or train

    def batch_loss(p, samples):
        return _mean_loss([
            tc.cc_loss(prostattformer_scores(s.features, p), np.asarray(s.target.values).ravel())
            for s in samples
        ])

    return _fit(params, train, hyper, batch_loss, lambda p: _attention_cc(p, val), "val_cc")


def cohort_filter(cohort):
    if cohort not in COHORTS:
        raise ConfigError(f"Unsupported cohort filter: {cohort}")
    return COHORTS[cohort]


def build_attention_targets(sessions, wsi_id, mag_bin, cohort="specialist", grid=None, final="minmax"):
    """
    Mean of unit_sum-normalized per-session heatmaps for one WSI and one
    magnification bin, restricted to a reader cohort, then normalized with
    ``final`` (minmax for training).
    """
    grid = grid or DEFAULT_GRIDS[mag_bin.label]
    levels = cohort_filter(cohort)
    maps = []
    for s in sessions:
        if s.wsi_id != wsi_id or s.expertise not in levels:
            continue
        try:
            maps.append(accumulate(s, grid, SampleFilter(mag_bin=(mag_bin.lo, mag_bin.hi))))
        except EmptyAfterFilter:
            continue
    if not maps:
        raise NoSessions(f"no {cohort} sessions of {wsi_id} in magnification bin {mag_bin.label}")
    target = mean_unit_map(maps)
    return normalize(target, final) if final != "unit_sum" else target


def score_attention_maps(preds, targets, fixations=None):
    """
    Per-WSI CC / NSS / KLD of predicted maps against target maps.

    Fixations default to the target cells >= 0.5; KLD is KL(target || pred).
    """
    rows = []
    for i, (pred, target) in enumerate(zip(preds, targets)):
        fix = fixations[i] if fixations is not None and fixations[i] is not None else fixations_from_mask(target)
        row = {}
        for name, fn, args in (
            ("cc", cc, (pred, target)),
            ("nss", nss, (pred, fix)),
            ("kld", kld, (target, pred)),
        ):
            try:
                row[name] = fn(*args)
            except NumericError as e:
                logging.warning(f"map {i}: {name} undefined ({e})")
                row[name] = np.nan
        rows.append(row)
    return pd.DataFrame(rows, columns=["cc", "nss", "kld"])


def evaluate_attention(params, test, fixations=None):
    """Predict every test WSI and score it; one row per WSI."""
    preds = parallel_map(lambda s: prostattformer_forward(s.features, params), test)
    fix = fixations if fixations is not None else [s.fixations for s in test]
    df = score_attention_maps(preds, [s.target for s in test], fix)
    df.insert(0, "wsi_id", [s.wsi_id for s in test])
    return df


def _mean_std(df, cols):
    out = {}
    for c in cols:
        vals = df[c].to_numpy(dtype=np.float64)
        ok = np.isfinite(vals)
        out[f"{c}_mean"] = float(vals[ok].mean()) if ok.any() else np.nan
        out[f"{c}_std"] = float(vals[ok].std()) if ok.any() else np.nan
    return out


def cross_validate_attention(samples_by_mag, configs, hyper, k=5, seed=0, models=ATTENTION_MODELS, checkpoint_dir=None):
    """
    k-fold WSI-grouped evaluation of ProstAttFormer and the linear-probe
    baseline at each magnification.

    With ``checkpoint_dir`` set, each fold's parameters are saved under
    ``<checkpoint_dir>/<model>_<mag>/fold<i>/``.

    Returns
    -------
    pd.DataFrame
        One row per (magnification, model): metric means with the std over
        folds (``*_std``) and over test WSIs (``*_std_wsi``).
    """
    metrics = ("cc", "nss", "kld")
    rows = []
    for mag, samples in samples_by_mag.items():
        folds = kfold_split(samples, k, seed)
        for model in models:
            config = configs[mag]
            if model == "linear_probe":
                config = linear_probe_config(config.grid, config.dim)

            def run_fold(i, config=config, name=f"{model}_{mag}"):
                train, test = _train_test(samples, folds, i)
                result = train_attention(config, train, hyper)
                _save_fold(result.params, checkpoint_dir, name, i)
                df = evaluate_attention(result.params, test)
                df.insert(0, "fold", i)
                return df

            per_wsi = pd.concat(parallel_map(run_fold, range(k)), ignore_index=True)
            per_fold = per_wsi.groupby("fold")[list(metrics)].mean().reset_index()
            report = FoldReport(model, per_fold, metrics).summary()
            by_wsi = _mean_std(per_wsi, metrics)

            row = {"magnification": mag, "model": model, "n_wsis": len(per_wsi)}
            for m in metrics:
                row[f"{m}_mean"] = by_wsi[f"{m}_mean"]
                row[f"{m}_std"] = report[f"{m}_std"]
                row[f"{m}_std_wsi"] = by_wsi[f"{m}_std"]
            rows.append(row)
            logging.info(f"{mag} {model}: CC={row['cc_mean']:.3f} NSS={row['nss_mean']:.3f} KLD={row['kld_mean']:.3f}")
    return pd.DataFrame(rows)


def compare_cohort_models(sessions, slides, config, hyper, mag_bin, k=5, seed=0, cohorts=("specialist", "non_specialist")):
    """
    Train on one reader cohort's attention and score the predictions against
    the tumor masks of held-out WSIs.

    Parameters
    ----------
    slides : dict
        wsi_id -> (FeatureGrid on the config grid, mask Heatmap).
    """
    metrics = ("cc_seg", "nss_seg", "kld_seg")
    wsis = sorted(slides)
    folds = kfold_split([{"wsi_id": w} for w in wsis], k, seed)
    rows = []
    for cohort in cohorts:
        per_wsi = []
        for i in range(k):
            train_ids = [wsis[j] for f, idx in enumerate(folds) if f != i for j in idx]
            test_ids = [wsis[j] for j in folds[i]]
            train = []
            for w in train_ids:
                try:
                    target = build_attention_targets(sessions, w, mag_bin, cohort, config.grid)
                except (NoSessions, NumericError) as e:
                    logging.warning(f"{w}: skipped for {cohort} training ({e})")
                    continue
                train.append(AttentionSample(w, slides[w][0], target))
            if not train:
                raise NoSessions(f"fold {i}: no {cohort} training targets")
            params = train_attention(config, train, hyper).params
            for w in test_ids:
                features, mask = slides[w]
                mask = resample_fraction(mask, config.grid)
                scores = eval_against_mask(prostattformer_forward(features, params), mask)
                per_wsi.append({"fold": i, "wsi_id": w, **scores})
        df = pd.DataFrame(per_wsi)
        rows.append({"cohort": cohort, "n_wsis": len(df), **_mean_std(df, metrics)})
    return pd.DataFrame(rows)


# =========================================================
# 4. ExpertiseNet training
# =========================================================

@dataclass(frozen=True)
class ExpertiseSample:
    session_id: str
    wsi_id: str
    features: object
    temporal: np.ndarray
    magnification: np.ndarray
    label: int


def expertise_label(expertise, n_classes=3):
    if n_classes == 3:
        return EXPERTISE_LEVELS.index(expertise)
    return int(expertise == "specialist")


def expertise_inputs(session, grid, bins=DEFAULT_MAG_BINS, fractions=DEFAULT_FRACTIONS, grid_per_bin=None):
    """
    Temporal and magnification stacks of one session on the common grid.

    Both are divided by the session's total dwell and scaled by the cell count,
    so the full-time temporal map has mean 1 per cell.
    """
    scale = grid.n_cells / dwell_times(session).sum()
    temporal = np.array([m.values for m in temporal_stack(session, grid, fractions)]) * scale
    stack = magnification_stack(session, grid_per_bin, bins)
    magnification = np.array([resample(m, grid).values for m in stack]) * scale
    return temporal, magnification


def build_expertise_samples(sessions, features, grid=DEFAULT_GRIDS["20x"], n_classes=3, bins=DEFAULT_MAG_BINS):
    """One ExpertiseSample per session; ``features`` maps wsi_id -> FeatureGrid on ``grid``."""

    def build(s):
        temporal, magnification = expertise_inputs(s, grid, bins)
        return ExpertiseSample(
            s.session_id, s.wsi_id, features[s.wsi_id], temporal, magnification,
            expertise_label(s.expertise, n_classes),
        )

    return parallel_map(build, sessions)


def auto_class_weights(labels, n_classes):
    """Inverse class frequency normalized to mean 1 over the classes present."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(np.float64)
    present = counts > 0
    if present.sum() < 2:
        raise SingleClass("training labels contain a single class")
    w = np.ones(n_classes)
    w[present] = 1.0 / counts[present]
    w[present] /= w[present].mean()
    return w


def _softmax(logits):
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def predict_expertise(params, samples):
    """Class probabilities, shape (n, n_classes)."""
    logits = parallel_map(
        lambda s: expertisenet_logits(s.features, s.temporal, s.magnification, params).data, samples,
    )
    return _softmax(np.array(logits))


def train_expertise(config, train, hyper, val=None, class_weights="auto", params=None):
    """
    Train ExpertiseNet with class-weighted cross-entropy; checkpoint selection
    by validation accuracy.
    """
    if not train:
        raise EmptyDataset("no training samples")
    labels = [s.label for s in train]
    if class_weights == "auto":
        class_weights = auto_class_weights(labels, config.n_classes)
    elif len(set(labels)) < 2:
        raise SingleClass("training labels contain a single class")
    weights = np.asarray(class_weights, dtype=np.float64)

    params = params or init_params(config, hyper.seed)
    val = val or train

    def batch_loss(p, samples):
        rows = [
            tc.reshape(expertisenet_logits(s.features, s.temporal, s.magnification, p), (1, config.n_classes))
            for s in samples
        ]
        return tc.weighted_ce_loss(tc.concat(rows, axis=0), [s.label for s in samples], weights)

    def accuracy(p):
        probs = predict_expertise(p, val)
        return classification_metrics(probs, [s.label for s in val], config.n_classes)["accuracy"]

    return _fit(params, train, hyper, batch_loss, accuracy, "val_accuracy")


def expertise_checkpoint_name(variant):
    return "expertisenet" if variant == "both" else f"expertisenet_{variant}"


def cross_validate_expertise(samples, config, hyper, k=5, seed=0, variants=EXPERTISE_MODES, random_baseline=True,
                             checkpoint_dir=None):
    """
    Ablation table: each ExpertiseNet variant (plus a random-score baseline)
    under the same WSI-grouped folds. With ``checkpoint_dir`` set, each
    fold's parameters go to ``<checkpoint_dir>/<variant name>/fold<i>/``.

    Returns
    -------
    (pd.DataFrame, pd.DataFrame)
        Summary (one row per variant) and per-fold metrics.
    """
    metrics = ("accuracy", "macro_f1", "auc")
    folds = kfold_split(samples, k, seed)
    per_fold = []

    for variant in variants:
        cfg = ablation_variant(config, variant)

        def run_fold(i, cfg=cfg, variant=variant):
            train, test = _train_test(samples, folds, i)
            params = train_expertise(cfg, train, hyper).params
            _save_fold(params, checkpoint_dir, expertise_checkpoint_name(variant), i)
            m = classification_metrics(predict_expertise(params, test), [s.label for s in test], cfg.n_classes)
            return {"variant": variant, "fold": i, **{x: m[x] for x in metrics}}

        per_fold.extend(parallel_map(run_fold, range(k)))

    if random_baseline:
        for i in range(k):
            _, test = _train_test(samples, folds, i)
            rng = np.random.default_rng([seed, i])
            scores = _softmax(rng.normal(size=(len(test), config.n_classes)))
            m = classification_metrics(scores, [s.label for s in test], config.n_classes)
            per_fold.append({"variant": "random", "fold": i, **{x: m[x] for x in metrics}})

    per_fold = pd.DataFrame(per_fold, columns=["variant", "fold", *metrics])
    summary = [
        FoldReport(name, group.reset_index(drop=True), metrics).summary()
        for name, group in per_fold.groupby("variant", sort=False)
    ]
    summary = pd.DataFrame(summary).rename(columns={"name": "variant"})
    for _, row in summary.iterrows():
        logging.info(f"{row['variant']}: accuracy={row['accuracy_mean']:.3f} +/- {row['accuracy_std']:.3f}")
    return summary, per_fold


# =========================================================
# 5. Classification metrics
# =========================================================

def _rank_auc(scores, positive):
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.nan
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(scores, labels, n_classes=None):
    """
    Accuracy, macro F1 and ROC-AUC.

    ``scores`` is (n, k) class scores or, for binary tasks, a 1-d score of the
    positive class (predicted positive above 0.5). Argmax ties go to the lowest
    class index. AUC is rank-based (ties count one half); macro one-vs-rest for
    k > 2, skipping classes without both positives and negatives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if s.ndim == 1:
        s = np.column_stack([1.0 - s, s])
    k = n_classes or s.shape[1]
    if s.ndim != 2 or s.shape[0] != len(y) or s.shape[1] != k or len(y) == 0:
        raise ShapeMismatch(f"scores {np.shape(scores)} vs {len(y)} labels and {k} classes")
    if not np.all(np.isfinite(s)):
        raise NonFiniteValue("scores must be finite")

    pred = np.argmax(s, axis=1)
    absent = tuple(int(c) for c in range(k) if not np.any(y == c))
    if absent:
        logging.info(f"classes {absent} absent from labels; their F1 counts as 0")

    if k == 2:
        auc = _rank_auc(s[:, 1], y == 1)
    else:
        per_class = np.array([_rank_auc(s[:, c], y == c) for c in range(k)])
        auc = float(np.nanmean(per_class)) if np.isfinite(per_class).any() else np.nan

    return {
        "accuracy": float(np.mean(pred == y)),
        "macro_f1": float(f1_score(y, pred, labels=list(range(k)), average="macro", zero_division=0)),
        "auc": auc,
        "absent_classes": absent,
    }

