"""MC-dropout predictive distributions and evaluation metrics.

All logs are natural logs (nats).  OOD scores are oriented so that a higher
score means "more out-of-distribution"; AUROC treats the OOD set as the
positive class.
"""

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .errors import DimensionError, UsageError
from .nn import forward_from, forward_prefix

NLL_CLAMP = 1e-12
OOD_METHODS = ("msp", "entropy", "expected_entropy")


@dataclass
class PredictiveBatch:
    mean_probs: np.ndarray
    sample_probs: np.ndarray = None
    S_eval: int = 1

    @property
    def n(self):
        return self.mean_probs.shape[0]


@dataclass
class MetricsReport:
    acc: float
    nll: float
    ece: float
    n: int
    S_eval: int
    seed: int
    dataset: str = ""
    method: str = "VLM-FS-EB"
    n_classes: int = 0
    auroc: dict = field(default_factory=dict)  # ood set -> {score method -> value}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def predictive(net, inputs, S_eval, rng, batch_size=500, keep_samples=True):
    """Average of ``S_eval`` softmax outputs with dropout active."""
    if S_eval < 1:
        raise UsageError(f"S_eval must be >= 1, got {S_eval}")
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    samples = np.empty((S_eval, n, net.n_classes))
    for i in range(0, n, batch_size):
        h, start = forward_prefix(net, inputs[i:i + batch_size])
        for s in range(S_eval):
            logits = forward_from(net, h, start, mode="eval_mc", rng=rng).data
            samples[s, i:i + batch_size] = ad.softmax_np(logits)
    mean = samples.mean(axis=0)
    return PredictiveBatch(mean, samples if keep_samples else None, S_eval)


def _labels(pb, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (pb.n,):
        raise DimensionError(f"expected {pb.n} labels, got shape {labels.shape}")
    return labels


def accuracy(pb, labels):
    labels = _labels(pb, labels)
    if pb.n == 0:
        return 0.0
    # argmax returns the lowest index among ties
    return float(np.mean(np.argmax(pb.mean_probs, axis=1) == labels))


def nll(pb, labels):
    labels = _labels(pb, labels)
    if pb.n == 0:
        return 0.0
    p = pb.mean_probs[np.arange(pb.n), labels]
    return float(np.mean(-np.log(np.maximum(p, NLL_CLAMP))))


def ece_bins(pb, labels, bins=15):
    """Per-bin (count, accuracy, confidence) for equal-width bins on (0, 1]."""
    labels = _labels(pb, labels)
    if bins < 1:
        raise UsageError(f"bins must be >= 1, got {bins}")
    conf = pb.mean_probs.max(axis=1)
    correct = (np.argmax(pb.mean_probs, axis=1) == labels).astype(np.float64)
    # a boundary value b/bins belongs to the higher bin; 1.0 to the last one
    idx = np.minimum(np.floor(conf * bins).astype(np.int64), bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc_b = np.where(count > 0, acc_sum / np.maximum(count, 1), 0.0)
        conf_b = np.where(count > 0, conf_sum / np.maximum(count, 1), 0.0)
    return count, acc_b, conf_b


def ece(pb, labels, bins=15):
    if pb.n == 0:
        warnings.warn("ECE of an empty batch is defined as 0", stacklevel=2)
        return 0.0
    count, acc_b, conf_b = ece_bins(pb, labels, bins)
    return float(np.sum(count / pb.n * np.abs(acc_b - conf_b)))


def entropy(probs):
    """Row-wise entropy; each row is summed in sorted order so the value
    does not depend on class order."""
    p = np.sort(np.asarray(probs, dtype=np.float64), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def ood_scores(pb, method):
    if method == "msp":
        return 1.0 - pb.mean_probs.max(axis=1)
    if method == "entropy":
        return entropy(pb.mean_probs)
    if method == "expected_entropy":
        if pb.sample_probs is None:
            raise UsageError("expected_entropy needs the per-pass probabilities (keep_samples=True)")
        return entropy(pb.sample_probs).mean(axis=0)
    raise UsageError(f"unknown OOD score {method!r}; choose from {OOD_METHODS}")


def auroc(in_scores, ood_scores_):
    """Mann-Whitney AUROC with OOD as positives and ties counted as 1/2."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores_, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise UsageError("auroc needs non-empty in-distribution and OOD score sets")
    ranks = rankdata(np.concatenate([b, a]))  # average ranks, multiples of 1/2
    u = ranks[: b.size].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def auroc_bruteforce(in_scores, ood_scores_):
    """O(n^2) pair count; test oracle for :func:`auroc`."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores_, dtype=np.float64).ravel()
    wins = 0.0
    for o in b:
        wins += np.sum(o > a) + 0.5 * np.sum(o == a)
    return float(wins / (a.size * b.size))


def roc_curve(in_scores, ood_scores_):
    """(fpr, tpr) points for plotting, thresholds swept from high to low."""
    scores = np.concatenate([ood_scores_, in_scores])
    y = np.concatenate([np.ones(len(ood_scores_)), np.zeros(len(in_scores))])
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    return np.r_[0.0, fps / max(len(in_scores), 1)], np.r_[0.0, tps / max(len(ood_scores_), 1)]


def evaluate(net, dataset, S_eval, rng, seed=0, ood_sets=None, bins=15, method="VLM-FS-EB"):
    """Full in-distribution metrics and per-score AUROC for each OOD set.

    Returns ``(report, in_batch, {name: ood_batch})`` so callers can plot.
    """
    pb = predictive(net, dataset.images, S_eval, rng)
    report = MetricsReport(
        acc=accuracy(pb, dataset.labels),
        nll=nll(pb, dataset.labels),
        ece=ece(pb, dataset.labels, bins),
        n=pb.n,
        S_eval=S_eval,
        seed=seed,
        dataset=dataset.name,
        method=method,
        n_classes=net.n_classes,
    )
    ood_batches = {}
    for ood in ood_sets or []:
        ob = predictive(net, ood.images, S_eval, rng)
        ood_batches[ood.name] = ob
        report.auroc[ood.name] = {m: auroc(ood_scores(pb, m), ood_scores(ob, m)) for m in OOD_METHODS}
    return report, pb, ood_batches
