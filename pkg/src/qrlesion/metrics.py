import numpy as np
from scipy.stats import rankdata


def _as_binary(a):
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("expected a binary mask")
        a = a.astype(bool)
    return a


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); 1.0 when both masks are empty."""
    a, b = _as_binary(a), _as_binary(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Equals P(score+ > score-) + 0.5 P(score+ == score-); ties get mid-ranks.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _as_binary(labels).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def coverage(lo, hi, y) -> float:
    """Fraction of targets with lo <= y <= hi."""
    lo, hi, y = (np.asarray(a, dtype=np.float64) for a in (lo, hi, y))
    if not lo.shape == hi.shape == y.shape:
        raise ValueError("lo, hi and y must share a shape")
    return float(np.mean((lo <= y) & (y <= hi)))


def empirical_fdr(mask, truth) -> float:
    """False discoveries over max(1, discoveries)."""
    mask, truth = _as_binary(mask), _as_binary(truth)
    if mask.shape != truth.shape:
        raise ValueError(f"shape mismatch {mask.shape} vs {truth.shape}")
    fp = np.logical_and(mask, ~truth).sum()
    return float(fp / max(1, mask.sum()))
