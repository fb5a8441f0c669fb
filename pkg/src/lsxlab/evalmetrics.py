"""Evaluation suite: accuracy, explanation separability, and faithfulness.

Separability has two probes: a closed-form one-vs-all ridge regression
fitted on explanations, and the inter- vs intraclass explanation
similarity (IIES) ratio computed in the embedding space of a reference
encoder trained only on the base task with its own seed.

Faithfulness comes in the discrete form (class-probability drop when
keeping / removing the top-q% entries, for concept inputs) and the
continuous form (accuracy under median-replacement with a random-removal
baseline, for images).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_B = (1, 5, 10, 20, 50)


@dataclass
class MetricReport:
    accuracy: float | None = None
    ridge_accuracy: float | None = None
    iies: float | None = None
    comp: float | None = None
    suff: float | None = None
    variant: str | None = None      # discrete | continuous
    b_set: tuple = DEFAULT_B
    seeds: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {
            "accuracy": self.accuracy, "ridge_accuracy": self.ridge_accuracy,
            "iies": self.iies, "comp": self.comp, "suff": self.suff,
            "variant": self.variant, "b_set": " ".join(map(str, self.b_set)),
        }


# ---------------------------------------------------------------------------
# ridge separability

def ridge_separability(train_x: np.ndarray, train_y: np.ndarray,
                       test_x: np.ndarray, test_y: np.ndarray,
                       alpha: float = 1.0, n_classes: int | None = None) -> float:
    """Held-out accuracy (%) of one-vs-all ridge fitted on explanations.

    Direct solve of (X^T X + alpha I) W = X^T Y with one-hot Y; prediction
    is the argmax row. Deterministic, no iterations.
    """
    if alpha <= 0:
        raise ValueError("ridge alpha must be > 0")
    xtr = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    xte = np.asarray(test_x, dtype=np.float64).reshape(len(test_x), -1)
    k = n_classes or int(max(train_y.max(), test_y.max())) + 1
    onehot = np.zeros((len(train_y), k))
    onehot[np.arange(len(train_y)), train_y] = 1.0
    gram = xtr.T @ xtr + alpha * np.eye(xtr.shape[1])
    weights = np.linalg.solve(gram, xtr.T @ onehot)
    if not np.all(np.isfinite(weights)):
        raise FloatingPointError("ridge solve produced non-finite weights")
    pred = np.argmax(xte @ weights, axis=1)
    return float(np.mean(pred == test_y) * 100.0)


def ridge_split(x: np.ndarray, y: np.ndarray, train_frac: float = 0.8,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stratified train/test split of an explanation set."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51D6E]))
    train_idx, test_idx = [], []
    for k in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == k))
        cut = max(1, int(round(train_frac * len(members))))
        if cut == len(members) and len(members) > 1:
            cut -= 1
        train_idx.append(members[:cut])
        test_idx.append(members[cut:])
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    return x[tr], y[tr], x[te], y[te]


# ---------------------------------------------------------------------------
# inter- vs intraclass explanation similarity

def iies(explanations: np.ndarray, labels: np.ndarray, encoder=None,
         corrected_denominator: bool = False) -> float:
    """Mean over classes of (mean distance to the class centroid) divided
    by the mean centroid-to-centroid distance; lower is tighter/better.

    `encoder` maps explanations to the comparison space (a reference model's
    embedding; identity if None). The denominator keeps the 1/K factor of
    the printed formula; `corrected_denominator` switches to 1/(K-1) for
    sensitivity checks.
    """
    labels = np.asarray(labels)
    z = np.asarray(explanations, dtype=np.float64)
    if encoder is not None:
        z = np.asarray(encoder(explanations), dtype=np.float64)
    z = z.reshape(len(z), -1)
    classes = np.unique(labels)
    k = len(classes)
    if k < 2:
        raise ValueError("iies needs at least 2 classes")
    mu = np.stack([z[labels == c].mean(axis=0) for c in classes])
    ratios = []
    for i, c in enumerate(classes):
        members = z[labels == c]
        intra = np.linalg.norm(members - mu[i], axis=1).mean()
        others = np.linalg.norm(mu - mu[i], axis=1)
        denom_count = (k - 1) if corrected_denominator else k
        inter = others.sum() / denom_count   # sum skips i implicitly: d(mu_i,mu_i)=0
        ratios.append(intra / inter)
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# comprehensiveness / sufficiency

def _top_indices(expl_flat: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` largest |values|; ties resolved by the stable
    (magnitude desc, flat index asc) order so constant maps stay
    deterministic."""
    order = np.argsort(-np.abs(expl_flat), kind="stable")
    return order[:count]


def _q_count(q: float, width: int) -> int:
    if not 0 < q <= 100:
        raise ValueError(f"percentage {q} outside (0, 100]")
    return max(1, int(np.ceil(q / 100.0 * width)))


def comp_suff_discrete(predict_proba, inputs: np.ndarray, explanations: np.ndarray,
                       b_set=DEFAULT_B) -> tuple[float, float]:
    """Probability-drop faithfulness for discrete (concept) inputs.

    comp = mean over B, samples of p_c(x) - p_c(x with top-q% zeroed);
    suff = mean of p_c(x) - p_c(only top-q% kept). c is the predicted
    class on the intact input; importance is |explanation| per entry.
    """
    x = np.asarray(inputs, dtype=np.float64)
    e = np.asarray(explanations, dtype=np.float64).reshape(len(x), -1)
    width = e.shape[1]
    proba = np.asarray(predict_proba(x))
    pred = np.argmax(proba, axis=1)
    base = proba[np.arange(len(x)), pred]
    comps, suffs = [], []
    for q in b_set:
        count = _q_count(q, width)
        kept = np.zeros_like(x).reshape(len(x), -1)
        removed = x.reshape(len(x), -1).copy()
        for i in range(len(x)):
            top = _top_indices(e[i], count)
            kept[i, top] = x.reshape(len(x), -1)[i, top]
            removed[i, top] = 0.0
        p_removed = np.asarray(predict_proba(removed.reshape(x.shape)))[np.arange(len(x)), pred]
        p_kept = np.asarray(predict_proba(kept.reshape(x.shape)))[np.arange(len(x)), pred]
        comps.append(float(np.mean(base - p_removed)))
        suffs.append(float(np.mean(base - p_kept)))
    return float(np.mean(comps)), float(np.mean(suffs))


def comp_suff_continuous(predict_logits, inputs: np.ndarray, labels: np.ndarray,
                         explanations: np.ndarray, b_set=DEFAULT_B,
                         seed: int = 0) -> tuple[float, float]:
    """Accuracy-based faithfulness for continuous (image) inputs.

    Top-q% pixels (by |explanation|) are replaced with the evaluation
    set's global median value; a random-q% counterpart (own sub-seed)
    gives the baseline. comp = acc(random removed) - acc(top removed);
    suff = acc(random kept) - acc(top kept).
    """
    x = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    e = np.asarray(explanations, dtype=np.float64).reshape(len(x), -1)
    flat = x.reshape(len(x), -1)
    width = flat.shape[1]
    median = float(np.median(x))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0135]))

    def acc(batch_flat):
        logits = predict_logits(batch_flat.reshape(x.shape))
        return float(np.mean(np.argmax(logits, axis=1) == labels) * 100.0)

    comp_top, comp_rand, suff_top, suff_rand = [], [], [], []
    for q in b_set:
        count = _q_count(q, width)
        top_removed, top_kept = flat.copy(), np.full_like(flat, median)
        rand_removed, rand_kept = flat.copy(), np.full_like(flat, median)
        for i in range(len(x)):
            top = _top_indices(e[i], count)
            rand = rng.permutation(width)[:count]
            top_removed[i, top] = median
            top_kept[i, top] = flat[i, top]
            rand_removed[i, rand] = median
            rand_kept[i, rand] = flat[i, rand]
        comp_top.append(acc(top_removed))
        comp_rand.append(acc(rand_removed))
        suff_top.append(acc(top_kept))
        suff_rand.append(acc(rand_kept))
    comp = float(np.mean(comp_rand) - np.mean(comp_top))
    suff = float(np.mean(suff_rand) - np.mean(suff_top))
    return comp, suff
