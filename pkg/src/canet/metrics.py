"""Pixel-exact evaluation: precision/recall/F1 and threshold selection.

Zero-denominator conventions (pinned, tested): precision is 0 when nothing
was predicted, recall is 0 when the ground truth is empty, F1 is 0 when
P + R = 0 -- except that two empty images count as a perfect match (F1 = 1).
"""

from dataclasses import dataclass, field

import numpy as np

THRESHOLD_GRID = tuple(i / 100.0 for i in range(1, 100))
AGGREGATES = ("per_image", "global")


def confusion_counts(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(
            f"extent mismatch: pred {pred.shape} vs gt {gt.shape}"
        )
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def f1_from_counts(tp, fp, fn):
    if tp == 0 and fp == 0 and fn == 0:
        return 0.0, 0.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def pixel_f1(pred, gt):
    """(precision, recall, f1) under exact per-pixel matching."""
    return f1_from_counts(*confusion_counts(pred, gt))


def _threshold_counts(prob, gt):
    """tp/fp/fn for every grid threshold at once, via sorted-rank counting.

    Binarization is prob >= t, so the count of predicted pixels at t is the
    number of values with rank >= searchsorted(sorted, t, 'left').
    """
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    if prob.shape != gt.shape:
        raise ValueError(
            f"extent mismatch: prob {prob.shape} vs gt {gt.shape}"
        )
    grid = np.asarray(THRESHOLD_GRID)
    all_sorted = np.sort(prob, axis=None)
    pos_sorted = np.sort(prob[gt], axis=None)
    npos = pos_sorted.size
    pred = all_sorted.size - np.searchsorted(all_sorted, grid, side="left")
    tp = npos - np.searchsorted(pos_sorted, grid, side="left")
    fp = pred - tp
    fn = npos - tp
    return tp, fp, fn


def adaptive_threshold(probs, gts, aggregate="per_image"):
    """Pick the grid threshold in {0.01..0.99} maximizing F1 (ties: lowest).

    `aggregate` selects the objective: mean of per-image F1 (default) or a
    single F1 over globally pooled counts.  Returns (threshold, best score).
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"aggregate must be one of {AGGREGATES}, got {aggregate!r}")
    probs = list(probs)
    gts = list(gts)
    if not probs:
        raise ValueError("adaptive_threshold needs at least one image")
    if len(probs) != len(gts):
        raise ValueError(
            f"got {len(probs)} probability maps but {len(gts)} ground truths"
        )
    per_image = [_threshold_counts(p, g) for p, g in zip(probs, gts)]
    ngrid = len(THRESHOLD_GRID)
    scores = np.zeros(ngrid)
    if aggregate == "per_image":
        for tp, fp, fn in per_image:
            scores += [
                f1_from_counts(int(tp[i]), int(fp[i]), int(fn[i]))[2]
                for i in range(ngrid)
            ]
        scores /= len(per_image)
    else:
        tot = np.zeros((3, ngrid), dtype=np.int64)
        for tp, fp, fn in per_image:
            tot[0] += tp
            tot[1] += fp
            tot[2] += fn
        scores = np.array([
            f1_from_counts(int(tot[0, i]), int(tot[1, i]), int(tot[2, i]))[2]
            for i in range(ngrid)
        ])
    best = int(np.argmax(scores))  # first max = lowest threshold on ties
    return THRESHOLD_GRID[best], float(scores[best])


@dataclass
class EvalReport:
    """Per-image confusion counts and rates plus the aggregate summary."""

    image_ids: list
    counts: list  # (tp, fp, fn) per image
    threshold: float
    aggregate: str = "per_image"
    rates: list = field(init=False)
    mean_f1: float = field(init=False)

    def __post_init__(self):
        self.rates = [f1_from_counts(*c) for c in self.counts]
        if self.aggregate == "global":
            tot = tuple(sum(c[i] for c in self.counts) for i in range(3))
            self.mean_f1 = f1_from_counts(*tot)[2]
        else:
            self.mean_f1 = (
                sum(r[2] for r in self.rates) / len(self.rates)
                if self.rates else 0.0
            )

    def to_text(self):
        lines = [
            f"{'image':<28} {'TP':>8} {'FP':>8} {'FN':>8} "
            f"{'prec':>7} {'rec':>7} {'F1':>7}"
        ]
        for img, (tp, fp, fn), (p, r, f1) in zip(
            self.image_ids, self.counts, self.rates
        ):
            lines.append(
                f"{img:<28} {tp:>8} {fp:>8} {fn:>8} {p:>7.4f} {r:>7.4f} {f1:>7.4f}"
            )
        lines.append(
            f"threshold {self.threshold:.2f}  mean F1 {self.mean_f1:.4f}  "
            f"({self.aggregate} aggregation, {len(self.image_ids)} images)"
        )
        return "\n".join(lines)

    def to_delimited(self):
        lines = ["image\ttp\tfp\tfn\tprecision\trecall\tf1"]
        for img, (tp, fp, fn), (p, r, f1) in zip(
            self.image_ids, self.counts, self.rates
        ):
            lines.append(f"{img}\t{tp}\t{fp}\t{fn}\t{p:.6f}\t{r:.6f}\t{f1:.6f}")
        lines.append(f"threshold\t{self.threshold:.2f}\tmean_f1\t{self.mean_f1:.6f}")
        return "\n".join(lines) + "\n"
