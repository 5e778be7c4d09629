"""Procedure-planning and walk-through metrics, plus the uniform baseline."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def action_metrics(gt, pred):
    """``(success, accuracy, iou)`` for one planned action sequence.

    ``accuracy`` is the fraction of matching positions and ``iou`` compares the
    action *sets*, so it ignores order.
    """
    gt, pred = [int(a) for a in gt], [int(a) for a in pred]
    if len(gt) != len(pred):
        raise MetricError(f"length mismatch: gt has {len(gt)} actions, pred has {len(pred)}")
    if not gt:
        raise MetricError("empty sequences")
    matched = sum(a == b for a, b in zip(gt, pred))
    g, p = set(gt), set(pred)
    return int(matched == len(gt)), matched / len(gt), len(g & p) / len(g | p)


def _check_perm(x, name):
    x = np.asarray(x)
    if x.ndim != 1 or sorted(x.tolist()) != sorted(set(x.tolist())):
        raise MetricError(f"{name} is not a permutation: {x.tolist()}")
    return x


def _order_counts(gt_order, pred_order):
    g = _check_perm(gt_order, "gt_order")
    p = _check_perm(pred_order, "pred_order")
    if len(g) != len(p) or set(g.tolist()) != set(p.tolist()):
        raise MetricError(f"orders cover different elements: {g.tolist()} vs {p.tolist()}")
    pos_p = {int(e): i for i, e in enumerate(p)}
    rank = np.array([pos_p[int(e)] for e in g], dtype=int)  # pred position of gt's i-th element
    concordant = int(np.triu(rank[:, None] < rank[None, :], 1).sum())
    return int((g != p).sum()), concordant, len(g) * (len(g) - 1) // 2


def order_metrics(gt_order, pred_order):
    """``(hamming, pair_accuracy)`` between two orderings of the same elements.

    Pair accuracy is the fraction of element pairs whose relative order agrees.
    """
    hamming, concordant, pairs = _order_counts(gt_order, pred_order)
    return hamming, concordant / pairs if pairs else 1.0


@dataclass
class HorizonMetrics:
    horizon: int
    queries: int = 0
    successes: int = 0
    matched: int = 0          # matching positions summed over queries
    iou_sum: float = 0.0
    walks: int = 0
    hamming_total: int = 0
    concordant: int = 0       # concordant pairs summed over walks
    pairs: int = 0

    def add_plan(self, gt, pred):
        s, _, iou = action_metrics(gt, pred)
        self.queries += 1
        self.successes += s
        self.matched += sum(int(a) == int(b) for a, b in zip(gt, pred))
        self.iou_sum += iou

    def add_walk(self, gt_order, pred_order):
        h, c, npairs = _order_counts(gt_order, pred_order)
        self.walks += 1
        self.hamming_total += h
        self.concordant += c
        self.pairs += npairs

    def summary(self):
        q, w = max(self.queries, 1), max(self.walks, 1)
        return {
            "horizon": self.horizon,
            "queries": self.queries,
            "success_rate": 100.0 * self.successes / q,
            "accuracy": 100.0 * self.matched / (q * self.horizon),
            "miou": 100.0 * self.iou_sum / q,
            "walks": self.walks,
            "hamming": self.hamming_total / w,
            "pair_accuracy": 100.0 * self.concordant / self.pairs if self.pairs else 100.0,
        }


@dataclass
class MetricsReport:
    name: str
    horizons: dict = field(default_factory=dict)   # horizon -> HorizonMetrics
    records: list = field(default_factory=list)    # raw per-query log

    def horizon(self, T) -> HorizonMetrics:
        if T not in self.horizons:
            self.horizons[T] = HorizonMetrics(T)
        return self.horizons[T]

    def add_plan(self, gt, pred, **extra):
        gt, pred = [int(a) for a in gt], [int(a) for a in pred]
        self.horizon(len(gt)).add_plan(gt, pred)
        self.records.append({"kind": "plan", "gt": gt, "pred": pred, **extra})

    def add_walk(self, gt_order, pred_order, **extra):
        g, p = [int(a) for a in gt_order], [int(a) for a in pred_order]
        self.horizon(len(g)).add_walk(g, p)
        self.records.append({"kind": "walk", "gt": g, "pred": p, **extra})

    @classmethod
    def from_records(cls, name, records):
        rep = cls(name)
        for r in records:
            extra = {k: v for k, v in r.items() if k not in ("kind", "gt", "pred")}
            (rep.add_plan if r["kind"] == "plan" else rep.add_walk)(r["gt"], r["pred"], **extra)
        return rep

    def summary(self):
        return {"name": self.name, "horizons": [self.horizons[T].summary() for T in sorted(self.horizons)]}

    def to_json(self):
        return json.dumps({"summary": self.summary(),
                           "counts": [asdict(self.horizons[T]) for T in sorted(self.horizons)]},
                          sort_keys=True, indent=1)

    def table(self):
        lines = [f"{'T':>3} {'n':>6} {'succ%':>7} {'acc%':>7} {'mIoU%':>7} {'walks':>6} {'ham':>6} {'pair%':>7}"]
        for h in self.summary()["horizons"]:
            walk = (f"{h['hamming']:6.3f} {h['pair_accuracy']:7.2f}" if h["walks"] else f"{'-':>6} {'-':>7}")
            plan = (f"{h['success_rate']:7.2f} {h['accuracy']:7.2f} {h['miou']:7.2f}" if h["queries"]
                    else f"{'-':>7} {'-':>7} {'-':>7}")
            lines.append(f"{h['horizon']:>3} {h['queries']:>6} {plan} {h['walks']:>6} {walk}")
        return "\n".join(lines)


def uniform_success_rate(M, T):
    """Chance that T i.i.d. uniform actions reproduce a given sequence."""
    return (1.0 / M) ** T


def uniform_baseline(gt_plans, M, rng, walk_sizes=(), fixed_endpoints=True, name="uniform"):
    """Metrics of i.i.d.-uniform action plans and uniformly random walk orders.

    ``gt_plans`` is a list of ground-truth action sequences. ``walk_sizes`` lists
    pool sizes for walk queries; the ground-truth order is the identity. With
    ``fixed_endpoints`` the first and last element stay in place and only the
    interior is shuffled, otherwise the whole order is random.
    """
    if M < 1:
        raise MetricError("M must be >= 1")
    rep = MetricsReport(name)
    for gt in gt_plans:
        rep.add_plan(gt, rng.integers(0, M, size=len(gt)))
    for T in walk_sizes:
        if fixed_endpoints:
            inner = rng.permutation(np.arange(1, T - 1)) if T > 2 else np.array([], dtype=int)
            pred = np.concatenate([[0], inner, [T - 1]]) if T > 1 else np.array([0])
        else:
            pred = rng.permutation(T)
        rep.add_walk(np.arange(T), pred)
    return rep
