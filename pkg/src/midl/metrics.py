"""Evaluation metrics: sparsity, compute, information content, calibration."""
import csv
import io
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- records

CSV_COLUMNS = (
    "seed", "epoch", "accuracy", "macro_f1", "anr", "flops_dense", "flops_effective",
    "latency_ms", "smi_nats", "ece", "brier",
)


@dataclass
class MetricsRecord:
    """One evaluation snapshot. Unmeasured quantities are NaN."""

    seed: int = 0
    epoch: int = 0
    accuracy: float = math.nan
    macro_f1: float = math.nan
    anr: float = math.nan
    flops_dense: float = math.nan
    flops_effective: float = math.nan
    latency_ms: float = math.nan
    smi_nats: float = math.nan
    ece: float = math.nan
    brier: float = math.nan

    def validate(self):
        for name in ("accuracy", "macro_f1", "anr", "ece"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")
        if not math.isnan(self.smi_nats) and self.smi_nats < 0:
            raise MetricError(f"smi_nats={self.smi_nats} is negative")
        if not math.isnan(self.brier) and not 0.0 <= self.brier <= 2.0:
            raise MetricError(f"brier={self.brier} outside [0, 2]")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        kw = {k: (float(v) if v is not None else math.nan) for k, v in d.items() if k in names}
        kw["seed"], kw["epoch"] = int(d.get("seed", 0)), int(d.get("epoch", 0))
        return cls(**kw)

    def csv_row(self):
        return [getattr(self, c) for c in CSV_COLUMNS]


def metrics_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.csv_row()])
    return buf.getvalue()


def metrics_from_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [MetricsRecord.from_dict(r) for r in rows]


# ---------------------------------------------------------------- sparsity and compute


def active_neuron_ratio(traces, tau=0.01):
    """Fraction of (sample, neuron) pairs whose sparse gate exceeds ``tau``."""
    if tau < 0:
        raise MetricError(f"tau must be non-negative, got {tau}")
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    if not traces:
        raise MetricError("no gate traces to measure")
    total = active = 0
    for trace in traces:
        a = np.asarray(trace.alpha_hat)
        if a.size == 0:
            raise MetricError("empty gate trace")
        active += int((a > tau).sum())
        total += a.size
    return active / total


def flops_count(model, anr=None):
    """Analytic FLOPs per sample: ``(flops_dense, flops_effective)``.

    A ``m x n`` matmul costs ``2*m*n``; each bias add or activation costs one
    FLOP per output. Elementwise gate mixing is not counted. When ``anr`` is
    given the effective count weights each MID-L block's lightweight-path
    terms by ``anr`` and its rich-path terms by ``1 - anr``; otherwise the
    effective count equals the dense count.
    """
    layers = getattr(model, "layers", model)
    dense = 0
    effective = 0.0
    for layer in layers:
        for group, count in layer.flop_terms():
            dense += count
            if anr is None:
                effective += count
            elif group == "f1":
                effective += anr * count
            elif group == "f2":
                effective += (1.0 - anr) * count
            else:
                effective += count
    return dense, effective


# ---------------------------------------------------------------- mutual information


@dataclass(frozen=True)
class SmiConfig:
    num_projections: int = 128
    num_bins: int = 16
    projection_seed: int = 0

    def __post_init__(self):
        if self.num_projections < 1:
            raise MetricError(f"num_projections must be >= 1, got {self.num_projections}")
        if self.num_bins < 2:
            raise MetricError(f"num_bins must be >= 2, got {self.num_bins}")


def equal_width_bins(values, num_bins):
    """Column-wise bin index in ``[0, num_bins)`` over each column's range."""
    v = np.asarray(values, dtype=np.float64)
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    idx = np.floor((v - lo) / safe * num_bins).astype(np.intp)
    idx = np.clip(idx, 0, num_bins - 1)
    idx[:, span == 0] = 0
    return idx


def _plugin_mi_columns(bins, labels, num_bins, num_classes):
    # bins: (N, P) integer codes; returns per-column plug-in MI in nats
    n, p = bins.shape
    codes = (np.arange(p)[None, :] * num_bins + bins) * num_classes + labels[:, None]
    joint = np.bincount(codes.ravel(), minlength=p * num_bins * num_classes)
    joint = joint.reshape(p, num_bins, num_classes) / n
    px = joint.sum(axis=2, keepdims=True)
    py = joint.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = joint / (px * py)
        terms = np.where(joint > 0, joint * np.log(ratio), 0.0)
    return np.maximum(terms.sum(axis=(1, 2)), 0.0)


def _check_labels(features, labels, num_bins):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[1] < 1:
        raise MetricError(f"features must be (N, d) with d >= 1, got {x.shape}")
    if y.shape != (x.shape[0],):
        raise MetricError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
    if x.shape[0] < 10 * num_bins:
        raise MetricError(
            f"need at least {10 * num_bins} samples for {num_bins} bins, got {x.shape[0]}"
        )
    _, y = np.unique(y, return_inverse=True)
    return x, y.astype(np.intp)


def neuron_mutual_information(features, labels, num_bins=16):
    """Plug-in MI (nats) between each binned feature column and the labels."""
    x, y = _check_labels(features, labels, num_bins)
    return _plugin_mi_columns(equal_width_bins(x, num_bins), y, num_bins, int(y.max()) + 1)


def random_unit_directions(d, n, seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((n, d))
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


def sliced_mutual_information(features, labels, cfg=None):
    """Sliced mutual information between ``features`` and class ``labels``.

    Average, over ``cfg.num_projections`` random unit directions, of the
    plug-in MI between the equal-width-binned 1-D projection and the labels.
    Deterministic given ``cfg.projection_seed``.
    """
    cfg = cfg or SmiConfig()
    x, y = _check_labels(features, labels, cfg.num_bins)
    theta = random_unit_directions(x.shape[1], cfg.num_projections, cfg.projection_seed)
    proj = x @ theta.T
    mi = _plugin_mi_columns(equal_width_bins(proj, cfg.num_bins), y, cfg.num_bins, int(y.max()) + 1)
    return float(mi.mean())


def activation_frequency(traces, tau=0.01):
    """Per-neuron fraction of inputs for which the sparse gate exceeds ``tau``."""
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    a = np.concatenate([np.asarray(t.alpha_hat) for t in traces], axis=0)
    return (a > tau).mean(axis=0)


# ---------------------------------------------------------------- classification


def classification_metrics(predictions, labels):
    """``(accuracy, macro_f1)``.

    Macro-F1 averages per-class F1 over classes present in either the
    predictions or the labels.
    """
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise MetricError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if p.size == 0:
        raise MetricError("empty predictions")
    accuracy = float((p == y).mean())
    f1s = []
    for c in np.union1d(p, y):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return accuracy, float(np.mean(f1s))


def calibration_metrics(probabilities, labels, num_bins=15):
    """``(ece, brier)`` for row-stochastic ``probabilities``.

    ECE bins the max-probability confidence into ``num_bins`` equal-width
    intervals ``(lo, hi]`` and averages ``|accuracy - confidence|`` weighted
    by bin population. Brier is the mean squared distance to the one-hot
    label (range [0, 2]).
    """
    P = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(np.intp)
    if P.ndim != 2 or y.shape != (P.shape[0],):
        raise MetricError(f"probabilities {P.shape} do not match labels {y.shape}")
    if P.shape[0] == 0:
        raise MetricError("empty probabilities")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        raise MetricError("probability rows must sum to 1 within 1e-6")
    n = P.shape[0]
    conf = P.max(axis=1)
    correct = (P.argmax(axis=1) == y).astype(np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    which = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, num_bins - 1)
    ece = 0.0
    for b in range(num_bins):
        sel = which == b
        if sel.any():
            ece += sel.sum() / n * abs(correct[sel].mean() - conf[sel].mean())
    onehot = np.zeros_like(P)
    onehot[np.arange(n), y] = 1.0
    brier = float(((P - onehot) ** 2).sum(axis=1).mean())
    return float(ece), brier


# ---------------------------------------------------------------- latency


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    samples_ms: list


def latency_probe(forward, batch, repeats=5):
    """Wall-clock milliseconds per call of ``forward(batch)``.

    One untimed warm-up call, then ``repeats`` timed calls on the monotonic
    performance counter. Run on an otherwise idle thread.
    """
    if repeats < 3:
        raise MetricError(f"repeats must be >= 3, got {repeats}")
    fn = forward if callable(forward) else forward.forward
    fn(batch)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn(batch)
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    arr = np.asarray(samples)
    return LatencyStats(float(arr.mean()), float(arr.std()), samples)
