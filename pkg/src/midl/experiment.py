"""Training runs, evaluation and variant sweeps."""
import csv
import dataclasses
import functools
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write_bytes, load_tensors, save_tensors
from .config import ConfigError, ExperimentConfig
from .data import (
    DataError,
    NoiseSpec,
    inject_symmetric_noise,
    load_mnist,
    overfit_stress_subset,
    random_subset,
    synthetic_two_gaussians,
    batch_iterator,
)
from .layers import GateTrace, random_topk_gate
from .metrics import (
    MetricsRecord,
    SmiConfig,
    activation_frequency,
    active_neuron_ratio,
    calibration_metrics,
    classification_metrics,
    flops_count,
    latency_probe,
    metrics_to_csv,
    neuron_mutual_information,
    sliced_mutual_information,
)
from .models import build_mlp
from .optim import Adam

log = logging.getLogger(__name__)

EVAL_BATCH = 1000


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(seed, domain):
    """Independent 63-bit seed for ``domain`` derived from a run seed."""
    digest = hashlib.sha256(f"midl:{domain}:{seed}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------- data


@functools.lru_cache(maxsize=4)
def _mnist(directory, split):
    return load_mnist(directory, split)


def load_datasets(spec, run_seed):
    """``(train, test)`` for a dataset spec; only training labels are noised."""
    data_seed = spec.seed if spec.seed is not None else derive_seed(run_seed, "data")
    if spec.name == "mnist":
        directory = os.path.abspath(spec.mnist_dir())
        try:
            train, test = _mnist(directory, "train"), _mnist(directory, "test")
        except (OSError, DataError) as exc:
            raise DataError(f"cannot load MNIST from {directory}: {exc}") from exc
        if spec.stress_per_class:
            train = overfit_stress_subset(train, spec.stress_per_class, derive_seed(data_seed, "stress"))
        elif spec.train_subset:
            train = random_subset(train, spec.train_subset, derive_seed(data_seed, "subset"))
        if spec.test_subset:
            test = random_subset(test, spec.test_subset, derive_seed(data_seed, "test-subset"))
    elif spec.name == "two_gaussians":
        n, m = spec.synthetic_n, spec.synthetic_test_n
        full = synthetic_two_gaussians(n + m, spec.synthetic_d, spec.separation, derive_seed(data_seed, "synthetic"))
        train, test = full.take(np.arange(n)), full.take(np.arange(n, n + m))
        if spec.stress_per_class:
            train = overfit_stress_subset(train, spec.stress_per_class, derive_seed(data_seed, "stress"))
    else:
        raise ConfigError(f"unknown dataset {spec.name!r}")
    if spec.noise_rate > 0:
        train = inject_symmetric_noise(train, NoiseSpec(spec.noise_rate, derive_seed(data_seed, "noise")))
    return train, test


# ---------------------------------------------------------------- evaluation


def _concat_traces(traces):
    return GateTrace(
        np.concatenate([t.alpha for t in traces]),
        np.concatenate([t.mask for t in traces]),
        np.concatenate([t.alpha_hat for t in traces]),
        traces[0].k,
    )


@dataclass
class EvalOutputs:
    probabilities: np.ndarray
    traces: list
    hidden: np.ndarray

    @property
    def gated(self):
        return bool(self.traces)

    def selected_features(self):
        """First hidden layer's activations, zeroed where its gate mask is off."""
        if self.gated:
            return self.hidden * self.traces[0].mask
        return self.hidden


def forward_dataset(model, features, rng=None, epoch=None):
    probs, hidden = [], []
    per_layer = None
    first_gated = next((i for i, l in enumerate(model.layers) if l in model.gated_layers), None)
    for start in range(0, features.shape[0], EVAL_BATCH):
        out = model.forward(features[start:start + EVAL_BATCH], training=False, rng=rng, epoch=epoch)
        probs.append(T.softmax(out.logits.data))
        hidden.append(out.activations[first_gated if first_gated is not None else 0].data)
        traces = [t for t in out.traces if t is not None]
        if per_layer is None:
            per_layer = [[] for _ in traces]
        for bucket, t in zip(per_layer, traces):
            bucket.append(t)
    return EvalOutputs(
        np.concatenate(probs),
        [_concat_traces(b) for b in per_layer or []],
        np.concatenate(hidden),
    )


def evaluate(model, ds, config, seed, epoch, with_smi=False, with_latency=False):
    """Metrics of ``model`` on ``ds``; returns ``(MetricsRecord, EvalOutputs)``."""
    rng = np.random.default_rng(derive_seed(seed, f"eval:{epoch}"))
    out = forward_dataset(model, ds.features, rng=rng, epoch=epoch)
    pred = out.probabilities.argmax(axis=1)
    acc, f1 = classification_metrics(pred, ds.labels)
    ece, brier = calibration_metrics(out.probabilities, ds.labels)
    if out.gated:
        anr = active_neuron_ratio(out.traces, config.anr_tau)
        dense, eff = flops_count(model, anr)
    else:
        anr = 1.0
        dense, eff = flops_count(model)
    rec = MetricsRecord(
        seed=seed, epoch=epoch, accuracy=acc, macro_f1=f1, anr=anr,
        flops_dense=float(dense), flops_effective=float(eff), ece=ece, brier=brier,
    )
    if with_smi:
        cfg = _smi_config(config, seed)
        rec.smi_nats = sliced_mutual_information(out.selected_features(), ds.labels, cfg)
    if with_latency and config.latency_repeats:
        batch = ds.features[: config.batch_size]
        lat_rng = np.random.default_rng(derive_seed(seed, "latency"))
        stats = latency_probe(
            lambda b: model.forward(b, training=False, rng=lat_rng, epoch=epoch),
            batch, config.latency_repeats,
        )
        rec.latency_ms = stats.mean_ms
    return rec.validate(), out


def _smi_config(config, seed):
    return SmiConfig(config.smi_projections, config.smi_bins, derive_seed(seed, "smi"))


def compare_selection_smi(outputs, labels, smi_cfg, rng):
    """SMI of the learned selection vs. a random ``k``-subset of the same activations."""
    trace = outputs.traces[0]
    n, d = outputs.hidden.shape
    random_mask = random_topk_gate(n, d, trace.k, rng)
    return {
        "learned": sliced_mutual_information(outputs.hidden * trace.mask, labels, smi_cfg),
        "random": sliced_mutual_information(outputs.hidden * random_mask, labels, smi_cfg),
    }


# ---------------------------------------------------------------- runs


@dataclass
class RunResult:
    config: dict
    seed: int
    loss_curve: list = field(default_factory=list)
    train_history: list = field(default_factory=list)
    test_history: list = field(default_factory=list)
    final: MetricsRecord | None = None
    wall_clock_s: float = 0.0
    neuron_stats: dict | None = None
    selection_smi: dict | None = None

    def to_dict(self):
        return {
            "config": self.config,
            "seed": self.seed,
            "loss_curve": list(self.loss_curve),
            "train_history": [_nan_to_none(r.to_dict()) for r in self.train_history],
            "test_history": [_nan_to_none(r.to_dict()) for r in self.test_history],
            "final": _nan_to_none(self.final.to_dict()) if self.final else None,
            "wall_clock_s": self.wall_clock_s,
            "neuron_stats": self.neuron_stats,
            "selection_smi": self.selection_smi,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d):
        return cls(
            config=d["config"],
            seed=int(d["seed"]),
            loss_curve=list(d.get("loss_curve", [])),
            train_history=[MetricsRecord.from_dict(r) for r in d.get("train_history", [])],
            test_history=[MetricsRecord.from_dict(r) for r in d.get("test_history", [])],
            final=MetricsRecord.from_dict(d["final"]) if d.get("final") else None,
            wall_clock_s=float(d.get("wall_clock_s", 0.0)),
            neuron_stats=d.get("neuron_stats"),
            selection_smi=d.get("selection_smi"),
        )

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def experiment_config(self):
        return ExperimentConfig.from_dict(self.config)


def _nan_to_none(d):
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def build_model(config, seed):
    m = config.model
    rng = np.random.default_rng(derive_seed(seed, "init"))
    return build_mlp(m.widths, m.kind, rng=rng, gate=config.gate, dropout_p=m.dropout_p,
                     rank=m.rank, hidden=m.hidden)


def run_dir(config, seed):
    return os.path.join(config.output_dir, config.experiment, str(seed))


def train_one(config, seed, evaluate_only=False, datasets=None):
    """Train (or just evaluate) one model for one seed."""
    config.validate()
    t0 = time.perf_counter()
    train_ds, test_ds = datasets if datasets is not None else load_datasets(config.dataset, seed)
    if train_ds.dim != config.model.widths[0] or train_ds.num_classes != config.model.widths[-1]:
        raise ConfigError(
            f"model widths {config.model.widths} do not fit data of dim {train_ds.dim} "
            f"with {train_ds.num_classes} classes"
        )
    model = build_model(config, seed)
    opt = Adam(model.parameters(), config.optimizer.learning_rate, config.optimizer.beta1,
               config.optimizer.beta2, config.optimizer.epsilon)
    step_rng = np.random.default_rng(derive_seed(seed, "noise"))
    shuffle_seed = derive_seed(seed, "shuffle")
    result = RunResult(config=dict(config.to_dict(), seeds=[seed]), seed=seed)

    epochs = 0 if evaluate_only else config.epochs
    for epoch in range(epochs):
        for step, (xb, yb) in enumerate(batch_iterator(train_ds, config.batch_size, shuffle_seed, epoch)):
            with T.Tape():
                out = model.forward(xb, training=True, rng=step_rng, epoch=epoch)
                loss = T.softmax_cross_entropy(out.logits, yb)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} step {step}")
                loss.backward()
            opt.step()
            opt.zero_grad()
            result.loss_curve.append(value)
        done = epoch + 1
        if done % config.eval_every == 0 and done != epochs:
            _record(result, model, train_ds, test_ds, config, seed, done, final=False)
    final_out = _record(result, model, train_ds, test_ds, config, seed, epochs, final=True)
    result.final = result.test_history[-1]

    if config.smi and final_out.gated:
        trace = final_out.traces[0]
        features = final_out.selected_features()
        result.neuron_stats = {
            "frequency": activation_frequency(trace, config.anr_tau).tolist(),
            "mi": neuron_mutual_information(features, test_ds.labels, config.smi_bins).tolist(),
        }
        if config.gate.uses_topk:
            result.selection_smi = compare_selection_smi(
                final_out, test_ds.labels, _smi_config(config, seed),
                np.random.default_rng(derive_seed(seed, "random-selection")),
            )
    result.wall_clock_s = time.perf_counter() - t0
    if config.output_dir:
        write_run(result, model, config, seed)
    log.info("seed %s: test accuracy %.4f, anr %.3f", seed, result.final.accuracy, result.final.anr)
    return result, model


def _record(result, model, train_ds, test_ds, config, seed, epoch, final):
    if config.eval_train:
        rec, _ = evaluate(model, train_ds, config, seed, epoch)
        result.train_history.append(rec)
    rec, out = evaluate(model, test_ds, config, seed, epoch, with_smi=final and config.smi,
                        with_latency=final)
    result.test_history.append(rec)
    return out


def write_run(result, model, config, seed):
    d = run_dir(config, seed)
    cfg = config.replace(seeds=[seed])
    atomic_write_bytes(os.path.join(d, "config.json"), cfg.to_json().encode())
    atomic_write_bytes(os.path.join(d, "metrics.csv"), metrics_to_csv(result.test_history).encode())
    atomic_write_bytes(os.path.join(d, "result.json"), result.to_json().encode())
    save_tensors(os.path.join(d, "final.ckpt"), model.state_dict())
    return d


def train(config, evaluate_only=False):
    """One :class:`RunResult` per configured seed."""
    config.validate()
    return [train_one(config, seed, evaluate_only)[0] for seed in config.seeds]


def load_model(config, checkpoint_path, seed=0):
    model = build_model(config, seed)
    model.load_state_dict(load_tensors(checkpoint_path))
    return model


# ---------------------------------------------------------------- sweeps

SUMMARY_METRICS = ("accuracy", "macro_f1", "anr", "smi_nats", "ece", "brier",
                   "flops_dense", "flops_effective", "latency_ms")


def apply_variant(config, variant):
    """Config for a named variant.

    ``midl``/``learned``, ``random_topk``, ``gumbel``, ``f1_only``, ``f2_only``,
    ``fixed_alpha=<v>``, ``dense`` and ``dropout``.
    """
    gate, model = config.gate, config.model
    if variant in ("dense", "dropout"):
        model = dataclasses.replace(model, kind=variant)
    else:
        model = dataclasses.replace(model, kind="midl")
        if variant in ("midl", "learned"):
            gate = dataclasses.replace(gate, mode="learned")
        elif variant in ("random_topk", "gumbel"):
            gate = dataclasses.replace(gate, mode=variant)
        elif variant == "f1_only":
            gate = dataclasses.replace(gate, mode="fixed_alpha", fixed_alpha=1.0)
        elif variant == "f2_only":
            gate = dataclasses.replace(gate, mode="fixed_alpha", fixed_alpha=0.0)
        elif variant.startswith("fixed_alpha="):
            value = float(variant.split("=", 1)[1])
            gate = dataclasses.replace(gate, mode="fixed_alpha", fixed_alpha=value)
        else:
            raise ConfigError(f"unknown variant {variant!r}")
    return config.replace(model=model, gate=gate, experiment=f"{config.experiment}-{variant}")


def summarize(variant, results):
    row = {"variant": variant, "n_seeds": len(results)}
    for m in SUMMARY_METRICS:
        vals = np.array([getattr(r.final, m) for r in results], dtype=np.float64)
        row[f"{m}_mean"] = float(vals.mean())
        row[f"{m}_std"] = float(vals.std())
    return row


def sweep(config, variants):
    """Run every (variant, seed) pair and aggregate the final test metrics.

    Returns ``(rows, results)``: one summary row per variant, in the order
    given, and the per-variant lists of :class:`RunResult`.
    """
    if not variants:
        raise ConfigError("sweep needs at least one variant")
    rows, results = [], {}
    for variant in variants:
        cfg = apply_variant(config, variant)
        results[variant] = train(cfg)
        rows.append(summarize(variant, results[variant]))
    if config.output_dir:
        path = os.path.join(config.output_dir, config.experiment, "sweep.csv")
        atomic_write_bytes(path, sweep_to_csv(rows).encode())
    return rows, results


def sweep_to_csv(rows):
    buf = io.StringIO()
    cols = ["variant", "n_seeds"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
