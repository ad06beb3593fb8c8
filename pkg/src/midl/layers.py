"""Dense, dropout-dense and MID-L layers, with their gating variants.

Weight conventions:

* fully connected layers store ``W`` as ``(d_out, d_in)`` and compute
  ``x @ W.T + b`` for a row batch ``x``;
* MID-L parameters are stored input-major (``f1_down`` is ``(d_in, r)``,
  ``w_alpha`` is ``(d_in, d_out)``, ...) so every map is ``x @ W``.

A MID-L block computes, per sample and per output neuron,

    z = a_hat * F1(x) + (1 - a_hat) * F2(x)

with ``F1`` a factored (low-rank) linear map, ``F2`` a two-layer ReLU MLP,
``alpha = sigmoid(x @ w_alpha)`` and ``a_hat = alpha * topk_mask(alpha)``.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

GATE_MODES = ("learned", "random_topk", "fixed_alpha", "gumbel")
STE_MODES = ("full", "masked")


class ConfigError(ValueError):
    """Invalid layer or gate configuration."""


class PreconditionError(ValueError):
    """Inputs violate the assumptions a checking routine relies on."""


# ---------------------------------------------------------------- gate configuration


@dataclass(frozen=True)
class LinearAnneal:
    """Move the kept fraction linearly from ``start_fraction`` to ``end_fraction``."""

    start_fraction: float
    end_fraction: float
    over_epochs: int

    def fraction(self, epoch):
        if self.over_epochs <= 0:
            return self.end_fraction
        t = min(max(epoch, 0) / self.over_epochs, 1.0)
        return self.start_fraction + (self.end_fraction - self.start_fraction) * t


@dataclass(frozen=True)
class GateConfig:
    """How a MID-L block turns its gate into a sparse interpolation weight.

    ``k`` is either an integer count of kept neurons or a float fraction of
    ``d_out`` (``k=1`` keeps one neuron, ``k=1.0`` keeps them all). When
    ``anneal`` is set it overrides ``k`` and the count depends on the epoch.
    """

    k: int | float = 0.5
    anneal: LinearAnneal | None = None
    mode: str = "learned"
    fixed_alpha: float = 0.5
    ste: str = "full"
    post_gate_dropout_p: float = 0.1
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ConfigError(f"unknown gate mode {self.mode!r}; expected one of {GATE_MODES}")
        if self.ste not in STE_MODES:
            raise ConfigError(f"unknown ste mode {self.ste!r}; expected one of {STE_MODES}")
        if not 0.0 <= self.post_gate_dropout_p < 1.0:
            raise ConfigError(f"post_gate_dropout_p must be in [0, 1), got {self.post_gate_dropout_p}")
        if not 0.0 <= self.fixed_alpha <= 1.0:
            raise ConfigError(f"fixed_alpha must be in [0, 1], got {self.fixed_alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if isinstance(self.k, bool) or not isinstance(self.k, (int, float)):
            raise ConfigError(f"k must be an int count or a float fraction, got {self.k!r}")
        if isinstance(self.k, float) and not 0.0 < self.k <= 1.0:
            raise ConfigError(f"fractional k must be in (0, 1], got {self.k}")
        if isinstance(self.k, int) and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    @property
    def uses_topk(self):
        return self.mode != "fixed_alpha"

    def resolve_k(self, d_out, epoch=None):
        """Number of neurons kept per sample at ``epoch``."""
        if self.anneal is not None:
            if epoch is None:
                raise ConfigError("annealed k schedule needs an epoch to resolve")
            k = max(1, round(self.anneal.fraction(epoch) * d_out))
        elif isinstance(self.k, float):
            k = max(1, round(self.k * d_out))
        else:
            k = self.k
        if not 1 <= k <= d_out:
            raise ConfigError(f"k={k} outside [1, {d_out}]")
        return int(k)


@dataclass
class GateTrace:
    """Gate values seen by one forward pass (before post-gate dropout)."""

    alpha: np.ndarray
    mask: np.ndarray
    alpha_hat: np.ndarray
    k: int


# ---------------------------------------------------------------- parameters


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MidlParams:
    f1_down: Tensor
    f1_up: Tensor
    f1_bias: Tensor
    f2_w1: Tensor
    f2_b1: Tensor
    f2_w2: Tensor
    f2_b2: Tensor
    w_alpha: Tensor

    NAMES = ("f1_down", "f1_up", "f1_bias", "f2_w1", "f2_b1", "f2_w2", "f2_b2", "w_alpha")

    def __post_init__(self):
        d_in, r = self.f1_down.shape
        d_out = self.f1_up.shape[1]
        h = self.f2_w1.shape[1]
        expected = {
            "f1_up": (r, d_out),
            "f1_bias": (d_out,),
            "f2_w1": (d_in, h),
            "f2_b1": (h,),
            "f2_w2": (h, d_out),
            "f2_b2": (d_out,),
            "w_alpha": (d_in, d_out),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape}")
        if r > min(d_in, d_out):
            raise DimensionError(f"rank {r} exceeds min(d_in, d_out) = {min(d_in, d_out)}")

    @classmethod
    def init(cls, d_in, d_out, rng, rank=None, hidden=None):
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases.

        ``rank`` defaults to ``ceil(min(d_in, d_out) / 2)``, ``hidden`` to ``d_out``.
        """
        r = rank if rank is not None else math.ceil(min(d_in, d_out) / 2)
        h = hidden if hidden is not None else d_out

        def w(fan_in, shape, name):
            return Tensor(uniform_init(rng, fan_in, shape), requires_grad=True, name=name)

        def z(n, name):
            return Tensor(np.zeros(n), requires_grad=True, name=name)

        return cls(
            f1_down=w(d_in, (d_in, r), "f1_down"),
            f1_up=w(r, (r, d_out), "f1_up"),
            f1_bias=z(d_out, "f1_bias"),
            f2_w1=w(d_in, (d_in, h), "f2_w1"),
            f2_b1=z(h, "f2_b1"),
            f2_w2=w(h, (h, d_out), "f2_w2"),
            f2_b2=z(d_out, "f2_b2"),
            w_alpha=w(d_in, (d_in, d_out), "w_alpha"),
        )

    @property
    def d_in(self):
        return self.f1_down.shape[0]

    @property
    def d_out(self):
        return self.f1_up.shape[1]

    @property
    def rank(self):
        return self.f1_down.shape[1]

    @property
    def hidden(self):
        return self.f2_w1.shape[1]

    def named_tensors(self):
        return {name: getattr(self, name) for name in self.NAMES}


# ---------------------------------------------------------------- baselines

_ACTIVATIONS = {
    "identity": lambda t: t,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
}


def _activation(name):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


def fc_forward(x, W, b=None, activation="identity"):
    """``phi(x @ W.T + b)`` with ``W`` of shape ``(d_out, d_in)``."""
    x, W = T.as_tensor(x), T.as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"fc_forward: input {x.shape} does not match weight {W.shape}")
    z = T.matmul(x, T.transpose(W))
    if b is not None:
        z = T.add(z, b)
    return _activation(activation)(z)


def dropout_fc_forward(x, W, b, p, training, rng=None, activation="identity"):
    """Fully connected layer whose *inputs* are dropped with probability ``p``.

    Inverted dropout: kept inputs are scaled by ``1/(1-p)`` during training so
    the eval-mode forward is the plain linear map.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = T.as_tensor(x)
    if training and p > 0.0:
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        x = T.mul(x, keep)
    return fc_forward(x, W, b, activation)


# ---------------------------------------------------------------- masks and gates


def topk_mask(alpha, k):
    """Binary mask keeping the ``k`` largest entries of each row.

    Ties are resolved in favour of the lower column index.
    """
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"topk_mask expects (batch, d), got {a.shape}")
    d = a.shape[1]
    if not 1 <= k <= d:
        raise ConfigError(f"k={k} outside [1, {d}]")
    mask = np.zeros(a.shape)
    if k == d:
        mask[:] = 1.0
        return mask
    # stable sort on the negated values keeps lower indices first among equals
    order = np.argsort(-a, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def random_topk_gate(batch, d, k, rng):
    """Uniformly random ``k``-subset mask per row."""
    if not 1 <= k <= d:
        raise ConfigError(f"k={k} outside [1, {d}]")
    mask = np.zeros((batch, d))
    if k == d:
        mask[:] = 1.0
        return mask
    order = np.argsort(rng.random((batch, d)), axis=1)[:, :k]
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def gumbel_gate(x, w_alpha, temperature=1.0, rng=None, noise=None):
    """Binary-concrete relaxation of the sigmoid gate.

    ``sigmoid((s + g1 - g2) / temperature)`` with ``s = x @ w_alpha`` and
    ``g1, g2`` independent standard Gumbel draws. With ``rng=None`` and no
    explicit ``noise`` the noiseless gate ``sigmoid(s / temperature)`` is
    returned, which is what evaluation uses.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    s = T.matmul(x, w_alpha)
    if noise is None and rng is not None:
        noise = rng.gumbel(size=s.shape) - rng.gumbel(size=s.shape)
    if noise is not None:
        s = T.add(s, np.asarray(noise, dtype=np.float64))
    if temperature != 1.0:
        s = T.mul(s, 1.0 / temperature)
    return T.sigmoid(s)


def sparsify_gate(alpha, mask, ste="full"):
    """``alpha * mask`` with a straight-through backward rule.

    ``ste="full"`` passes the upstream gradient to every gate entry as if the
    mask were all ones; ``ste="masked"`` only to the selected entries.
    """
    if ste not in STE_MODES:
        raise ConfigError(f"unknown ste mode {ste!r}")
    alpha = T.as_tensor(alpha)
    out = Tensor._wrap(alpha.data * mask)
    tape = T.active_tape()
    if tape is not None and alpha.requires_grad:
        if ste == "full":
            tape.record(out, (alpha,), lambda g: (g,))
        else:
            tape.record(out, (alpha,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------- MID-L


def f1_forward(x, params):
    """Lightweight path: ``(x @ f1_down) @ f1_up + f1_bias``."""
    return T.add(T.matmul(T.matmul(x, params.f1_down), params.f1_up), params.f1_bias)


def f2_forward(x, params):
    """Rich path: ``relu(x @ f2_w1 + f2_b1) @ f2_w2 + f2_b2``."""
    h = T.relu(T.add(T.matmul(x, params.f2_w1), params.f2_b1))
    return T.add(T.matmul(h, params.f2_w2), params.f2_b2)


def compute_gate(x, params, gate, k, training, rng):
    """Return ``(alpha_hat tensor, GateTrace)`` for one batch."""
    batch, d = x.shape[0], params.d_out
    if gate.mode == "fixed_alpha":
        alpha = np.full((batch, d), gate.fixed_alpha)
        mask = np.ones((batch, d))
        return T.as_tensor(alpha), GateTrace(alpha, mask, alpha.copy(), d)
    if gate.mode == "random_topk":
        if rng is None:
            raise ConfigError("random_topk gating needs an rng")
        mask = random_topk_gate(batch, d, k, rng)
        ones = np.ones((batch, d))
        return T.as_tensor(mask), GateTrace(ones, mask, mask.copy(), k)
    if gate.mode == "gumbel":
        alpha = gumbel_gate(x, params.w_alpha, gate.temperature, rng if training else None)
    else:
        alpha = T.sigmoid(T.matmul(x, params.w_alpha))
    mask = topk_mask(alpha, k)
    alpha_hat = sparsify_gate(alpha, mask, gate.ste)
    return alpha_hat, GateTrace(alpha.data.copy(), mask, alpha_hat.data.copy(), k)


def midl_forward(x, params, gate=None, training=False, rng=None, k=None, epoch=None):
    """One MID-L block.

    Parameters
    ----------
    x : Tensor or array, shape (batch, d_in)
    params : MidlParams
    gate : GateConfig
    training : bool
        Enables post-gate dropout and Gumbel noise.
    rng : numpy Generator, optional
        Needed for dropout, Gumbel noise and random Top-k masks.
    k, epoch : int, optional
        An explicit ``k`` wins; otherwise it is resolved from ``gate`` at
        ``epoch`` (required for annealed schedules).

    Returns
    -------
    z : Tensor, shape (batch, d_out)
    trace : GateTrace
    """
    gate = gate or GateConfig()
    x = T.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(f"midl_forward: input {x.shape} does not match d_in={params.d_in}")
    if k is None:
        k = gate.resolve_k(params.d_out, epoch)
    elif not 1 <= k <= params.d_out:
        raise ConfigError(f"k={k} outside [1, {params.d_out}]")

    alpha_hat, trace = compute_gate(x, params, gate, k, training, rng)
    if training and gate.post_gate_dropout_p > 0.0:
        if rng is None:
            raise ConfigError("post-gate dropout needs an rng in training mode")
        p = gate.post_gate_dropout_p
        alpha_hat = T.mul(alpha_hat, (rng.random(alpha_hat.shape) >= p) / (1.0 - p))

    f1 = f1_forward(x, params)
    f2 = f2_forward(x, params)
    z = T.add(T.mul(alpha_hat, f1), T.mul(T.sub(1.0, alpha_hat), f2))
    return z, trace


# ---------------------------------------------------------------- gradient check


def relative_error(a, b):
    """``max|a - b|`` relative to the larger of the two max-magnitudes."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def closed_form_gradients(x, params, trace, dz, ste="full"):
    """Gradients implied by the gate-weighted backward equations.

    Each path's output-side weight gets ``input^T @ (gate_weight * dz)``,
    i.e. ``diag(a_hat) dz x^T`` for F1 and ``diag(1 - a_hat) dz x^T`` for F2
    written for row batches; the gate projection gets
    ``x^T @ ((dz * (F1 - F2)) * sigmoid'(.))``, with the Top-k mask applied
    to that product only when ``ste="masked"``. Inner factors follow by the
    chain rule.
    """
    x = np.asarray(x, dtype=np.float64)
    alpha, alpha_hat = trace.alpha, trace.alpha_hat
    P = {k: v.data for k, v in params.named_tensors().items()}
    h1 = x @ P["f1_down"]
    f1 = h1 @ P["f1_up"] + P["f1_bias"]
    pre2 = x @ P["f2_w1"] + P["f2_b1"]
    h2 = np.maximum(pre2, 0.0)
    f2 = h2 @ P["f2_w2"] + P["f2_b2"]

    g1 = alpha_hat * dz
    g2 = (1.0 - alpha_hat) * dz
    # effective F1 weight W1 = f1_down @ f1_up; its gradient in row-batch form
    g_w1_eff = x.T @ g1
    g_alpha = dz * (f1 - f2)
    if ste == "masked":
        g_alpha = g_alpha * trace.mask
    g_h2 = (g2 @ P["f2_w2"].T) * (pre2 > 0)
    return {
        "f1_down": g_w1_eff @ P["f1_up"].T,
        "f1_up": P["f1_down"].T @ g_w1_eff,
        "f1_bias": g1.sum(axis=0),
        "f2_w1": x.T @ g_h2,
        "f2_b1": g_h2.sum(axis=0),
        "f2_w2": h2.T @ g2,
        "f2_b2": g2.sum(axis=0),
        "w_alpha": x.T @ (g_alpha * alpha * (1.0 - alpha)),
    }


def _frozen_output(x, P, alpha_mask, surrogate):
    h1 = x @ P["f1_down"]
    f1 = h1 @ P["f1_up"] + P["f1_bias"]
    f2 = np.maximum(x @ P["f2_w1"] + P["f2_b1"], 0.0) @ P["f2_w2"] + P["f2_b2"]
    alpha = T.stable_sigmoid(x @ P["w_alpha"])
    a = alpha if surrogate else alpha * alpha_mask
    return a * f1 + (1.0 - a) * f2


def midl_backward_check(params, x, k, ste="full", rng=None, eps=1e-5, min_gap=1e-3):
    """Compare autodiff gradients of one MID-L block against two oracles.

    The loss is the linear functional ``sum(R * z)`` with a fixed random
    ``R``, so ``dL/dz = R`` is the same at the true output and at the
    surrogate.

    (a) closed forms from :func:`closed_form_gradients`;
    (b) central finite differences of the output with the Top-k mask frozen.
        For ``w_alpha`` under ``ste="full"`` the differentiated function is the
        unmasked surrogate ``alpha*F1 + (1-alpha)*F2``.

    Returns a dict with per-parameter relative errors and their maxima.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    alpha = T.stable_sigmoid(x @ params.w_alpha.data)
    srt = np.sort(alpha, axis=1)[:, ::-1]
    if k < alpha.shape[1]:
        gap = (srt[:, k - 1] - srt[:, k]).min()
        if gap <= min_gap:
            raise PreconditionError(
                f"gate gap between k-th and (k+1)-th entries is {gap:.3g} <= {min_gap}"
            )
    R = rng.standard_normal((x.shape[0], params.d_out))

    for t in params.named_tensors().values():
        t.zero_grad()
    gate = GateConfig(k=k, mode="learned", ste=ste, post_gate_dropout_p=0.0)
    with T.Tape():
        z, trace = midl_forward(x, params, gate, training=False, k=k)
        loss = T.sum(T.mul(z, R))
        loss.backward()
    auto = {name: t.grad for name, t in params.named_tensors().items()}

    closed = closed_form_gradients(x, params, trace, R, ste)

    P = {name: t.data.copy() for name, t in params.named_tensors().items()}
    numeric = {}
    for name in MidlParams.NAMES:
        surrogate = name == "w_alpha" and ste == "full"
        base = P[name]
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = base[idx]
            base[idx] = old + eps
            up = float((_frozen_output(x, P, trace.mask, surrogate) * R).sum())
            base[idx] = old - eps
            dn = float((_frozen_output(x, P, trace.mask, surrogate) * R).sum())
            base[idx] = old
            g[idx] = (up - dn) / (2 * eps)
        numeric[name] = g

    vs_closed = {n: relative_error(auto[n], closed[n]) for n in MidlParams.NAMES}
    vs_numeric = {n: relative_error(auto[n], numeric[n]) for n in MidlParams.NAMES}
    return {
        "autodiff": auto,
        "closed_form": closed,
        "finite_difference": numeric,
        "error_closed_form": vs_closed,
        "error_finite_difference": vs_numeric,
        "max_error_closed_form": max(vs_closed.values()),
        "max_error_finite_difference": max(vs_numeric.values()),
        "trace": trace,
    }
