"""Layer objects and the MLP container used by the experiment harness."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    ConfigError,
    GateConfig,
    GateTrace,
    MidlParams,
    dropout_fc_forward,
    fc_forward,
    midl_forward,
    uniform_init,
)
from .tensor import Tensor

MODEL_KINDS = ("midl", "dense", "dropout")


class Dense:
    """Fully connected layer, ``W`` of shape ``(d_out, d_in)``."""

    def __init__(self, d_in, d_out, rng, activation="identity"):
        self.d_in, self.d_out = d_in, d_out
        self.activation = activation
        self.W = Tensor(uniform_init(rng, d_in, (d_out, d_in)), requires_grad=True, name="W")
        self.b = Tensor(np.zeros(d_out), requires_grad=True, name="b")

    def forward(self, x, training=False, rng=None, epoch=None):
        return fc_forward(x, self.W, self.b, self.activation), None

    def parameters(self):
        return {"W": self.W, "b": self.b}

    def flop_terms(self):
        terms = [("dense", 2 * self.d_in * self.d_out), ("dense", self.d_out)]
        if self.activation != "identity":
            terms.append(("dense", self.d_out))
        return terms


class DropoutDense(Dense):
    """Dense layer with inverted dropout on its inputs during training."""

    def __init__(self, d_in, d_out, rng, p=0.5, activation="identity"):
        super().__init__(d_in, d_out, rng, activation)
        self.p = p

    def forward(self, x, training=False, rng=None, epoch=None):
        out = dropout_fc_forward(x, self.W, self.b, self.p, training, rng, self.activation)
        return out, None


class MIDLLayer:
    """MID-L block followed by an optional activation."""

    def __init__(self, d_in, d_out, rng, gate=None, activation="relu", rank=None, hidden=None):
        self.d_in, self.d_out = d_in, d_out
        self.gate = gate or GateConfig()
        self.activation = activation
        self.params = MidlParams.init(d_in, d_out, rng, rank=rank, hidden=hidden)

    def forward(self, x, training=False, rng=None, epoch=None):
        z, trace = midl_forward(x, self.params, self.gate, training, rng, epoch=epoch)
        if self.activation == "relu":
            z = T.relu(z)
        elif self.activation != "identity":
            raise ConfigError(f"unknown activation {self.activation!r}")
        return z, trace

    def parameters(self):
        return self.params.named_tensors()

    def flop_terms(self):
        p = self.params
        d_in, r, h, d_out = p.d_in, p.rank, p.hidden, p.d_out
        terms = [
            ("f1", 2 * d_in * r),
            ("f1", 2 * r * d_out),
            ("f1", d_out),
            ("f2", 2 * d_in * h),
            ("f2", h),
            ("f2", h),
            ("f2", 2 * h * d_out),
            ("f2", d_out),
            ("gate", 2 * d_in * d_out),
            ("gate", d_out),
        ]
        if self.activation != "identity":
            terms.append(("dense", d_out))
        return terms


@dataclass
class ForwardResult:
    logits: Tensor
    traces: list = field(default_factory=list)
    activations: list = field(default_factory=list)


class Model:
    """A stack of layers; hidden activations and gate traces are kept per call."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None, epoch=None):
        h = T.as_tensor(x)
        traces, acts = [], []
        for layer in self.layers:
            h, trace = layer.forward(h, training=training, rng=rng, epoch=epoch)
            traces.append(trace)
            acts.append(h)
        return ForwardResult(h, traces, acts)

    def __call__(self, x, **kw):
        return self.forward(x, **kw).logits

    def predict_proba(self, x, rng=None, epoch=None):
        return T.softmax(self.forward(x, training=False, rng=rng, epoch=epoch).logits.data)

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters().items():
                out[f"layer{i}.{name}"] = t
        return out

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            t.data = state[name]

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None

    @property
    def gated_layers(self):
        return [layer for layer in self.layers if isinstance(layer, MIDLLayer)]


def build_mlp(widths, kind="midl", rng=None, gate=None, dropout_p=0.5, rank=None, hidden=None):
    """MLP with ReLU hidden layers and a linear head.

    ``kind="midl"`` makes every hidden layer a MID-L block, ``"dense"`` a plain
    fully connected layer, and ``"dropout"`` inserts inverted dropout (``p``)
    on the input of every layer after the first.
    """
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if len(widths) < 2:
        raise ConfigError(f"need at least input and output widths, got {widths}")
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = []
    pairs = list(zip(widths[:-1], widths[1:]))
    for i, (d_in, d_out) in enumerate(pairs):
        last = i == len(pairs) - 1
        act = "identity" if last else "relu"
        if kind == "midl" and not last:
            layers.append(MIDLLayer(d_in, d_out, rng, gate=gate, activation=act, rank=rank, hidden=hidden))
        elif kind == "dropout" and i > 0:
            layers.append(DropoutDense(d_in, d_out, rng, p=dropout_p, activation=act))
        else:
            layers.append(Dense(d_in, d_out, rng, activation=act))
    return Model(layers)


def traces_of(result):
    return [t for t in result.traces if isinstance(t, GateTrace)]
