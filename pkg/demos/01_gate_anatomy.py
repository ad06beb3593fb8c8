"""A single MID-L block, taken apart.

Builds an 8 -> 8 block, runs one batch through it and prints what the gate
chose, how sparse the result is, what the block costs and whether autodiff
agrees with the closed-form and numerical gradients.

    python demos/01_gate_anatomy.py
"""
import numpy as np

from midl import GateConfig, MidlParams, midl_backward_check, midl_forward
from midl.metrics import active_neuron_ratio, flops_count
from midl.models import MIDLLayer

rng = np.random.default_rng(0)
params = MidlParams.init(8, 8, rng)
x = rng.uniform(-2, 2, (4, 8))

z, trace = midl_forward(x, params, GateConfig(k=4))
np.set_printoptions(precision=3, suppress=True)
print("gate alpha (one row per sample):")
print(trace.alpha)
print("Top-4 mask:")
print(trace.mask)
print("output z:")
print(z.data)
print(f"ANR at tau=0.01: {active_neuron_ratio(trace):.3f} (mask density {trace.k / 8:.3f})")

# Compute is reported analytically: F1 terms scale with ANR, F2 terms with 1 - ANR.
layer = MIDLLayer(8, 8, rng, GateConfig(k=4), activation="identity")
dense, effective = flops_count([layer], anr=0.5)
print(f"FLOPs per sample: dense {dense}, effective at ANR 0.5 {effective:.0f}")

# The gradient check needs gates that are not tied at the k-th position.
while True:
    a = np.sort(trace.alpha, axis=1)[:, ::-1]
    if (a[:, 3] - a[:, 4]).min() > 1e-3:
        break
    x = rng.uniform(-2, 2, (4, 8))
    _, trace = midl_forward(x, params, GateConfig(k=4))
report = midl_backward_check(params, x, 4)
print(f"max relative error vs closed forms: {report['max_error_closed_form']:.2e}")
print(f"max relative error vs finite differences: {report['max_error_finite_difference']:.2e}")
