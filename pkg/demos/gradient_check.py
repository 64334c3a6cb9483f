"""Analytic gradients vs central differences, from one unit to a full model.

First a single pool unit: every one of the 12 parameters is perturbed and
the finite-difference slope printed next to the hand-derived one. Then the
packaged three-suite check (unit, fixed pools, end-to-end model) runs at
its acceptance sizes.
"""

import numpy as np

from laf.cli import run_grad_check
from laf.units import LafParams, laf_backward, laf_forward

PARAM_NAMES = ("a", "b", "c", "d", "e", "f", "g", "h",
               "alpha", "beta", "gamma", "delta")

rng = np.random.default_rng(12)
xs = rng.uniform(0.05, 0.95, size=6)
p = LafParams(*rng.uniform(0.3, 1.6, size=8), *rng.normal(0.0, 1.0, size=4))

_, grads = laf_backward(xs, p)
h = 1e-6
print(f"{'param':<6} {'analytic':>14} {'central diff':>14} {'abs diff':>10}")
for i, name in enumerate(PARAM_NAMES):
    arr = p.as_array()
    arr[i] += h
    hi = laf_forward(xs, LafParams.from_array(arr))
    arr[i] -= 2 * h
    lo = laf_forward(xs, LafParams.from_array(arr))
    fd = (hi - lo) / (2 * h)
    print(f"{name:<6} {grads[i]:>14.8f} {fd:>14.8f} {abs(grads[i] - fd):>10.2e}")

print("\nfull suites (100 instances each):")
ok, report = run_grad_check(0, n_unit=100, n_pool=100, n_e2e=100)
print(report)
print("all ok" if ok else "FAILURES above")
