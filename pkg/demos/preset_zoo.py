"""Every named preset evaluated on one small set, plus the max/min limit.

The learnable pool starts life able to express the classics exactly; this
prints each preset row next to the value numpy computes directly, then
shows the soft max tightening as the limit order r grows.
"""

import numpy as np

from laf.units import Preset, format_unit, laf_forward, preset_params

xs = np.array([0.12, 0.47, 0.58, 0.71, 0.93])

rows = [
    ("constant 2.5", Preset("constant", kappa=2.5), 2.5),
    ("sum", Preset("sum"), xs.sum()),
    ("count", Preset("nonzero_count"), float(len(xs))),
    ("mean", Preset("mean"), xs.mean()),
    ("2nd moment", Preset("kth_moment", k=2), (xs ** 2).mean()),
    ("mean squared", Preset("lth_power_kth_moment", l=2, k=1), xs.mean() ** 2),
    ("max (r=40)", Preset("max", r=40), xs.max()),
    ("min (r=40)", Preset("min", r=40), xs.min()),
    ("max/min (r=s=40)", Preset("max_over_min", r=40, s=40), xs.max() / xs.min()),
]

print(f"set: {xs.tolist()}\n")
print(f"{'preset':<18} {'pool output':>12} {'direct':>12}")
for name, preset, want in rows:
    got = laf_forward(xs, preset_params(preset))
    print(f"{name:<18} {got:>12.6f} {want:>12.6f}")

print("\nsoft max sharpening (true max = %.2f):" % xs.max())
for r in (5, 10, 20, 40, 80, 160):
    est = laf_forward(xs, preset_params(Preset("max", r=r)))
    print(f"  r={r:<4d} estimate={est:.6f}  err={est - xs.max():.2e}")

print("\nthe sum preset, written out:")
print(" ", format_unit(preset_params(Preset("sum"))))
