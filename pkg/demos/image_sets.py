"""Digit-image sets end to end: IDX files -> encoder -> pool -> regressor.

Builds (or finds) the four IDX files, swaps each digit of a scalar dataset
for an image of that digit, and trains the image-set model for two epochs on
target=count. Counting needs no digit recognition, so even this tiny budget
produces predictions that track set size; regressing sums of digit values
takes a real training run (the acceptance suite's smoke check times one).
"""

import numpy as np

from laf import datasets, harness
from laf.harness import ExperimentConfig

train_split, test_split = datasets.ensure_mnist()
print(f"parsed {train_split[0].shape[0]} train / {test_split[0].shape[0]} test "
      f"images of {train_split[0].shape[1]} pixels")

cfg = ExperimentConfig(model="laf", task="mnist", target="count", epochs=2,
                       batch_size=64, lr=3e-3, seed=0,
                       train_size=4000, val_size=300, test_size=100)
tk = cfg.kind()
scalar_train = datasets.gen_scalar_train(tk, cfg.train_size, 10, cfg.seed)
scalar_val = list(datasets.gen_scalar_test(tk, cfg.val_size, 10, cfg.seed + 1))
train = datasets.mnist_setify(scalar_train, train_split, cfg.seed, "train")
val = datasets.mnist_setify(scalar_val, train_split, cfg.seed + 1, "train")
sizes = [len(s.digits) for s in train]
print(f"built {len(train)} training sets, {min(sizes)}-{max(sizes)} images each")

model = harness.build_mnist_model("laf", np.random.default_rng([cfg.seed, 808]), cfg.units)
print(f"model: {harness.count_params(model)} parameters, "
      f"{model.n_units} pool units\n")
record = harness.train(model, train, val, cfg)
for ep, (tl, vl) in enumerate(zip(record.train_losses, record.val_losses)):
    print(f"epoch {ep}: train MAE {tl:.3f}, val MAE {vl:.3f}")

show = sorted(range(len(val)), key=lambda i: len(val[i].digits))[::50][:6]
picked = [val[i] for i in show]
values, offsets, labels = harness.flatten_samples(picked, "mnist")
preds = harness.predict(model, values, offsets)
print("\nvalidation sets of growing size (true count -> prediction):")
for i, s in enumerate(picked):
    print(f"  {s.digits.tolist()} : {labels[i]:.0f} -> {preds[i]:.2f}")
