"""Separable 3-D network: shapes, parameter budget and gradient checks.

The separable block replaces 3x3x3 kernels with in-plane 1x3x3 kernels plus
one 3x1x1 kernel across slices.  Pooling is in-plane only, so thick-slice
volumes keep their depth.
"""
import numpy as np

from sepseg import tensor as T
from sepseg.sepnet import NetworkSpec, build_sepnet, param_count, unet_spec_for
from sepseg.tensor import grad_check

spec = NetworkSpec(num_classes=4, base_channels=8, num_scales=3)
model = build_sepnet(spec, seed=0)
x = np.random.default_rng(0).random((1, 1, 8, 32, 32)).astype(np.float32)
probs = model.predict_probs(x)
print("input", x.shape, "-> probabilities", probs.shape, "channel sums", probs.sum(axis=1).min())

print("\n n0  S   SepNet    UNet   ratio")
for n0 in (4, 8, 16):
    for s in (2, 3, 4):
        sp = NetworkSpec(num_classes=4, base_channels=n0, num_scales=s)
        a, b = param_count(sp), param_count(unet_spec_for(sp))
        print(f"{n0:3d} {s:2d} {a:8d} {b:8d}  {a / b:.3f}")

# Reverse-mode gradients of the whole toy network against central differences.
toy = build_sepnet(NetworkSpec(num_classes=3, base_channels=4, num_scales=2), dtype=np.float64, seed=1)
names = sorted(toy.params)
rng = np.random.default_rng(1)
xin = rng.random((1, 1, 2, 4, 4))
w = rng.normal(size=(1, 3, 2, 4, 4))


def scalar(x, *ps):
    toy.params = dict(zip(names, ps))
    return (T.softmax_channels(toy.logits(x)) * w).sum()


err = grad_check(scalar, [xin] + [toy.params[k].data.copy() for k in names], eps=1e-6, max_entries=8)
print(f"\nfull-network gradient check, max relative error {err:.2e}")
