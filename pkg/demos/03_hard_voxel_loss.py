"""The hard-voxel weighting inside the exponential-logarithmic loss.

Each predicted probability is multiplied by exp((p - g) / alpha) before the
Dice term.  Confident correct voxels are left alone; uncertain foreground is
pushed down and false-positive mass is pushed up, so the loss keeps paying
attention to them.
"""
import numpy as np

from sepseg import loss as L
from sepseg.loss import LossConfig

print("  p    g   w(a=0.5)   p*w")
for p, g in [(1.0, 1), (0.9, 1), (0.5, 1), (0.1, 1), (0.1, 0), (0.5, 0)]:
    print(f"{p:4.1f}  {g:2d}   {L.ath_weight(p, g, 0.5):7.4f}  {L.ath_apply(p, g, 0.5):6.4f}")

# A two-class toy prediction: the foreground column is confidently right in
# most voxels but wrong in a few.
g1 = np.array([1, 1, 1, 1, 0, 0, 0, 0], float)
p1 = np.array([0.95, 0.9, 0.6, 0.3, 0.05, 0.1, 0.4, 0.1])
p = np.stack([1 - p1, p1])[None]
g = np.stack([1 - g1, g1])[None]
print("\nloss          value")
for name, fn, cfg in [("dice", L.dice_loss, LossConfig()), ("l_exp", L.l_exp, LossConfig()),
                      ("ath a=1.0", L.ath_l_exp, LossConfig(alpha=1.0)),
                      ("ath a=0.5", L.ath_l_exp, LossConfig(alpha=0.5))]:
    print(f"{name:10s}  {float(fn(p, g, cfg)):.4f}")

# Closed-form gradient of the Dice term; its magnitude at a correct voxel
# shrinks as the class overlap improves.
grad = L.grad_l_dsc(p, g)
print("\ndL/dp for foreground channel:", np.round(grad[0, 1], 4))

# Rare classes get larger cross-entropy weights: ((sum f) / f_c) ** 0.5
print("class weights for frequencies (0.97, 0.02, 0.01):", np.round(L.class_weights([0.97, 0.02, 0.01]), 3))
