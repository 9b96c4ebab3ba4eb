# coding: utf-8

# # Tensors, gradients and the dense contrastive loss
#
# A walk through the pieces everything else is built on: the autodiff
# tensor, the finite-difference gradient check, and the two contrastive
# objectives. Nothing here trains; it runs in a second or two.

import math

import numpy as np

from densevit import autodiff as ad
from densevit.autodiff import Tensor
from densevit.contrastive import (ContrastiveConfig, ProjectedFeatures, dense_loss, info_nce, negative_count,
                                  vanilla_loss)

rng = np.random.default_rng(0)


# ## Recording a graph
#
# Any op that touches a tensor with `requires_grad=True` records its parents.
# `backward` walks the tape in reverse and fills `.grad` on the leaves.

x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
y = (x * x).sum()
ad.backward(y)
print("d/dx sum(x^2) =", x.grad)


# ## Checking a gradient
#
# `grad_check` differentiates in float64 on both sides and reports the worst
# relative error. Here it checks a GELU-after-matmul chain.

w = rng.normal(size=(5, 3))
report = ad.grad_check(lambda t: ad.gelu(ad.matmul(t, w)).sum(), rng.normal(size=(2, 5)))
print(f"gelu(x @ W): max rel err {report.max_rel_err:.2e}, passed={report.passed}")


# ## InfoNCE in closed form
#
# When the anchor is equally similar to the positive and to each of K
# negatives the softmax is uniform, so the loss is ln(K + 1) at any
# temperature.

a = np.array([1.0, 0.0, 0.0])
for K in (1, 7, 63):
    print(f"K={K:>2}: loss {info_nce(a, a, np.tile(a, (K, 1)), 0.1).item():.6f}  ln(K+1) {math.log(K + 1):.6f}")


# ## Dense versus global
#
# The dense objective scores the global feature of one view against every
# patch of the other view. An image's negatives are the patches of all the
# other images, so the negative pool grows with the patch count.

for B in (2, 8, 32):
    print(f"batch {B:>2}, 16 patches: dense {negative_count('dense', B, 16):>4} negatives, "
          f"global {negative_count('vanilla', B, 16):>2}")


def unit(*shape):
    v = rng.normal(size=shape)
    return Tensor(v / np.linalg.norm(v, axis=-1, keepdims=True), dtype=np.float64)


fa = ProjectedFeatures(unit(4, 16), unit(4, 9, 16))
fb = ProjectedFeatures(unit(4, 16), unit(4, 9, 16))
print("random features: dense loss %.3f, global loss %.3f" % (
    dense_loss(fa, fb).item(), vanilla_loss(fa, fb, ContrastiveConfig(mode="vanilla")).item()))
