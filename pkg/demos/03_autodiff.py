# %% [markdown]
# Reverse-mode differentiation
#
# Tensors record the operations applied to them. `backward` walks that record
# in reverse and accumulates gradients. `gradient_check` compares the result
# with central differences.

# %%
import numpy as np

import strokecomp.autodiff as ad
from strokecomp.autodiff import Tensor
from strokecomp.model import Variant, tiny_gradient_check

w = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
loss = ad.tsum(w * w)
ad.backward(loss)
print("d/dw sum(w*w) =\n", w.grad)

# %%
# A small composite: softmax cross-entropy over a tanh layer.
rng = np.random.default_rng(0)
x = rng.normal(size=(5, 3))
W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
y = np.array([0, 1, 2, 3, 1])
err = ad.gradient_check(lambda: ad.cross_entropy(ad.tanh(ad.linear(x, W, b)), y), [W, b])
print(f"relative error {err:.1e}")

# %%
# Every parameter of each model variant on a tiny instance.
for v in Variant:
    print(f"{v.display_name:<13} {tiny_gradient_check(v):.2e}")
