# %% [markdown]
# A short walk through the tensor core: build a graph, run backward,
# and compare against central differences.

# %%
import numpy as np

from hdmnet import tensor as T
from hdmnet.gradcheck import finite_diff_check, numerical_gradient
from hdmnet.tensor import Tensor

rng = np.random.default_rng(0)

# %% a two-layer map with a softmax on top
x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
w1 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w2 = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
target = Tensor(np.eye(2)[rng.integers(0, 2, size=5)])


def loss():
    h = T.relu(T.linear(x, w1))
    p = T.log_softmax(T.linear(h, w2), axis=1)
    return T.scale(T.sum(T.mul(p, target)), -1.0 / 5)


out = loss()
print("loss", out.item())
print("graph size", len(out.ancestors()))

# %% gradients land on the leaves
out.backward()
print("dL/dw2\n", w2.grad)

# %% the same numbers by central differences
fd = numerical_gradient(loss, w2)
print("max |analytic - numeric|", np.abs(fd - w2.grad).max())
print("max relative error over all leaves", finite_diff_check(loss, [x, w1, w2]))

# %% resize keeps constants exact and uses half-pixel centres
ramp = Tensor(np.array([[[0.0, 4.0]]]))
print("1x2 -> 1x4:", T.bilinear_resize(ramp, 1, 4).data[0, 0])

# %% a graph can only be consumed once
try:
    out.backward()
except T.GraphError as exc:
    print("second backward:", exc)
