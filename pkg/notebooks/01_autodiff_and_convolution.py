# %% [markdown]
# # The tape-based autodiff core
#
# Every op on a `Tensor` inside a `Graph` context is recorded; `backward`
# replays the tape in reverse. Here we check a convolution gradient against
# central differences and fit a tiny conv layer.

# %%
import numpy as np

from seqseg import tensor as tc
from seqseg.tensor import Graph, Tensor

rng = np.random.default_rng(0)

# %%
# a 3x3 all-ones kernel over an all-ones 3x3 image: 9 in the centre, 4 at corners
x = Tensor(np.ones((1, 1, 3, 3)))
k = Tensor(np.ones((1, 1, 3, 3)))
print(tc.conv2d(x, k).data[0, 0])

# %%
# gradient check in float64
x = Tensor(rng.normal(size=(1, 2, 6, 6)), dtype=np.float64)
kern = Tensor(rng.normal(size=(3, 2, 3, 3)), dtype=np.float64)
r = rng.normal(size=(1, 3, 6, 6))
err = tc.finite_difference_check(lambda t: tc.tensor_sum(tc.mul(tc.conv2d(t, kern), Tensor(r))), x, 1e-6)
print(f"max relative error {err:.2e}")

# %%
# learn an edge filter from examples with Adam
target_k = np.array([[[[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]]], dtype=np.float32)
imgs = rng.uniform(size=(8, 1, 12, 12)).astype(np.float32)
targets = tc.conv2d(Tensor(imgs), Tensor(target_k)).data

w = Tensor(rng.normal(scale=0.1, size=(1, 1, 3, 3)), requires_grad=True)
state = tc.AdamState.fresh([w])
for it in range(300):
    w.zero_grad()
    with Graph() as g:
        diff = tc.sub(tc.conv2d(Tensor(imgs), w), Tensor(targets))
        loss = tc.scale(tc.tensor_sum(tc.mul(diff, diff)), 1.0 / diff.size)
    tc.backward(loss, g)
    tc.adam_step([w], state, 0.05)
    if it % 100 == 0:
        print(it, loss.item())

print(np.round(w.data[0, 0], 2))
