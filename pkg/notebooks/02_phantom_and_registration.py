# %% [markdown]
# # Phantom sequences and B-spline registration
#
# A phantom is a cyclic sequence of two pulsating vessel cross-sections plus a
# bright distractor. We register neighbouring frames and look at how much of
# the intensity difference the deformation explains.

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from seqseg.phantom import PhantomConfig, generate
from seqseg.registration import RegConfig, register_pair, warp_image

out = Path("figures")
out.mkdir(exist_ok=True)

sample = generate(PhantomConfig(seed=1))
print("frames", sample.images.shape, "ED", sample.ed, "ES", sample.es)

# %%
fig, axes = plt.subplots(1, 3, figsize=(9, 3))
for ax, t in zip(axes, (sample.ed, 5, sample.es)):
    ax.imshow(sample.images[t], cmap="gray")
    ax.contour(sample.labels[t], levels=[0.5, 1.5], colors=["r", "y"], linewidths=0.8)
    ax.set_title(f"frame {t}")
    ax.axis("off")
fig.savefig(out / "phantom_frames.png", dpi=100)

# %%
# register frame 6 (moving) onto frame 5 (fixed), noise-free copy for a clean ratio
clean = generate(PhantomConfig(seed=1, noise_sigma=0.0))
res = register_pair(clean.images[5], clean.images[6], RegConfig())
print(f"SSD {res.ssd_initial:.3f} -> {res.ssd_final:.3f} (ratio {res.ssd_ratio:.3f})")

# with noise most of the residual is the noise itself
noisy = register_pair(sample.images[5], sample.images[6])
print(f"noisy frames: ratio {noisy.ssd_ratio:.3f}")

# %%
mag = np.linalg.norm(res.field, axis=-1)
fig, axes = plt.subplots(1, 3, figsize=(9, 3))
axes[0].imshow(clean.images[6] - clean.images[5], cmap="bwr", vmin=-0.3, vmax=0.3)
axes[0].set_title("before")
axes[1].imshow(warp_image(clean.images[6], res.field) - clean.images[5], cmap="bwr", vmin=-0.3, vmax=0.3)
axes[1].set_title("after")
axes[2].imshow(mag)
axes[2].set_title("|d| (px)")
for ax in axes:
    ax.axis("off")
fig.savefig(out / "registration.png", dpi=100)
