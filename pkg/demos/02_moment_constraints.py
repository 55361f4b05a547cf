"""Why the differential branch subtracts the kernel mean.

A scaled convolution ``(1/h) sum_j K_j u(x - j h)`` only approximates a
derivative when ``sum_j K_j = 0``. Otherwise the ``u * sum K / h`` term
blows up as the grid is refined.
"""

# %%
import numpy as np

from dino.autodiff import Tensor
from dino.opdiff import ConstrainedKernel, central_difference_kernel, convergence_order_probe, first_moments

rng = np.random.default_rng(0)
raw = rng.standard_normal((1, 1, 3, 3))

kernels = {
    "central difference": ConstrainedKernel(Tensor(central_difference_kernel("x"))),
    "random, zero-mean": ConstrainedKernel(Tensor(raw)),
    "random, unconstrained": ConstrainedKernel(Tensor(raw), constraint="free"),
}

# %%
for name, k in kernels.items():
    order = convergence_order_probe(k, "sin")
    print(f"{name:24s} observed order {order:+.2f}  first moment {first_moments(k)[0, 0]}")

# %% [markdown]
# The zero-mean random kernel converges at first order to
# ``m_x d/dx + m_y d/dy`` (its first moments), not to ``d/dx`` itself, so its
# error against the x-derivative stays flat. The unconstrained one diverges
# like ``1/h``, which is the negative order.
