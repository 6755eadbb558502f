"""Build a tiny graph by hand, differentiate it, and compare against finite differences."""

# %%
import numpy as np

from padl.autodiff import Tensor
from padl.autodiff.gradcheck import check_gradients
from padl.autodiff.nn import binary_cross_entropy, conv2d, sigmoid
from padl.checks import model_gradcheck

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 1, 6, 6)))
w = Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.3, requires_grad=True, name="w")
target = (rng.random((2, 3, 6, 6)) > 0.5).astype(float)

# %% A convolution followed by a sigmoid and a cross-entropy.
def closure():
    return binary_cross_entropy(target, sigmoid(conv2d(x, w, padding=1)))

loss = closure()
loss.backward()
print("loss", float(loss.data), "| grad norm", np.linalg.norm(w.grad))

# %% The closure is re-evaluated with perturbed weights; each element's relative error is reported.
report = check_gradients(closure, {"w": w})
print("max relative error", report.max_error, "passed", report.passed)

# %% Same check on the whole network with frozen sampling noise (takes about a minute).
full = model_gradcheck(seed=0)
print("full model:", full.max_error, "over", sum(full.checked.values()), "weights")
for name, err in full.worst(3):
    print(f"  {name:40s} {err:.2e}")
