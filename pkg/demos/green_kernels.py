# %% [markdown]
# # Resolvent kernels and the chi constant
#
# `Q^lam` is the Laplace transform of the heat kernel.  In d = 1 it is
# `exp(-r sqrt(2 lam / sigma2)) / sqrt(2 lam sigma2)`; in d = 2 it is a Bessel K0.
# The mollified version `Q^lam_eps` is finite at the origin in every dimension.

# %%
import numpy as np

from sdsm import green

r = np.array([0.05, 0.5, 1.0, 2.0])
for d in (1, 2, 3):
    spec = green.KernelSpec(lam=1.0, d=d)
    mol = green.KernelSpec(lam=1.0, eps=0.1, d=d)
    pts = np.stack([r] + [np.zeros_like(r)] * (d - 1), axis=1)
    print(f"d={d}  Q={np.round(green.q_lambda(spec, pts), 4)}  Q_eps={np.round(green.q_lambda_eps(mol, pts), 4)}")

# %%
spec = green.KernelSpec(lam=1.0, eps=0.1, d=1)
print("max resolvent residual:", green.resolvent_identity_residual(spec, np.linspace(-3, 3, 13)))

# %% [markdown]
# chi is finite for d <= 3 and below its closed-form bound; d = 4 diverges.

# %%
for d in (1, 2, 3, 4):
    rep = green.chi_bound_check(d, 1.0, 1.0)
    print(f"d={d}  chi={rep.value:.3f}  bound={rep.bound:.3f}  divergent={rep.divergent}")
