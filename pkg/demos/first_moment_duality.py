# %% [markdown]
# # First moment three ways
#
# For the reference model the mean of `<phi, mu_t>` solves the heat equation with
# diffusion `sigma2 = 2`, so for a unit point mass at 0 and a Gaussian `phi` of width
# `w` the answer is `w / sqrt(w^2 + 2t)`.  We compare that with a particle ensemble
# and with the dual (coalescing) process at m = 1.

# %%
import math

from sdsm import testfunctions as tfm
from sdsm.dual import dual_moment
from sdsm.model import reference_model
from sdsm.particles import Mu0, SimulationConfig, mean_and_se, run_ensemble
from sdsm.rng import Stream

model = reference_model()
phi = tfm.gaussian_bump(width=1.0, name="phi")
t = 0.5
exact = 1.0 / math.sqrt(1.0 + model.effective_sigma2() * t)
print(f"heat semigroup: {exact:.4f}")

# %%
cfg = SimulationConfig(T=t, dt=0.01, n=8, seed=1, branching="exact", engine="numba")
ens = run_ensemble(cfg, model, [phi], reps=400)
mean, se = mean_and_se(ens.column("final", phi))
print(f"particles:      {mean:.4f} +/- {se:.4f}")

# %%
est = dual_moment(phi, 1, Mu0(), t, model, 4000, Stream(2))
print(f"dual m=1:       {est.estimate:.4f} +/- {est.se:.4f}")
