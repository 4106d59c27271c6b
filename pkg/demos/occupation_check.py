# %% [markdown]
# # Occupation density on one path
#
# Integrating the mollified local time against a compact bump `phi` should recover
# the occupation integral `int_0^T <phi, mu_s> ds` as eps goes to 0.

# %%
from sdsm import testfunctions as tfm
from sdsm.localtime import occupation_consistency
from sdsm.model import reference_model
from sdsm.particles import SimulationConfig, simulate

model = reference_model()
phi = tfm.compact_bump(radius=5.0, name="bump")
cfg = SimulationConfig(T=0.5, dt=0.005, n=6, seed=3, branching="exact", engine="numba")
rec = simulate(cfg, model, [phi])
rep = occupation_consistency(rec, phi, [0.2, 0.1, 0.05])
print(f"occupation {rep.occupation:.5f}")
for e, g in zip(rep.eps, rep.gaps):
    print(f"eps={e:<5} gap={g:+.2e}")
print(f"monotone={rep.monotone}  rate={rep.rate:.2f}")
