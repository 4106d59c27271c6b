# %% [markdown]
# # Tanaka decomposition of the mollified local time
#
# `Lambda^{x,eps}_T` is the time integral of `<q_eps(x - .), mu_s>`.  With
# `psi = Q^lam_eps(x - .)` registered as an observable, the engine accumulates the
# martingale terms along the path, and the local time splits into boundary terms, a
# `lam` drift, the common-noise integral `X`, the branching martingale `M` and the
# vanishing individual-noise term `U`.

# %%
from sdsm import testfunctions as tfm
from sdsm.localtime import tanaka_rhs, tanaka_residual
from sdsm.model import reference_model
from sdsm.particles import SimulationConfig, simulate

model = reference_model()
s2 = model.effective_sigma2()
eps, lam = 0.05, 1.0
psi = tfm.resolvent_kernel([0.0], lam, eps, s2, name="psi")
q = tfm.mollifier([0.0], eps, s2, name="q")

# %%
for dt in (1e-3, 5e-4, 2.5e-4):
    cfg = SimulationConfig(T=0.5, dt=dt, n=6, seed=11, snapshot_stride=0, engine="numba")
    rec = simulate(cfg, model, [psi, q])
    est = tanaka_rhs(rec, 0.0, eps, lam)
    print(f"dt={dt:.1e}  Lambda={est.value:.4f}  X={est.common_integral:+.4f}  "
          f"M={est.branching_integral:+.4f}  U={est.individual_integral:+.4f}  "
          f"residual={est.residual:.2e}  without M={tanaka_residual(rec, 0.0, eps, lam, drop=('M',)):.2e}")

# %% [markdown]
# The residual shrinks like `sqrt(dt)` (one path is noisy; the acceptance suite fits
# the slope over hundreds of replicates).  Dropping `M` leaves an O(1) gap.
