"""
The additive martingale and its spine
=====================================

An inward Ornstein-Uhlenbeck branching diffusion with quadratic breeding
grows at rate ``lambda_c``.  Rescaling ``<phi, X_t>`` by that rate gives a
mean-``phi(x)`` martingale.  Under the size-biased law the population is one
spine particle plus ordinary subtrees.
"""

import numpy as np

from spinebranch import SimConfig, make_inward_ou_quadratic, run_replicates
from spinebranch.spine import realization_from_run, run_tilted, spine_conditional_expectation
from spinebranch.stats import mean_and_se, w_series

model = make_inward_ou_quadratic(sigma=1.0, mu=2.0, b_quad=1.0, beta0=0.5)
print(f"lambda_c = {model.lambda_c:.5f}, phi(0) = {float(model.phi([[0.0]])[0]):.5f}")

###############################################################################
# Simulate 2000 replicates to t = 2 and watch the mean of W_t.

cfg = SimConfig(dt=1e-3, t_end=2.0, snapshot_delta=0.5, seed=1)
run = run_replicates(model, 0.0, cfg, 2000)
series = w_series(run)
for t in series.times:
    m, se = mean_and_se(series.column(t))
    print(f"t = {t:4.1f}   mean W_t = {m:.4f} +- {se:.4f}")

###############################################################################
# The spread of W_t does not collapse: the limit is random.

w_end = series.column(series.times[-1])
print("quartiles of W_2:", np.round(np.quantile(w_end, [0.25, 0.5, 0.75]), 3))

###############################################################################
# A few tilted draws.  Given the spine path and its fission times, the mean of
# W_t is the decayed phi of the spine plus one term per fission.

tilted = run_tilted(model, 0.0, SimConfig(dt=1e-3, t_end=1.0, seed=2), 5, record_spine=True)
for r in range(5):
    real = realization_from_run(tilted, r)
    cond = spine_conditional_expectation(real, model, 1.0)
    print(f"spine {r}: {len(real.fission_times)} fissions, Y_1 = {real.spine.positions[-1, 0]:+.3f}, "
          f"E[W_1 | spine] = {cond:.3f}")

print(f"phi(0) for comparison: {float(model.phi([[0.0]])[0]):.3f}")
