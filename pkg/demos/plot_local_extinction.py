"""
Local extinction and the sign of lambda_c
=========================================

The same outward OU model is locally extinct when the drift beats the
breeding rate (``lambda_c <= 0``) even though the total population grows.
"""

from spinebranch import make_outward_ou_constant
from spinebranch.stats import TestFunction, local_extinction_probe

ball = TestFunction.ball(1.0)
times = [2.0, 6.0, 10.0]

for mu in (2.0, 0.5):
    model = make_outward_ou_constant(sigma=1.0, mu=mu, b_const=1.0)
    probe = local_extinction_probe(model, ball, times, 500, seed=4)
    fr = ", ".join(f"t={t:g}: {f:.3f}" for t, f in zip(times, probe.fractions))
    print(f"lambda_c = {model.lambda_c:+.1f}   fraction with empty ball   {fr}")
