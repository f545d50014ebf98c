"""Almost-sure growth rate and fluctuations of log u for the PAM.

The spatial mean of t^-1 log u(t) converges to mu - 2 gamma2(sigma) with
gamma2(sigma) = (sigma^2 / 8)(1 + sigma^2 / 12); the profile of log u stays
flat while its level fluctuates on the sqrt(t) scale.

Run: python3 demos/03_lyapunov_clt.py   (about 1 min)
"""

from pamlab import Grid, SolverConfig, linear
from pamlab.stats import clt_diagnostics, gamma2, lln_limit, lyapunov_estimate, simulate_ensemble

mu, sigma = 0.0, 1.0
ens = simulate_ensemble(Grid(64), 1.0, linear(mu, sigma), SolverConfig(dt=5e-4), 40.0, 100,
                        seed=5, record_every=1.0)
est = lyapunov_estimate(ens, (20.0, 40.0))
print(f"gamma2(1) = {gamma2(sigma):.6f}")
print(f"lambda_hat = {est.lambda_hat:.4f} +- {est.stderr:.4f}  (slope fit {est.slope:.4f})")
print(f"continuum limit mu - 2 gamma2 = {lln_limit(mu, sigma):.4f}")
for t in (10.0, 20.0, 40.0):
    r = clt_diagnostics(ens, t, mu, sigma)
    print(f"t={t:4}: flatness {r.spatial_flatness:.3f}  skew {r.skewness:+.3f}  "
          f"excess kurtosis {r.excess_kurtosis:+.3f}  var {r.variance:.3f}")
