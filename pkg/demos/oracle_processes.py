"""Compare the closed-form GP and TP likelihoods with their latent constructions.

A Gaussian process is a linear model with Gaussian weights; a Student-t
process additionally draws a shared inverse-Gamma scale per function.  Both
finite marginals are checked here by Monte Carlo.

    python demos/oracle_processes.py
"""
import numpy as np

from ebp import oracles

t = np.linspace(-1.0, 1.0, 4)
kernel = oracles.KernelSpec("rff", noise=0.3, lengthscale=0.5)

gp = oracles.gp_latent_mc_check(t, kernel, samples=100_000, seed=0)
print(f"GP covariance gap (max abs): {gp.gap:.4f}")

for nu in (6.0, 8.0, 1e6):
    tp = oracles.tp_latent_mc_check(t, oracles.TPSpec(nu=nu, kernel=kernel), samples=200_000,
                                    seed=0)
    print(f"TP nu={nu:>9g}: covariance gap {tp.gap:.4f}, excess kurtosis "
          f"{tp.excess_kurtosis:.3f} (analytic {tp.analytic_kurtosis:.3f})")

# heavy tails: the TP penalizes a growing outlier far less than the GP
tp6 = oracles.TPSpec(6.0, kernel=kernel)
for v in (0.0, 3.0, 6.0, 10.0):
    x = np.array([0.1, -0.2, 0.0, v])
    print(f"last value {v:>4}: log p GP {oracles.gp_logpdf(x, t, kernel):8.3f}, "
          f"TP(nu=6) {oracles.tp_logpdf(x, t, tp6):8.3f}")
