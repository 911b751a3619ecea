"""How fast do least-squares estimates of prompt experts converge?

Regression data come from a softmax mixture with pre-trained experts, which
have quadratic gates, and prompt experts, which have linear gates. We fit the
prompt experts by least squares for growing n. The error is measured by the
Voronoi loss, which matches each fitted atom to its nearest true atom. On a
log-log plot it should fall with slope near -1/2.

This is a reduced grid with 4 seeds (under a minute). The full study is
`smope run configs/rate.ini`.

    python demos/04_estimation_rate.py
"""

from smope.theory import (RateConfig, fit_least_squares, rate_experiment, reference_problem,
                          sample_dataset, voronoi_loss)

G_star, pre = reference_problem(seed=0)
print("true prompt-expert weights:", G_star.weights.round(3))
data = sample_dataset(G_star, pre, n=2000, nu=0.1, seed=1)
fit = fit_least_squares(data, pre, G_star.W, n_atoms=2, restarts=8)
print(f"one fit at n=2000: squared loss {fit.loss:.5f}, Voronoi loss {voronoi_loss(fit.measure, G_star):.3f}")

result = rate_experiment(RateConfig(n_grid=(500, 2000, 8000), seeds=4, restarts=8))
for n, v in result.medians.items():
    print(f"n={n:>6}: median Voronoi loss {v:.3f}")
print(f"log-log slope {result.slope:.2f}")
