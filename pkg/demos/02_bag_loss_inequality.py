"""Check the bag-versus-source loss inequality on random small networks.

For each trial we draw a shifted source/target pair, a random ReLU network
with its head rescaled into [0, 1], and compare

    bag_mse(target) - mse(source)   vs   xi * ||r_h|| + lambda' + R.

The slack (right minus left) should never be negative.
"""
from llpcs import bound_lab as B

report = B.check_lemma1(B.random_mlp_sampler(4), B.shifted_gaussian_sampler(4), trials=500, seed=1)
print(report.summary_line())
for name, q in report.slack_quantiles.items():
    print(f"  slack {name}: {q:.4f}")

# the concentration step: a bag loss far below the instance loss is rare
import numpy as np

rng = np.random.default_rng(0)
for k in (2, 4):
    residuals = 0.5 - rng.uniform(size=2 * 2000 * k)
    rep = B.check_theorem1_step(residuals, k, resamples=2000, seed=k)
    print(f"k={k}: Pr[bag <= mse/4k] = {rep.params['failure_rate']:.4f}, bound {rep.params['bound']:.4f}")
