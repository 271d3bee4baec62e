"""The four ways of forming bags, on a small dataset with a categorical column."""
import numpy as np

from llpcs import bagging as Bg
from llpcs.data import Dataset

rng = np.random.default_rng(0)
n = 24
ds = Dataset(rng.normal(size=(n, 2)), rng.uniform(size=n),
             categorical=rng.integers(0, 3, size=(n, 1)), categorical_names=("shop",), cardinalities=(3,))

for name, bags in [
    ("random k=5", Bg.random_bags(ds, 5, seed=0)),
    ("correlated on shop, k=4", Bg.correlated_bags(ds, "shop", 4, seed=0)),
    ("mixed SBB", Bg.mixed_bags(ds, sizes=(2, 4, 8), mode="SBB", seed=0)),
    ("two-stage k=3", Bg.two_stage_bags(ds, 3, seed=0)),
]:
    sizes = bags.sizes.tolist()
    print(f"{name:<26} {len(bags)} bags, sizes {sizes}, {len(bags.dropped)} rows dropped")
