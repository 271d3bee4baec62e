"""Monte Carlo checks of the bag-versus-instance loss inequalities.

Three validators:

* :func:`check_lemma1` evaluates both sides of
  ``bag_mse(B) - mse(S) <= xi(S, B) * ||r_h|| + lambda' + R`` on random
  small networks and random aligned samples.
* :func:`check_theorem1_step` estimates, for a fixed predictor and a fixed
  ``2mk`` sample, how often two-stage bagging produces a bag loss below
  ``mse / (4k)`` and compares it with ``2 exp(-mse * m / (32 k^2))``.
* :func:`appendix_c_experiment` measures the bag and instance loss of the
  constant predictor ``1/2`` on uniform labels.

Theory mode works in ``[0, 1]``: labels must lie there and predictions are
clipped to it. To keep ``h = r_h . phi`` exact under the clip, sampled
networks have their head affinely rescaled so the raw outputs on the trial
data already fall inside ``[0, 1]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from .bagging import two_stage_selection
from .model import ArchConfig, Model


class TheoryModeError(ValueError):
    pass


@dataclass
class BoundReport:
    kind: str
    trials: int
    violations: int
    slack_quantiles: dict
    params: dict = field(default_factory=dict)
    skipped: int = 0
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.violations <= self.trials:
            raise ValueError("violation count must lie in [0, trials]")

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.kind}: {status} trials: {self.trials} violations: {self.violations}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _quantiles(slack) -> dict:
    slack = np.asarray(slack, dtype=np.float64)
    if slack.size == 0:
        return {}
    qs = (0.0, 0.01, 0.5, 0.99, 1.0)
    return {f"q{int(q * 100):02d}": float(np.quantile(slack, q)) for q in qs}


def _check_unit(labels, what):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size and (labels.min() < 0.0 or labels.max() > 1.0):
        raise TheoryModeError(f"{what} labels must lie in [0, 1] in theory mode")
    return labels


# --------------------------------------------------------------------------
# Lemma 1


def fit_head_to_unit(model: Model, features: np.ndarray, margin: float = 0.02) -> Model:
    """Affinely rescale the output head so predictions on ``features`` lie in ``[margin, 1-margin]``.

    The result is still an MLP of the same shape, so the linear-head identity
    is untouched and clipping to ``[0, 1]`` becomes a no-op on these rows.
    """
    raw = model.predict(features)
    lo, hi = float(raw.min()), float(raw.max())
    span = hi - lo
    scale = (1.0 - 2.0 * margin) / span if span > 0 else 1.0
    model.head_w.value = model.head_w.value * scale
    model.head_b.value = np.asarray((model.head_b.value - lo) * scale + margin)
    return model


def lemma1_sides(model: Model, source_x, source_y, target_x, target_y, k: int) -> tuple[float, float]:
    """Return ``(lhs, rhs)`` for one sample; bags are consecutive ``k``-blocks of the target."""
    source_y = _check_unit(source_y, "source")
    target_y = _check_unit(target_y, "target")
    n = len(target_y)
    if len(source_y) != n or n % k:
        raise TheoryModeError("source and target must both have m*k rows")
    pred_s, phi_s = model.forward(source_x)
    pred_t, phi_t = model.forward(target_x)
    hs = np.clip(pred_s.value, 0.0, 1.0)
    ht = np.clip(pred_t.value, 0.0, 1.0)
    if not (np.array_equal(hs, pred_s.value) and np.array_equal(ht, pred_t.value)):
        raise TheoryModeError("model outputs leave [0, 1]; rescale the head first")
    offsets = np.arange(0, n + 1, k)
    bag_labels = target_y.reshape(-1, k).mean(axis=1)
    lhs = float(L.bag_mse(ht, offsets, bag_labels)) - float(L.instance_mse(hs, source_y))
    xi = float(L.xi(phi_s.value, source_y, phi_t.value, offsets, bag_labels))
    lam, r = L.lemma1_terms(target_y, source_y, ht, hs)
    rhs = xi * float(np.linalg.norm(model.head_vector())) + lam + r
    return lhs, rhs


def random_mlp_sampler(dim: int, max_width: int = 8, max_depth: int = 2) -> Callable:
    """``sampler(rng) -> Model`` drawing a random small ReLU network."""
    def sample(rng: np.random.Generator) -> Model:
        depth = int(rng.integers(0, max_depth + 1))
        hidden = tuple(int(w) for w in rng.integers(1, max_width + 1, size=depth))
        return Model(ArchConfig(dim, hidden=hidden), seed=int(rng.integers(2**31)))
    return sample


def shifted_gaussian_sampler(dim: int, max_m: int = 50, max_k: int = 8) -> Callable:
    """``sampler(rng) -> (Sx, Sy, Tx, Ty, k)`` with a random mean shift and labels in [0, 1]."""
    def sample(rng: np.random.Generator):
        m = int(rng.integers(1, max_m + 1))
        k = int(rng.integers(1, max_k + 1))
        n = m * k
        shift = rng.normal(0.0, rng.uniform(0.0, 2.0), size=dim)
        w = rng.normal(size=dim)
        sx = rng.normal(size=(n, dim))
        tx = rng.normal(size=(n, dim)) + shift
        noise = rng.uniform(0.0, 0.3)
        link = lambda x: 1.0 / (1.0 + np.exp(-(x @ w) / np.sqrt(dim)))
        sy = np.clip(link(sx) + noise * rng.normal(size=n), 0.0, 1.0)
        ty = np.clip(link(tx) + noise * rng.normal(size=n), 0.0, 1.0)
        return sx, sy, tx, ty, k
    return sample


def check_lemma1(model_sampler: Callable, data_sampler: Callable, trials: int, seed: int = 0,
                 tol: float = 1e-12) -> BoundReport:
    """Count trials with ``lhs > rhs + tol`` (round-off guard only)."""
    rng = np.random.default_rng(seed)
    slack, violations, ms, ks = [], 0, [], []
    for _ in range(trials):
        sx, sy, tx, ty, k = data_sampler(rng)
        model = model_sampler(rng)
        fit_head_to_unit(model, np.vstack([sx, tx]))
        lhs, rhs = lemma1_sides(model, sx, sy, tx, ty, k)
        slack.append(rhs - lhs)
        violations += lhs > rhs + tol
        ms.append(len(ty) // k)
        ks.append(k)
    return BoundReport("lemma1", trials, int(violations), _quantiles(slack),
                       {"max_m": max(ms, default=0), "max_k": max(ks, default=0), "seed": seed})


# --------------------------------------------------------------------------
# Theorem 1 concentration step


def theorem1_bound(eps_hat: float, m: int, k: int) -> float:
    return 2.0 * math.exp(-eps_hat * m / (32.0 * k * k))


def check_theorem1_step(residuals, k: int, resamples: int, seed: int = 0, chunk: int = 250) -> BoundReport:
    """Failure rate of ``bag_mse <= mse / (4k)`` under two-stage bagging.

    ``residuals`` are ``h(x_i) - y_i`` on the fixed sample ``Z`` of size
    ``2mk``; the bag error of a bag is the mean residual of its members.
    A model and dataset can be turned into residuals with
    :func:`residuals_of`.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    n = len(residuals)
    if k < 1 or n == 0 or n % (2 * k):
        raise ValueError(f"sample size {n} is not a positive multiple of 2k = {2 * k}")
    m = n // (2 * k)
    eps_hat = float(np.mean(residuals**2))
    params = {"m": m, "k": k, "resamples": resamples, "eps_hat": eps_hat, "seed": seed}
    if eps_hat == 0.0:
        return BoundReport("theorem1", 0, 0, {}, params, skipped=1)
    rng = np.random.default_rng(seed)
    threshold = eps_hat / (4 * k)
    bag_losses = []
    for start in range(0, resamples, chunk):
        r = min(chunk, resamples - start)
        sel = two_stage_selection(m, k, rng, resamples=r)
        bag_losses.append(np.mean(residuals[sel].mean(axis=-1) ** 2, axis=-1))
    bag_losses = np.concatenate(bag_losses)
    failures = int(np.sum(bag_losses <= threshold))
    rate = failures / resamples
    bound = theorem1_bound(eps_hat, m, k)
    se = math.sqrt(max(bound * (1.0 - bound), 0.0) / resamples)
    limit = bound + 3.0 * se
    params.update(bound=bound, binomial_se=se, failure_rate=rate, threshold=threshold)
    report = BoundReport("theorem1", 1, int(rate > limit), _quantiles(bag_losses - threshold), params)
    report.details = {"failures": failures, "limit": limit}
    return report


def residuals_of(model: Model, features, labels) -> np.ndarray:
    return np.clip(model.predict(features), 0.0, 1.0) - _check_unit(labels, "sample")


# --------------------------------------------------------------------------
# bag-size degradation example


def appendix_c_experiment(k: int, m: int, seed: int) -> tuple[float, float]:
    """``(bag loss, instance loss)`` of ``h = 1/2`` on ``m`` bags of ``k`` uniform labels."""
    if k < 1 or m < 1:
        raise ValueError("k and m must be positive")
    y = np.random.default_rng(seed).uniform(0.0, 1.0, size=(m, k))
    resid = 0.5 - y
    return float(np.mean(resid.mean(axis=1) ** 2)), float(np.mean(resid**2))


def appendix_c_scan(ks=(2, 4, 8, 16, 32, 64), m: int = 100_000, seed: int = 0) -> dict:
    """Loss pairs for several bag sizes plus the log-log slope of ``instance / bag`` vs ``k``."""
    rows = {}
    for i, k in enumerate(ks):
        bag, inst = appendix_c_experiment(k, m, seed + i)
        rows[k] = {"bag_loss": bag, "instance_loss": inst, "ratio": inst / bag}
    slope = float(np.polyfit(np.log(ks), np.log([rows[k]["ratio"] for k in ks]), 1)[0])
    return {"rows": rows, "slope": slope}
