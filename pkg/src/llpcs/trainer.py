"""Mini-batch training, evaluation, grid search and seeded multi-trial runs."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import losses as L
from .autodiff import Tape
from .bagging import BagCollection
from .data import Dataset
from .model import ConfigurationError, Model, NonFiniteError, make_optimizer

log = logging.getLogger(__name__)

DANN_METHODS = {"AF-DANN": "AF", "LR-DANN": "LR"}
LAMBDA_KEY = {"BL-WFA": "lambda3", "PL-WFA": "lambda3", "DMFA": "lambda_d",
              "AF-DANN": "lambda_d", "LR-DANN": "lambda_d"}


class TrainingAborted(RuntimeError):
    def __init__(self, message, epoch_losses=()):
        super().__init__(message)
        self.epoch_losses = list(epoch_losses)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "BL-WFA"
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 30
    bags_per_batch: int = 8
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_d: float = 1.0
    w_r: float = 0.0
    adaptive: bool = True
    hidden: tuple[int, ...] = (128, 128)
    embedding_dim: int = 8
    model_seed: int = 0
    bag_seed: int = 0
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.method not in L.METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.bags_per_batch < 1:
            raise ConfigurationError("bags_per_batch must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.loss_spec()  # validates weights

    def loss_spec(self) -> L.LossSpec:
        return L.LossSpec(
            method=self.method,
            lambdas=(self.lambda1, self.lambda2, self.lambda3),
            lambda_d=self.lambda_d,
            w_r=self.w_r,
            adaptive=self.adaptive,
        )

    def with_seed_offset(self, offset: int) -> "TrainConfig":
        return replace(self, model_seed=self.model_seed + offset, bag_seed=self.bag_seed + offset,
                       shuffle_seed=self.shuffle_seed + offset)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class RunResult:
    config: TrainConfig
    epoch_losses: list[float]
    test_mse: float | None
    wall_ms: float
    n_steps: int
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# batching


def source_count(method: str, n_bags: int, n_members: int) -> int:
    if method == "Bagged-Target":
        return 0
    if method == "BL-WFA":
        return n_bags
    return n_members


def make_minibatches(
    n_source: int,
    bags: BagCollection,
    method: str,
    bags_per_batch: int,
    seed: int,
    epochs: int = 1,
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(epoch, bag_ids, source_rows)`` for every step.

    Bag order is reshuffled each epoch. Source rows are drawn without
    replacement from a shuffled pool that is refilled when exhausted.
    """
    if method != "Bagged-Target" and n_source < 1:
        raise ConfigurationError(f"{method} needs source rows")
    rng = np.random.default_rng(seed)
    sizes = bags.sizes
    pool = np.zeros(0, dtype=np.int64)
    for epoch in range(epochs):
        order = rng.permutation(len(bags))
        for start in range(0, len(order), bags_per_batch):
            ids = order[start:start + bags_per_batch]
            need = source_count(method, len(ids), int(sizes[ids].sum()))
            picked = []
            while need > 0:
                if len(pool) == 0:
                    pool = rng.permutation(n_source)
                take = min(need, len(pool))
                picked.append(pool[:take])
                pool = pool[take:]
                need -= take
            src = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
            yield epoch, ids, src


# --------------------------------------------------------------------------
# training


def build_model(config: TrainConfig, target: Dataset) -> Model:
    arch = target.arch(hidden=config.hidden, embedding_dim=config.embedding_dim,
                       domain_head=config.method in DANN_METHODS)
    return Model(arch, seed=config.model_seed)


def step_loss(model: Model, batch: L.BatchView, spec: L.LossSpec):
    """Loss for one batch under the method of ``spec`` (non-DANN methods)."""
    method = spec.method
    if method == "AF":
        return L.af_loss(model, batch)
    out = L.model_outputs(model, batch)
    if method == "BL-WFA":
        return L.bagcsi(out, batch, spec)
    if method == "PL-WFA":
        return L.plwfa(out, batch, spec)
    if method == "LR":
        return L.lr_loss(out, batch)
    if method == "DMFA":
        return L.dmfa_loss(out, batch, spec)
    if method == "Bagged-Target":
        return L.bagged_target_loss(out, batch)
    raise ConfigurationError(f"{method} has no single-phase loss")


def _apply(optimizer, params, loss, tape):
    optimizer.step(params, tape.gradient(loss, params))


def dann_step(model: Model, batch: L.BatchView, spec: L.LossSpec, body_opt, head_opt, base: str) -> dict:
    """Two-phase adversarial step: body against the domain head, then the head alone."""
    body = model.body_parameters()
    with Tape() as tape:
        out = L.model_outputs(model, batch)
        loss, parts = L.dann_phase1(model, out, batch, spec, base)
    _check_finite(loss)
    _apply(body_opt, body, loss, tape)
    head = model.domain_parameters()
    with Tape() as tape:
        out = L.model_outputs(model, batch)
        dom, _ = L.dann_phase2(model, out)
    _check_finite(dom)
    _apply(head_opt, head, dom, tape)
    parts["loss"] = float(loss)
    return parts


def _check_finite(loss):
    if not np.isfinite(float(loss)):
        raise NonFiniteError("non-finite loss")


def train(
    config: TrainConfig,
    source: Dataset | None,
    target: Dataset,
    bags: BagCollection,
    test: Dataset | None = None,
    model: Model | None = None,
) -> tuple[Model, RunResult]:
    """Train one model. ``test`` is only touched by the final :func:`evaluate`."""
    t0 = time.perf_counter()
    spec = config.loss_spec()
    model = build_model(config, target) if model is None else model
    base = DANN_METHODS.get(config.method)
    body_opt = make_optimizer(config.optimizer, config.lr)
    head_opt = make_optimizer(config.optimizer, config.lr) if base else None
    params = model.body_parameters()
    n_source = 0 if source is None else len(source)
    if config.method == "Bagged-Target":
        source = None
        n_source = 0

    epoch_losses: list[float] = []
    running, count, current, steps = 0.0, 0, 0, 0
    stream = make_minibatches(n_source, bags, config.method, config.bags_per_batch,
                              config.shuffle_seed, config.epochs)
    try:
        for epoch, ids, src in stream:
            if epoch != current:
                epoch_losses.append(running / max(count, 1))
                running, count, current = 0.0, 0, epoch
            batch = L.BatchView.build(source, src, target, [bags[i] for i in ids])
            if base:
                value = dann_step(model, batch, spec, body_opt, head_opt, base)["loss"]
            else:
                with Tape() as tape:
                    loss, _ = step_loss(model, batch, spec)
                _check_finite(loss)
                _apply(body_opt, params, loss, tape)
                value = float(loss)
            running += value
            count += 1
            steps += 1
    except NonFiniteError as exc:
        raise TrainingAborted(
            f"{config.method}: {exc} at epoch {current}, step {steps}; "
            f"last good epoch losses {epoch_losses[-3:]}", epoch_losses) from exc
    epoch_losses.append(running / max(count, 1))
    test_mse = evaluate(model, test) if test is not None else None
    wall_ms = (time.perf_counter() - t0) * 1000.0
    log.debug("trained %s in %.0f ms, test mse %s", config.method, wall_ms, test_mse)
    return model, RunResult(config, epoch_losses, test_mse, wall_ms, steps)


def evaluate(model: Model, test: Dataset, chunk: int = 8192) -> float:
    """Instance MSE on a labelled split."""
    n = len(test)
    if n == 0:
        raise ValueError("evaluate on an empty dataset")
    total = 0.0
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        cat = test.categorical[sl] if model.embeddings else None
        pred = model.predict(test.features[sl], cat)
        total += float(np.sum((pred - test.labels[sl]) ** 2))
    return total / n


def evaluate_bags(model: Model, target: Dataset, bags: BagCollection) -> float:
    """Bag-level MSE of a model on labelled bags (validation without instance labels)."""
    members = bags.member_indices()
    cat = target.categorical[members] if model.embeddings else None
    pred = model.predict(target.features[members], cat)
    offsets = L.offsets_from_sizes(bags.sizes)
    return float(L.bag_mse(pred, offsets, bags.labels))


# --------------------------------------------------------------------------
# grid search and repeated trials

DEFAULT_GRIDS = {"lr": [1e-4, 1e-3, 1e-2, 1e-1], "lambda": [1e-2, 1e-1, 1.0, 10.0]}


def expand_grid(base: TrainConfig, grids: dict) -> list[TrainConfig]:
    """All configurations of the grid; ``lambda`` maps to the method's own weight.

    For methods without a weight the ``lambda`` axis collapses.
    """
    if not grids:
        raise ConfigurationError("grids must be nonempty")
    keys = list(grids)
    configs, seen = [], set()
    for values in itertools.product(*(grids[k] for k in keys)):
        changes = {}
        for k, v in zip(keys, values):
            if k == "lambda":
                if base.method in LAMBDA_KEY:
                    changes[LAMBDA_KEY[base.method]] = float(v)
            else:
                changes[k] = v
        cfg = replace(base, **changes)
        if cfg not in seen:
            seen.add(cfg)
            configs.append(cfg)
    return configs


def split_validation(bags: BagCollection, fraction: float, seed: int) -> tuple[BagCollection, BagCollection]:
    n_val = max(1, int(round(len(bags) * fraction)))
    if n_val >= len(bags):
        raise ConfigurationError("not enough bags for a validation split")
    perm = np.random.default_rng(seed).permutation(len(bags))
    return bags.subset(np.sort(perm[n_val:])), bags.subset(np.sort(perm[:n_val]))


@dataclass
class GridResult:
    best: TrainConfig
    rows: list[dict]


def grid_search(
    base: TrainConfig,
    grids: dict,
    source: Dataset | None,
    target: Dataset,
    bags: BagCollection,
    validation_fraction: float = 0.1,
    jobs: int = 1,
) -> GridResult:
    """Exhaustive sweep selecting on bag-level MSE of held-out training bags."""
    train_bags, val_bags = split_validation(bags, validation_fraction, base.bag_seed)
    configs = expand_grid(base, grids)
    scores = _map(jobs, _grid_point, [(c, source, target, train_bags, val_bags) for c in configs])
    rows = []
    best_i = int(np.argmin([s if np.isfinite(s) else np.inf for s in scores]))
    for i, (cfg, score) in enumerate(zip(configs, scores)):
        rows.append({**cfg.to_dict(), "val_bag_mse": score, "best": i == best_i})
    return GridResult(configs[best_i], rows)


def _grid_point(args) -> float:
    cfg, source, target, train_bags, val_bags = args
    try:
        model, _ = train(cfg, source, target, train_bags)
    except TrainingAborted:
        return float("inf")
    return evaluate_bags(model, target, val_bags)


@dataclass
class MultiRunResult:
    mean: float
    std: float
    results: list[RunResult]

    def formatted(self, digits: int = 2) -> str:
        return format_mean_std(self.mean, self.std, digits)


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def multi_run(
    config: TrainConfig,
    n_trials: int,
    source: Dataset | None,
    target: Dataset,
    test: Dataset,
    bagger: Callable[[Dataset, int], BagCollection],
    jobs: int = 1,
) -> MultiRunResult:
    """Repeat training with trial-offset seeds; each trial re-bags the target set.

    ``bagger(target, seed)`` builds the bags for one trial.
    """
    if n_trials < 1:
        raise ConfigurationError("n_trials must be >= 1")
    cfgs = [config.with_seed_offset(t) for t in range(n_trials)]
    results = _map(jobs, _trial, [(c, source, target, test, bagger) for c in cfgs])
    mses = np.array([r.test_mse for r in results])
    std = float(mses.std(ddof=1)) if n_trials > 1 else 0.0
    return MultiRunResult(float(mses.mean()), std, results)


def _trial(args) -> RunResult:
    cfg, source, target, test, bagger = args
    bags = bagger(target, cfg.bag_seed)
    _, result = train(cfg, source, target, bags, test)
    result.meta.update(bags.params, regime=bags.regime)
    return result


def _map(jobs, fn, items):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# result files

RESULT_COLUMNS = ("method", "k", "regime", "optimizer", "lr", "lambda1", "lambda2", "lambda3",
                  "lambda_d", "w_r", "model_seed", "bag_seed", "shuffle_seed", "test_mse")


def result_row(result: RunResult) -> dict:
    c = result.config
    k = result.meta.get("k", result.meta.get("sizes", ""))
    if isinstance(k, (list, tuple)):
        k = "/".join(str(v) for v in k)
    return {
        "method": c.method, "k": k, "regime": result.meta.get("regime", ""),
        "optimizer": c.optimizer, "lr": repr(c.lr), "lambda1": repr(c.lambda1),
        "lambda2": repr(c.lambda2), "lambda3": repr(c.lambda3), "lambda_d": repr(c.lambda_d),
        "w_r": repr(c.w_r), "model_seed": c.model_seed, "bag_seed": c.bag_seed,
        "shuffle_seed": c.shuffle_seed,
        "test_mse": "" if result.test_mse is None else repr(float(result.test_mse)),
    }


def results_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(result_row(r))
    return buf.getvalue()


def summary(results: Sequence[RunResult]) -> dict:
    """``{method: {k: {"mean", "std", "n", "formatted"}}}`` over test MSEs."""
    groups: dict[str, dict[str, list[float]]] = {}
    for r in results:
        row = result_row(r)
        groups.setdefault(row["method"], {}).setdefault(str(row["k"]), []).append(float(r.test_mse))
    out = {}
    for method, by_k in groups.items():
        out[method] = {}
        for k, vals in by_k.items():
            v = np.array(vals)
            std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            out[method][k] = {"mean": float(v.mean()), "std": std, "n": len(v),
                              "formatted": format_mean_std(float(v.mean()), std)}
    return out


def write_results(results: Sequence[RunResult], out_dir, stem: str = "results") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``; wall times go to ``timings.log``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text(results_csv(results), encoding="utf-8")
    json_path.write_text(json.dumps(summary(results), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with (out_dir / "timings.log").open("a", encoding="utf-8") as fh:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        for r in results:
            fh.write(f"{stamp} {r.config.method} seed={r.config.model_seed} wall_ms={r.wall_ms:.1f}\n")
    return csv_path, json_path
