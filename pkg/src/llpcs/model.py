"""The fixed MLP regressor family, its optimizers and a finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor


class ConfigurationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    hidden: tuple[int, ...] = (128, 128)
    categorical_cardinalities: tuple[int, ...] = ()
    embedding_dim: int = 8
    domain_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(
            self, "categorical_cardinalities", tuple(int(c) for c in self.categorical_cardinalities)
        )
        if self.input_dim < 0 or (self.input_dim == 0 and not self.categorical_cardinalities):
            raise ConfigurationError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError(f"hidden widths must be >= 1, got {self.hidden}")
        if any(c < 1 for c in self.categorical_cardinalities):
            raise ConfigurationError("categorical cardinalities must be >= 1")
        if self.categorical_cardinalities and self.embedding_dim < 1:
            raise ConfigurationError("embedding_dim must be >= 1")

    @property
    def representation_dim(self) -> int:
        """Width of the first dense layer's input (numeric + embedded)."""
        return self.input_dim + self.embedding_dim * len(self.categorical_cardinalities)

    @property
    def embedding_width(self) -> int:
        """Width of phi(x), the penultimate activation."""
        return self.hidden[-1] if self.hidden else self.representation_dim


def _uniform(rng, limit, shape):
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """ReLU MLP with a single linear output node.

    ``forward`` returns both the predictions ``h(x)`` and the penultimate
    activations ``phi(x)``; the head satisfies ``h = phi @ w + b``.
    With ``hidden=()`` the model is linear and ``phi`` is the input.
    """

    def __init__(self, config: ArchConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.embeddings = [
            Parameter(_uniform(rng, np.sqrt(6.0 / config.embedding_dim), (card, config.embedding_dim)),
                      name=f"embedding{i}")
            for i, card in enumerate(config.categorical_cardinalities)
        ]
        self.layers: list[tuple[Parameter, Parameter]] = []
        fan_in = config.representation_dim
        for i, width in enumerate(config.hidden):
            w = _uniform(rng, np.sqrt(6.0 / fan_in), (fan_in, width))
            self.layers.append((Parameter(w, name=f"W{i}"), Parameter(np.zeros(width), name=f"b{i}")))
            fan_in = width
        self.head_w = Parameter(_uniform(rng, np.sqrt(6.0 / (fan_in + 1)), (fan_in,)), name="head_w")
        self.head_b = Parameter(np.zeros(()), name="head_b")
        if config.domain_head:
            self.domain_w = Parameter(_uniform(rng, np.sqrt(6.0 / (fan_in + 1)), (fan_in,)), name="domain_w")
            self.domain_b = Parameter(np.zeros(()), name="domain_b")
        else:
            self.domain_w = self.domain_b = None

    def body_parameters(self) -> list[Parameter]:
        params = list(self.embeddings)
        for w, b in self.layers:
            params += [w, b]
        return params + [self.head_w, self.head_b]

    def domain_parameters(self) -> list[Parameter]:
        return [] if self.domain_w is None else [self.domain_w, self.domain_b]

    def parameters(self) -> list[Parameter]:
        return self.body_parameters() + self.domain_parameters()

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def head_vector(self) -> np.ndarray:
        """r_h with the bias folded in as the last coordinate."""
        return np.append(self.head_w.value, self.head_b.value)

    def input_representation(self, features, categorical=None) -> Tensor:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"expected features of shape (n, {self.config.input_dim}), got {features.shape}"
            )
        if not self.embeddings:
            return Tensor(features)
        categorical = np.asarray(categorical, dtype=np.int64)
        if categorical.shape != (features.shape[0], len(self.embeddings)):
            raise ShapeError(
                f"expected categorical ids of shape ({features.shape[0]}, {len(self.embeddings)}),"
                f" got {categorical.shape}"
            )
        parts = [Tensor(features)] + [
            ad.gather_rows(table, categorical[:, i]) for i, table in enumerate(self.embeddings)
        ]
        return ad.concat(parts, axis=1)

    def forward_from_representation(self, rep: Tensor) -> tuple[Tensor, Tensor]:
        phi = rep
        for w, b in self.layers:
            phi = ad.relu(ad.linear(phi, w, b))
        return ad.linear(phi, self.head_w, self.head_b), phi

    def forward(self, features, categorical=None) -> tuple[Tensor, Tensor]:
        """Return ``(predictions, embeddings)`` for a batch."""
        return self.forward_from_representation(self.input_representation(features, categorical))

    def domain_probability(self, phi: Tensor) -> Tensor:
        if self.domain_w is None:
            raise ConfigurationError("model has no domain head")
        return ad.sigmoid(phi @ self.domain_w + self.domain_b)

    def predict(self, features, categorical=None) -> np.ndarray:
        return self.forward(features, categorical)[0].value

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.parameters():
            n = p.value.size
            p.value = flat[i:i + n].reshape(p.value.shape).copy()
            i += n

    def copy(self) -> "Model":
        clone = Model.__new__(Model)
        clone.config, clone.seed = self.config, self.seed
        clone.embeddings = [Parameter(p.value, name=p.name) for p in self.embeddings]
        clone.layers = [(Parameter(w.value, name=w.name), Parameter(b.value, name=b.name))
                        for w, b in self.layers]
        clone.head_w = Parameter(self.head_w.value, name="head_w")
        clone.head_b = Parameter(self.head_b.value, name="head_b")
        if self.domain_w is None:
            clone.domain_w = clone.domain_b = None
        else:
            clone.domain_w = Parameter(self.domain_w.value, name="domain_w")
            clone.domain_b = Parameter(self.domain_b.value, name="domain_b")
        return clone


def init_model(config: ArchConfig, seed: int) -> Model:
    return Model(config, seed)


def forward(model: Model, features, categorical=None) -> tuple[np.ndarray, np.ndarray]:
    """Numeric forward pass: ``(predictions, embeddings)`` as arrays."""
    pred, phi = model.forward(features, categorical)
    return pred.value, phi.value


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr
        self.t = 0

    def step(self, params: Sequence[Parameter], grads: Sequence[np.ndarray]) -> None:
        _check_grads(params, grads)
        self.t += 1
        for p, g in zip(params, grads):
            p.value = p.value - self.lr * g


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, params: Sequence[Parameter], grads: Sequence[np.ndarray]) -> None:
        _check_grads(params, grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if i not in self.m:
                self.m[i] = np.zeros_like(p.value)
                self.v[i] = np.zeros_like(p.value)
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float):
    kind = kind.lower()
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


def _check_grads(params, grads):
    if len(params) != len(grads):
        raise ShapeError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {p.name} {p.value.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")


def optimizer_step(optimizer, model: Model, grads: Sequence[np.ndarray], params=None) -> Model:
    optimizer.step(model.parameters() if params is None else params, grads)
    return model


def grad_check(
    loss_builder: Callable[[Model], Tensor],
    model: Model,
    params: Sequence[Parameter] | None = None,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, 1e-7)``
    so that vanishing gradients are compared absolutely. Large parameter
    sets are subsampled to ``max_coords`` coordinates (at least 200).
    """
    params = model.parameters() if params is None else list(params)
    with Tape() as tape:
        loss = loss_builder(model)
    analytic = tape.gradient(loss, params)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if max_coords is not None and len(coords) > max(max_coords, 200):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max(max_coords, 200), replace=False)
        coords = [coords[c] for c in np.sort(pick)]

    worst = 0.0
    for i, j in coords:
        p = params[i]
        flat = p.value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = float(loss_builder(model).value)
        flat[j] = orig - step
        down = float(loss_builder(model).value)
        flat[j] = orig
        numeric = (up - down) / (2.0 * step)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-7)
        worst = max(worst, err)
    return worst
