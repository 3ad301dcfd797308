"""Dense layers with weight normalization, residual blocks, and their init.

Every weight matrix is stored in the normalized form W = g * v / ||v||, with
the norm taken per output column. Layers are initialized data-dependently:
v is drawn from a small Gaussian, then g and the bias are rescaled so the
pre-activation output on an init batch has per-unit mean 0 and variance 1.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeMismatch, Tensor, concat, weightnorm_affine


V_INIT_STD = 0.05  # std of the Gaussian used to draw the direction matrix v
_VAR_FLOOR = 1e-10


class DegenerateBatch(ValueError):
    """Init batch produces (near-)zero output variance in some unit."""


class WeightNormDense:
    """Affine layer y = x @ (g * v / ||v||) + b with column-normalized v."""

    def __init__(self, fan_in: int, fan_out: int, name: str = "dense"):
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.name = name
        self.v = Tensor(np.zeros((fan_in, fan_out)), name=f"{name}.v")
        self.g = Tensor(np.ones(fan_out), name=f"{name}.g")
        self.b = Tensor(np.zeros(fan_out), name=f"{name}.b")
        self._initialized = False

    def parameters(self):
        return [self.v, self.g, self.b]

    def named_parameters(self):
        return [(f"{self.name}.v", self.v), (f"{self.name}.g", self.g), (f"{self.name}.b", self.b)]

    def effective_weight(self) -> np.ndarray:
        norms = np.sqrt((self.v.data**2).sum(axis=0))
        return self.g.data * self.v.data / norms

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.fan_in:
            raise ShapeMismatch(
                f"{self.name}: input has {x.data.shape[-1]} features, expected {self.fan_in}"
            )
        return weightnorm_affine(x, self.v, self.g, self.b)

    __call__ = forward

    def init_data_dependent(self, batch: Tensor, rng: np.random.Generator) -> Tensor:
        """Draw v, then set g and b from the batch statistics of the output.

        Returns the post-init output on the batch (so callers can chain init
        through a stack). Requires at least 2 rows for a variance estimate.
        """
        if batch.data.shape[0] < 2:
            raise DegenerateBatch(f"{self.name}: init batch needs >= 2 examples")
        self.v.data = rng.normal(0.0, V_INIT_STD, size=(self.fan_in, self.fan_out))
        norms = np.sqrt((self.v.data**2).sum(axis=0))
        pre = batch.data @ (self.v.data / norms)
        mean = pre.mean(axis=0)
        var = pre.var(axis=0)
        if np.any(var < _VAR_FLOOR):
            raise DegenerateBatch(
                f"{self.name}: unit variance below {_VAR_FLOOR} on the init batch"
            )
        scale = 1.0 / np.sqrt(var)
        self.g.data = scale
        self.b.data = -mean * scale
        self._initialized = True
        return self.forward(batch)


class ResidualBlock:
    """y = W2(relu(W1(relu(x)))) + x at a fixed width (identity shortcut)."""

    def __init__(self, width: int, name: str = "block"):
        self.width = width
        self.name = name
        self.first = WeightNormDense(width, width, name=f"{name}.first")
        self.second = WeightNormDense(width, width, name=f"{name}.second")

    def parameters(self):
        return self.first.parameters() + self.second.parameters()

    def named_parameters(self):
        return self.first.named_parameters() + self.second.named_parameters()

    def forward(self, x: Tensor) -> Tensor:
        return self.second(self.first(x.relu()).relu()) + x

    __call__ = forward

    def init_data_dependent(self, batch: Tensor, rng: np.random.Generator) -> Tensor:
        h = self.first.init_data_dependent(batch.relu(), rng)
        self.second.init_data_dependent(Tensor(h.data).relu(), rng)
        return self.forward(batch)


class DeterministicTransform:
    """Entry projection into `hidden` width followed by residual blocks."""

    def __init__(self, fan_in: int, hidden: int, blocks: int, name: str = "transform"):
        self.name = name
        self.entry = WeightNormDense(fan_in, hidden, name=f"{name}.entry")
        self.blocks = [ResidualBlock(hidden, name=f"{name}.block{i}") for i in range(blocks)]

    def parameters(self):
        params = self.entry.parameters()
        for b in self.blocks:
            params += b.parameters()
        return params

    def named_parameters(self):
        named = self.entry.named_parameters()
        for b in self.blocks:
            named += b.named_parameters()
        return named

    def forward(self, x: Tensor) -> Tensor:
        h = self.entry(x)
        for b in self.blocks:
            h = b(h)
        return h

    __call__ = forward

    def init_data_dependent(self, batch: Tensor, rng: np.random.Generator) -> Tensor:
        h = self.entry.init_data_dependent(batch, rng)
        for b in self.blocks:
            h = b.init_data_dependent(Tensor(h.data), rng)
        return self.forward(batch)
