import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


class Mode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


class Stream(IntEnum):
    """Independent random streams derived from one seed."""

    INIT = 0
    DROPOUT = 1
    SHUFFLE = 2
    SPLIT = 3
    SYNTHETIC = 4


@dataclass(frozen=True)
class RngSeed:
    seed: int = 0

    def generator(self, stream: Stream) -> np.random.Generator:
        return np.random.default_rng([self.seed & _SEED_MASK, int(stream)])


def glorot_uniform(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """
    Container of parameters, buffers and sub-modules.

    Parameters and sub-modules are registered on attribute assignment; their dotted attribute
    paths are the names used in checkpoints.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buffer in self._buffers.items():
            yield prefix + name, buffer
        for name, module in self._modules.items():
            yield from module.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def bind_names(self):
        """Name every parameter by its attribute path (unique within the model)."""
        for name, param in self.named_parameters():
            param.name = name

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def count_parameters(self) -> int:
        return sum(p.size for p in self.parameters() if p.trainable)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy arrays into parameters and buffers in place, validating every shape."""
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"State mismatch, missing: {missing}, unexpected: {unexpected}")
        for name, target in own.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise CheckpointError(
                    f"Shape of '{name}' is {value.shape}, model expects {target.shape}"
                )
            target[...] = value


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *, zero_init=False):
        super().__init__()
        if zero_init:
            weight = np.zeros((n_in, n_out))
        else:
            weight = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.weight = Parameter(weight, "weight")
        self.bias = Parameter(np.zeros(n_out), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        kernel: Tuple[int, int],
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        padding: str = "same",
    ):
        super().__init__()
        kh, kw = kernel
        shape = (kh, kw, n_in, n_out)
        self.weight = Parameter(
            glorot_uniform(rng, shape, kh * kw * n_in, kh * kw * n_out), "weight"
        )
        self.bias = Parameter(np.zeros(n_out), "bias")
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels), "gamma")
        self.beta = Parameter(np.zeros(channels), "beta")
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("batches_tracked", np.zeros(1))
        self.momentum = momentum
        self.eps = eps
        self._warned = False

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        training = mode is Mode.TRAIN
        if not training and self.batches_tracked[0] == 0 and not self._warned:
            logger.warning("Batch normalization used for inference before any training step")
            self._warned = True
        out = ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            momentum=self.momentum,
            eps=self.eps,
        )
        if training:
            self.batches_tracked += 1
        return out


class Embedding(Module):
    """Trainable lookup table; row `padding_id` stays zero."""

    def __init__(self, n_tokens: int, dim: int, rng: np.random.Generator, padding_id: int = 0):
        super().__init__()
        table = rng.uniform(-0.05, 0.05, size=(n_tokens, dim))
        table[padding_id] = 0.0
        self.table = Parameter(table, "table")
        self.padding_id = padding_id

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.table, ids, padding_id=self.padding_id)


class Lstm(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.w_x = Parameter(glorot_uniform(rng, (n_in, 4 * hidden), n_in, 4 * hidden), "w_x")
        self.w_h = Parameter(
            glorot_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden), "w_h"
        )
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # forget gate open at start
        self.b = Parameter(bias, "b")
        self.hidden = hidden

    @property
    def weights(self) -> Tuple[Parameter, Parameter, Parameter]:
        return self.w_x, self.w_h, self.b


class BiLstm(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.forward = Lstm(n_in, hidden, rng)
        self.backward = Lstm(n_in, hidden, rng)
        self.n_in = n_in
        self.output_dim = 2 * hidden

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.n_in:  # noqa: PLR2004
            raise ShapeError(f"BiLSTM expects (N, T, {self.n_in}), got {x.shape}")
        return ad.bilstm(x, self.forward.weights, self.backward.weights)

    def last_states(self, outputs: Tensor) -> Tensor:
        """Final state of each direction: forward at t = T-1, backward at t = 0."""
        hidden = self.output_dim // 2
        return ad.concat(
            [outputs[:, -1, :hidden], outputs[:, 0, hidden:]],
            axis=-1,
        )


class SelfAttention(Module):
    def __init__(self, dim: int, context_dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(glorot_uniform(rng, (dim, context_dim), dim, context_dim), "weight")
        self.bias = Parameter(np.zeros(context_dim), "bias")
        self.context = Parameter(glorot_uniform(rng, (context_dim,), context_dim, 1), "context")

    def __call__(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        return ad.self_attention(h, self.weight, self.bias, self.context)


class MlpHead(Module):
    """Dense -> ReLU -> dropout -> dense (logits)."""

    def __init__(
        self,
        n_in: int,
        hidden: int,
        n_out: int,
        rng: np.random.Generator,
        dropout: float,
        *,
        zero_init: bool = False,
    ):
        super().__init__()
        self.hidden = Dense(n_in, hidden, rng)
        self.output = Dense(hidden, n_out, rng, zero_init=zero_init)
        self.dropout = dropout

    def __call__(self, x: Tensor, mode: Mode, rng: Optional[np.random.Generator]) -> Tensor:
        x = ad.relu(self.hidden(x))
        x = ad.dropout(x, self.dropout, rng, training=mode is Mode.TRAIN)
        return self.output(x)
