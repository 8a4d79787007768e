import numpy as np

from errors import DimensionError
from tensor import (BatchNormState, Tensor, batch_norm, expand_rows,
                    layer_norm_rows, matmul)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Parameters are discovered from attributes: Tensors that require grad,
    nested Modules and lists of Modules. Paths are dotted attribute names."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        return out

    def named_states(self, prefix: str = "") -> dict[str, BatchNormState]:
        out: dict[str, BatchNormState] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_states(path + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_states(f"{path}.{i}."))
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for path, state in self.named_states().items():
            out[f"{path}.running_mean"] = state.running_mean
            out[f"{path}.running_var"] = state.running_var
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in, self.d_out = d_in, d_out
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"Linear expects width {self.d_in}, got {x.shape}")
        return matmul(x, self.weight) + expand_rows(self.bias, x.shape[0])


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm_rows(x, self.gamma, self.beta, self.eps)


class BatchNorm1d(Module):
    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.state = BatchNormState(np.zeros(dim), np.ones(dim), momentum, eps)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, mode)
