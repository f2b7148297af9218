"""
services/learn/nn.py - Feed-forward networks on numpy with exact reverse-mode gradients

A network is a stack of blocks, each Dense -> optional BatchNorm -> activation.
`forward` records what `backward` needs; `backward` returns gradients for
every parameter in `parameters()` order plus the gradient w.r.t. the input.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from utils.exceptions import ConfigError
from utils.rng import SeedLike, as_generator

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ── activations ────────────────────────────────────────────────

class Activation:
    """Elementwise activation; `grad` gets the pre-activation z and output a."""

    name = "identity"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return z

    def grad(self, z: np.ndarray, a: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        return upstream


class ReLU(Activation):
    name = "relu"

    def __call__(self, z):
        return np.maximum(z, 0.0)

    def grad(self, z, a, upstream):
        return upstream * (z > 0)


class LeakyReLU(Activation):
    name = "leaky_relu"

    def __call__(self, z):
        return np.where(z > 0, z, LEAKY_SLOPE * z)

    def grad(self, z, a, upstream):
        return upstream * np.where(z > 0, 1.0, LEAKY_SLOPE)


class Sigmoid(Activation):
    name = "sigmoid"

    def __call__(self, z):
        return expit(z)

    def grad(self, z, a, upstream):
        return upstream * a * (1.0 - a)


class ScaledSigmoid(Activation):
    """low + (high - low) · sigmoid(z); the generator's noise range."""

    name = "scaled_sigmoid"

    def __init__(self, low: float = -0.5, high: float = 0.5):
        self.low = float(low)
        self.high = float(high)

    def __call__(self, z):
        return self.low + (self.high - self.low) * expit(z)

    def grad(self, z, a, upstream):
        s = expit(z)
        return upstream * (self.high - self.low) * s * (1.0 - s)


def make_activation(name: str) -> Activation:
    table = {
        "identity": Activation,
        "relu": ReLU,
        "leaky_relu": LeakyReLU,
        "sigmoid": Sigmoid,
        "scaled_sigmoid": ScaledSigmoid,
    }
    if name not in table:
        raise ConfigError(f"unknown activation '{name}'", {"allowed": sorted(table)})
    return table[name]()


# ── layers ─────────────────────────────────────────────────────

class Dense:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, init: str = "uniform"):
        if init == "zeros":
            self.weight = np.zeros((in_features, out_features))
            self.bias = np.zeros(out_features)
        else:
            bound = 1.0 / np.sqrt(in_features)
            self.weight = rng.uniform(-bound, bound, (in_features, out_features))
            self.bias = rng.uniform(-bound, bound, out_features)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, upstream: np.ndarray):
        grads = [self._x.T @ upstream, upstream.sum(axis=0)]
        return grads, upstream @ self.weight.T


class BatchNorm:
    """Batch statistics while training, running averages in evaluation."""

    def __init__(self, features: int):
        self.gamma = np.ones(features)
        self.beta = np.zeros(features)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if training:
            n = x.shape[0]
            if n < 2:
                raise ConfigError("batch normalization needs at least two rows per training batch")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std, training)
        return self.gamma * x_hat + self.beta

    def backward(self, upstream: np.ndarray):
        x_hat, inv_std, training = self._cache
        grads = [(upstream * x_hat).sum(axis=0), upstream.sum(axis=0)]
        d_hat = upstream * self.gamma
        if not training:
            return grads, d_hat * inv_std
        n = upstream.shape[0]
        dx = inv_std / n * (n * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0))
        return grads, dx


# ── network ────────────────────────────────────────────────────

@dataclass(frozen=True)
class LayerSpec:
    out_features: int
    activation: str = "relu"
    batch_norm: bool = False

    def __post_init__(self):
        if self.out_features < 1:
            raise ConfigError("layer width must be positive", {"out_features": self.out_features})
        make_activation(self.activation)


class Mlp:
    def __init__(
        self,
        input_dim: int,
        layers: Sequence[LayerSpec],
        rng_seed: SeedLike = None,
        init: str = "uniform",
    ):
        if input_dim < 1 or not layers:
            raise ConfigError("network needs a positive input width and at least one layer")
        rng = as_generator(rng_seed)
        self.input_dim = int(input_dim)
        self.specs = [spec if isinstance(spec, LayerSpec) else LayerSpec(**spec) for spec in layers]
        self.blocks = []
        width = self.input_dim
        for spec in self.specs:
            dense = Dense(width, spec.out_features, rng, init)
            norm = BatchNorm(spec.out_features) if spec.batch_norm else None
            self.blocks.append((dense, norm, make_activation(spec.activation)))
            width = spec.out_features
        self.output_dim = width
        self._trace: List[Tuple[np.ndarray, np.ndarray]] = []

    def parameters(self) -> List[np.ndarray]:
        params = []
        for dense, norm, _ in self.blocks:
            params += [dense.weight, dense.bias]
            if norm is not None:
                params += [norm.gamma, norm.beta]
        return params

    def parameter_names(self) -> List[str]:
        names = []
        for i, (_, norm, _) in enumerate(self.blocks):
            names += [f"{i}.weight", f"{i}.bias"]
            if norm is not None:
                names += [f"{i}.bn.gamma", f"{i}.bn.beta"]
        return names

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ConfigError(
                "input width does not match the network", {"expected": self.input_dim, "got": int(x.shape[1])}
            )
        self._trace = []
        for dense, norm, act in self.blocks:
            z = dense.forward(x)
            if norm is not None:
                z = norm.forward(z, training)
            x = act(z)
            self._trace.append((z, x))
        return x

    def backward(self, upstream: np.ndarray):
        """Gradients of sum(upstream * output) w.r.t. parameters() and the input."""
        if len(self._trace) != len(self.blocks):
            raise ConfigError("backward called before forward")
        grads: List[np.ndarray] = []
        g = np.asarray(upstream, dtype=float)
        for (dense, norm, act), (z, a) in zip(reversed(self.blocks), reversed(self._trace)):
            g = act.grad(z, a, g)
            block_grads = []
            if norm is not None:
                norm_grads, g = norm.backward(g)
                block_grads = norm_grads
            dense_grads, g = dense.backward(g)
            grads = dense_grads + block_grads + grads
        return grads, g

    __call__ = forward

    # ── state ──────────────────────────────────────────────────

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = dict(zip(self.parameter_names(), (p.copy() for p in self.parameters())))
        for i, (_, norm, _) in enumerate(self.blocks):
            if norm is not None:
                state[f"{i}.bn.running_mean"] = norm.running_mean.copy()
                state[f"{i}.bn.running_var"] = norm.running_var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, param in zip(self.parameter_names(), self.parameters()):
            if name not in state or state[name].shape != param.shape:
                raise ConfigError(f"checkpoint tensor '{name}' is missing or has the wrong shape")
            param[...] = state[name]
        for i, (_, norm, _) in enumerate(self.blocks):
            if norm is not None:
                norm.running_mean = np.array(state[f"{i}.bn.running_mean"], dtype=float)
                norm.running_var = np.array(state[f"{i}.bn.running_var"], dtype=float)

    def to_spec(self) -> dict:
        return {"input_dim": self.input_dim, "layers": [asdict(s) for s in self.specs]}

    @classmethod
    def from_spec(cls, spec: dict) -> "Mlp":
        return cls(spec["input_dim"], [LayerSpec(**layer) for layer in spec["layers"]])


# ── architectures ──────────────────────────────────────────────

# Reference widths, for K = 800 individuals and m = 5000 SNVs
REFERENCE_NUM_INDIVIDUALS = 800
REFERENCE_NUM_SNVS = 5000
DEFENDER_WIDTHS = {"scalar": (1500, 1100, 500), "vector": (1000, 3000, 4600)}
ATTACKER_WIDTHS = {"defender": (3400, 2000), "dp": (3000, 1000)}


def default_q_aux(num_individuals: int) -> int:
    return int(np.ceil(num_individuals / 27))


def _scaled(widths: Sequence[int], num_snvs: int, minimum: int = 8) -> List[int]:
    if num_snvs == REFERENCE_NUM_SNVS:
        return list(widths)
    return [max(minimum, int(round(w * num_snvs / REFERENCE_NUM_SNVS))) for w in widths]


def defender_architecture(
    num_snvs: int,
    vector_kappa: bool = False,
    batch_norm: bool = True,
    hidden: Optional[Sequence[int]] = None,
    noise_range: Tuple[float, float] = (-0.5, 0.5),
) -> List[LayerSpec]:
    """Hidden ReLU, ReLU, LeakyReLU blocks, then m outputs in the noise range."""
    if tuple(noise_range) != (-0.5, 0.5):
        raise ConfigError("generator noise range is fixed to [-0.5, 0.5]")
    widths = list(hidden) if hidden else _scaled(DEFENDER_WIDTHS["vector" if vector_kappa else "scalar"], num_snvs)
    acts = ["relu"] * (len(widths) - 1) + ["leaky_relu"]
    layers = [LayerSpec(w, a, batch_norm) for w, a in zip(widths, acts)]
    return layers + [LayerSpec(num_snvs, "scaled_sigmoid", False)]


def attacker_architecture(
    num_individuals: int,
    num_snvs: int,
    against: str = "defender",
    batch_norm: bool = True,
    hidden: Optional[Sequence[int]] = None,
) -> List[LayerSpec]:
    """ReLU hidden blocks, then K sigmoid confidences."""
    if against not in ATTACKER_WIDTHS:
        raise ConfigError(f"unknown attacker architecture '{against}'", {"allowed": sorted(ATTACKER_WIDTHS)})
    widths = list(hidden) if hidden else _scaled(ATTACKER_WIDTHS[against], num_snvs)
    layers = [LayerSpec(w, "relu", batch_norm) for w in widths]
    return layers + [LayerSpec(num_individuals, "sigmoid", False)]
