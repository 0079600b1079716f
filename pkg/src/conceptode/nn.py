"""Small dense networks on a flat float64 parameter vector.

Every network used by the pipeline (encoder, decoder, latent field) is a plain
multi-layer perceptron whose parameters live in one contiguous 1-D array. That
makes whole-model optimizers (RMSProp/Adam/L-BFGS) and the adjoint parameter
gradient trivial to wire up: everything is vector arithmetic on flat arrays.

Reverse-mode derivatives are implemented by hand (`vjp`); they are checked
against central finite differences in the test suite, so there is no hidden
autodiff dependency anywhere in the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MlpSpec",
    "MlpParams",
    "init_kaiming",
    "forward",
    "vjp",
    "num_params",
    "save_params",
    "load_params",
]

# gain used for Kaiming fan-in initialisation, per nonlinearity
_GAINS = {"relu": np.sqrt(2.0), "tanh": 5.0 / 3.0}


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_deriv(z):
    # subgradient at exactly 0 is taken as 0
    return (z > 0.0).astype(np.float64)


def _tanh_deriv(z):
    t = np.tanh(z)
    return 1.0 - t * t


_ACTIVATIONS = {"relu": (_relu, _relu_deriv), "tanh": (np.tanh, _tanh_deriv)}


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network: dims plus hidden nonlinearity.

    The output layer is always affine (identity activation). ``hidden_dims``
    may be empty, in which case the network is a single affine map.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, input to output order."""
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_dim": self.input_dim,
                "hidden_dims": list(self.hidden_dims),
                "output_dim": self.output_dim,
                "activation": self.activation,
            }
        )

    @staticmethod
    def from_json(text: str) -> "MlpSpec":
        d = json.loads(text)
        return MlpSpec(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activation=str(d["activation"]),
        )


def _build_layout(spec: MlpSpec):
    """Offsets of each layer's weight block and bias block in the flat vector.

    Layer ``l`` with fan_in ``i`` and fan_out ``o`` stores W (o, i) row-major
    followed by b (o,).
    """
    layout = []
    off = 0
    for fan_in, fan_out in spec.layer_dims:
        w_off = off
        off += fan_in * fan_out
        b_off = off
        off += fan_out
        layout.append((w_off, (fan_out, fan_in), b_off))
    return tuple(layout), off


def num_params(spec: MlpSpec) -> int:
    """Total number of scalar parameters for the given architecture."""
    return _build_layout(spec)[1]


@dataclass
class MlpParams:
    """A spec together with its flat float64 parameter vector."""

    spec: MlpSpec
    values: np.ndarray
    layout: tuple = field(default=None, repr=False)  # derived, filled in post-init

    def __post_init__(self):
        layout, total = _build_layout(self.spec)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != total:
            raise ValueError(
                f"parameter vector has size {self.values.size}, spec needs {total}"
            )
        self.layout = layout

    def weight(self, layer: int) -> np.ndarray:
        """View of layer's weight matrix, shape (fan_out, fan_in)."""
        w_off, w_shape, _ = self.layout[layer]
        return self.values[w_off : w_off + w_shape[0] * w_shape[1]].reshape(w_shape)

    def bias(self, layer: int) -> np.ndarray:
        w_off, w_shape, b_off = self.layout[layer]
        return self.values[b_off : b_off + w_shape[0]]

    @property
    def n_layers(self) -> int:
        return len(self.layout)

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.values.copy())


def init_kaiming(spec: MlpSpec, seed: int) -> MlpParams:
    """Kaiming (fan-in, normal) initialisation; biases start at zero.

    Weights of every affine layer are drawn N(0, gain^2 / fan_in) where the
    gain matches the hidden nonlinearity (sqrt(2) for relu, 5/3 for tanh).
    """
    rng = np.random.default_rng(seed)
    gain = _GAINS[spec.activation]
    values = np.zeros(num_params(spec), dtype=np.float64)
    params = MlpParams(spec, values)
    for l, (fan_in, fan_out) in enumerate(spec.layer_dims):
        std = gain / np.sqrt(fan_in)
        params.weight(l)[...] = rng.normal(0.0, std, size=(fan_out, fan_in))
        # biases stay zero
    return params


def _promote(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"input must be a vector or a (batch, features) matrix, got ndim={x.ndim}")


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network. ``x`` is (features,) or (batch, features)."""
    spec = params.spec
    a, single = _promote(x)
    if a.shape[1] != spec.input_dim:
        raise ValueError(f"input has {a.shape[1]} features, spec expects {spec.input_dim}")
    act = _ACTIVATIONS[spec.activation][0]
    last = params.n_layers - 1
    for l in range(params.n_layers):
        a = a @ params.weight(l).T + params.bias(l)
        if l != last:
            a = act(a)
    return a[0] if single else a


def vjp(params: MlpParams, x: np.ndarray, cotangent: np.ndarray):
    """Vector-Jacobian product wrt the input and the flat parameters.

    Returns ``(grad_x, grad_values)``. For a batched input the parameter
    gradient is summed over the batch (standard reverse-mode semantics for a
    function whose outputs are stacked rows).
    """
    spec = params.spec
    a, single = _promote(x)
    cot, cot_single = _promote(cotangent)
    if single != cot_single or cot.shape != (a.shape[0], spec.output_dim):
        raise ValueError("cotangent shape does not match the network output")
    act, act_deriv = _ACTIVATIONS[spec.activation]

    # forward pass, caching layer inputs and pre-activations
    inputs = [a]
    pre = []
    last = params.n_layers - 1
    for l in range(params.n_layers):
        z = inputs[-1] @ params.weight(l).T + params.bias(l)
        pre.append(z)
        inputs.append(act(z) if l != last else z)

    grad_values = np.zeros_like(params.values)
    grads = MlpParams(spec, grad_values)  # layout views over the grad vector
    delta = cot
    for l in range(last, -1, -1):
        grads.weight(l)[...] = delta.T @ inputs[l]
        grads.bias(l)[...] = delta.sum(axis=0)
        delta = delta @ params.weight(l)
        if l > 0:
            delta = delta * act_deriv(pre[l - 1])
    grad_x = delta[0] if single else delta
    return grad_x, grad_values


def save_params(path, params: MlpParams) -> None:
    """Write spec + flat values to ``path`` (.npz); round-trips bit-exactly."""
    np.savez(path, spec=np.str_(params.spec.to_json()), values=params.values)


def load_params(path) -> MlpParams:
    with np.load(path, allow_pickle=False) as data:
        spec = MlpSpec.from_json(str(data["spec"]))
        values = np.array(data["values"], dtype=np.float64)
    return MlpParams(spec, values)
