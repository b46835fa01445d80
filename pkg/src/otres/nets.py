"""Dense-network machinery: forward pass, exact gradients, Adam, soft updates.

Small enough to audit by hand: plain float64 numpy, no autodiff graph.
Networks are stacks of affine layers with relu/tanh/identity activations,
stored column-convention (y = W x + b, W shaped out x in). `backward`
returns exact analytic gradients of <upstream, forward(x)>, which is all
the actor, critic, and encoder losses need.

Networks are plain values: reads are safe to share, updates require the
single-writer discipline the training loop already provides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Layer",
    "DenseNet",
    "AdamState",
    "NonFiniteGradientError",
    "orthogonal_matrix",
    "make_dense_net",
    "net_parameters",
    "clone_net",
    "forward",
    "backward",
    "adam_init",
    "adam_step",
    "soft_update",
    "net_tensors",
    "net_from_tensors",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_VERSION = 1


class NonFiniteGradientError(RuntimeError):
    """A gradient contained nan/inf; training must halt rather than corrupt weights."""


@dataclass
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} != output dim {self.weights.shape[0]}"
            )


@dataclass
class DenseNet:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a net needs at least one layer")
        for k in range(1, len(self.layers)):
            prev_out = self.layers[k - 1].weights.shape[0]
            cur_in = self.layers[k].weights.shape[1]
            if prev_out != cur_in:
                raise ValueError(
                    f"layer {k} input dim {cur_in} != layer {k - 1} output dim {prev_out}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]


def orthogonal_matrix(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Matrix with orthonormal rows (rows <= cols) or columns (rows >= cols)."""
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q)


def make_dense_net(
    sizes: list[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    zero_final: bool = False,
) -> DenseNet:
    """Net with orthogonal weights and zero biases.

    ``sizes`` runs input -> hidden... -> output. ``zero_final`` zeroes the
    last layer's weights so the net starts as the constant zero function
    (used for the residual actor so early actions equal the base policy).
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = []
    for k in range(len(sizes) - 1):
        out_dim, in_dim = sizes[k + 1], sizes[k]
        last = k == len(sizes) - 2
        W = (
            np.zeros((out_dim, in_dim))
            if (zero_final and last)
            else orthogonal_matrix(out_dim, in_dim, rng)
        )
        layers.append(
            Layer(
                weights=W,
                bias=np.zeros(out_dim),
                activation=output_activation if last else hidden_activation,
            )
        )
    return DenseNet(layers=layers)


def net_parameters(net: DenseNet) -> list[np.ndarray]:
    """Flat parameter list in layer order: W0, b0, W1, b1, ..."""
    out = []
    for layer in net.layers:
        out.append(layer.weights)
        out.append(layer.bias)
    return out


def clone_net(net: DenseNet) -> DenseNet:
    return DenseNet(
        layers=[
            Layer(weights=l.weights.copy(), bias=l.bias.copy(), activation=l.activation)
            for l in net.layers
        ]
    )


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the net on one input vector or a batch of row vectors."""
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ValueError(f"input shape {np.shape(x)} incompatible with input_dim {net.input_dim}")
    for layer in net.layers:
        h = _apply_activation(h @ layer.weights.T + layer.bias, layer.activation)
    return h[0] if single else h


def backward(net: DenseNet, x, upstream_grad):
    """Exact gradients of <upstream_grad, forward(net, x)>.

    Returns ``(param_grads, input_grad)`` where param_grads is a flat list
    matching :func:`net_parameters` order. Batched inputs sum the parameter
    gradients over the batch; input_grad keeps the batch shape.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    single = x_arr.ndim == 1
    if single:
        x_arr = x_arr[None, :]
        g = g[None, :]
    if x_arr.shape[1] != net.input_dim:
        raise ValueError(f"input shape {np.shape(x)} incompatible with input_dim {net.input_dim}")
    if g.shape != (x_arr.shape[0], net.output_dim):
        raise ValueError(
            f"upstream shape {np.shape(upstream_grad)} incompatible with "
            f"output_dim {net.output_dim} and batch {x_arr.shape[0]}"
        )

    pre = []
    post = [x_arr]
    h = x_arr
    for layer in net.layers:
        z = h @ layer.weights.T + layer.bias
        pre.append(z)
        h = _apply_activation(z, layer.activation)
        post.append(h)

    param_grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    delta = g
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            delta = delta * (pre[k] > 0.0)
        elif layer.activation == "tanh":
            delta = delta * (1.0 - post[k + 1] ** 2)
        param_grads[2 * k] = delta.T @ post[k]
        param_grads[2 * k + 1] = delta.sum(axis=0)
        delta = delta @ layer.weights
    return param_grads, (delta[0] if single else delta)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps_hat: float


def adam_init(
    params: list[np.ndarray],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
) -> AdamState:
    if lr <= 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    return AdamState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        step_count=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps_hat=eps_hat,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Bias-corrected Adam update, in place on params and state.

    Returns ``(params, state)`` for call-site convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads, and state must have matching lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient (step {state.step_count + 1}, shape {g.shape})"
            )
    state.step_count += 1
    b1c = 1.0 - state.beta1 ** state.step_count
    b2c = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps_hat)
    return params, state


def soft_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    """Polyak-average online parameters into the target, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if len(target.layers) != len(online.layers):
        raise ValueError("architecture mismatch: different layer counts")
    for lt, lo in zip(target.layers, online.layers):
        if lt.weights.shape != lo.weights.shape or lt.activation != lo.activation:
            raise ValueError("architecture mismatch between target and online layers")
        lt.weights *= 1.0 - tau
        lt.weights += tau * lo.weights
        lt.bias *= 1.0 - tau
        lt.bias += tau * lo.bias
    return target


def net_tensors(net: DenseNet, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a net into named tensors for checkpointing."""
    out: dict[str, np.ndarray] = {}
    for k, layer in enumerate(net.layers):
        out[f"{prefix}.layer{k}.weights"] = layer.weights
        out[f"{prefix}.layer{k}.bias"] = layer.bias
        out[f"{prefix}.layer{k}.activation"] = np.array(layer.activation)
    return out


def net_from_tensors(tensors: dict[str, np.ndarray], prefix: str) -> DenseNet:
    layers = []
    k = 0
    while f"{prefix}.layer{k}.weights" in tensors:
        layers.append(
            Layer(
                weights=np.array(tensors[f"{prefix}.layer{k}.weights"], dtype=np.float64),
                bias=np.array(tensors[f"{prefix}.layer{k}.bias"], dtype=np.float64),
                activation=str(tensors[f"{prefix}.layer{k}.activation"]),
            )
        )
        k += 1
    if not layers:
        raise KeyError(f"no layers found under prefix {prefix!r}")
    return DenseNet(layers=layers)


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to a single .npz file (bit-exact round-trip)."""
    payload = dict(tensors)
    payload["__checkpoint_version__"] = np.array(CHECKPOINT_VERSION)
    np.savez(path, **payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        tensors = {k: data[k] for k in data.files}
    version = int(tensors.pop("__checkpoint_version__", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return tensors
