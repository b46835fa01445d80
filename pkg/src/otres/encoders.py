"""Representation pretraining: behavior-clone an (encoder, actor) pair.

Phase 1 of the pipeline. The encoder maps observations to the feature
space used everywhere downstream (transport costs, retrieval, the residual
learner's inputs); the actor head exists to give the encoder a training
signal and doubles as the plain behavior-cloning baseline policy.

Freezing the encoder afterward keeps transport rewards stationary during
online learning: a frozen encoder's parameters can no longer be handed to
an optimizer (attempts raise), so a stored rollout re-embeds identically
at any later training step. A frozen encoder is immutable and safe to
share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demos import DemoSet
from .nets import (
    DenseNet,
    adam_init,
    adam_step,
    backward,
    forward,
    make_dense_net,
    net_parameters,
)

__all__ = [
    "Encoder",
    "EncoderFrozenError",
    "bc_pretrain",
    "encode",
    "freeze",
    "encoder_parameters",
    "BC_EARLY_STOP_MSE",
]

BC_EARLY_STOP_MSE = 1e-4

DEFAULT_Z_DIM = 32
DEFAULT_HIDDEN_DIM = 64
DEFAULT_BC_LR = 1e-3


class EncoderFrozenError(RuntimeError):
    """Raised on any attempt to obtain a frozen encoder's parameters for update."""


@dataclass
class Encoder:
    kind: str
    obs_dim: int
    z_dim: int
    net: DenseNet | None = None
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in ("identity", "mlp"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "identity":
            if self.net is not None:
                raise ValueError("identity encoders carry no net")
            if self.z_dim != self.obs_dim:
                raise ValueError("identity encoder requires z_dim == obs_dim")
        else:
            if self.net is None:
                raise ValueError("mlp encoder requires a net")
            if self.net.input_dim != self.obs_dim or self.net.output_dim != self.z_dim:
                raise ValueError(
                    f"net maps {self.net.input_dim}->{self.net.output_dim}, "
                    f"encoder declares {self.obs_dim}->{self.z_dim}"
                )


def encode(enc: Encoder, o) -> np.ndarray:
    """Embed one observation or a batch of row observations."""
    arr = np.asarray(o, dtype=np.float64)
    width = arr.shape[-1] if arr.ndim in (1, 2) else -1
    if width != enc.obs_dim:
        raise ValueError(f"observation shape {arr.shape} incompatible with obs_dim {enc.obs_dim}")
    if enc.kind == "identity":
        return arr.copy()
    return forward(enc.net, arr)


def freeze(enc: Encoder) -> Encoder:
    """Idempotent; afterwards encoder_parameters refuses to hand out params."""
    enc.frozen = True
    return enc


def encoder_parameters(enc: Encoder) -> list[np.ndarray]:
    """Parameter list for optimizer use. Frozen encoders refuse."""
    if enc.frozen:
        raise EncoderFrozenError("encoder frozen")
    if enc.kind == "identity":
        return []
    return net_parameters(enc.net)


def bc_pretrain(
    demos: DemoSet,
    epochs: int = 2000,
    lr: float = DEFAULT_BC_LR,
    seed: int = 0,
    z_dim: int = DEFAULT_Z_DIM,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
) -> tuple[Encoder, DenseNet, list[float]]:
    """Jointly fit encoder and actor to the demos with full-batch Adam MSE.

    The loss is the mean over demo pairs of the squared L2 error
    ||actor(encode(o)) - a||^2. Full-batch training keeps the result
    invariant under duplicating demo pairs and deterministic given the
    seed. The best parameters seen are snapshotted and restored at the
    end, and the history records the best-so-far fit per epoch (the fit
    you would get by stopping there), so it is non-increasing even when
    raw Adam steps transiently overshoot. Stops early once the fit drops
    below BC_EARLY_STOP_MSE.

    Returns the (unfrozen) encoder, the actor head, and the per-epoch
    best-so-far loss history.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    obs, act = demos.all_pairs()
    n = obs.shape[0]
    rng = np.random.default_rng(seed)
    enc_net = make_dense_net([demos.obs_dim, hidden_dim, z_dim], rng)
    actor = make_dense_net([z_dim, hidden_dim, demos.action_dim], rng)
    encoder = Encoder(kind="mlp", obs_dim=demos.obs_dim, z_dim=z_dim, net=enc_net)

    params = net_parameters(enc_net) + net_parameters(actor)
    opt = adam_init(params, lr=lr)
    history: list[float] = []
    best = np.inf
    best_params = [p.copy() for p in params]
    for _ in range(epochs):
        z = forward(enc_net, obs)
        err = forward(actor, z) - act
        with np.errstate(over="ignore"):
            loss = float(np.mean(np.sum(err * err, axis=1)))
        if not np.isfinite(loss):
            raise RuntimeError(f"behavior cloning diverged: loss {loss}")
        if loss < best:
            best = loss
            for keep, p in zip(best_params, params):
                keep[...] = p
        history.append(best)
        if best < BC_EARLY_STOP_MSE:
            break
        actor_grads, dz = backward(actor, z, (2.0 / n) * err)
        enc_grads, _ = backward(enc_net, obs, dz)
        adam_step(params, enc_grads + actor_grads, opt)
    for p, keep in zip(params, best_params):
        p[...] = keep
    return encoder, actor, history
