"""Minimal feed-forward stack with exact analytic gradients.

Shared by the inquiry policy, its value baseline, and the screening
classifier. Everything is float64 and batch-first; backward passes are
hand-derived and checked against central finite differences in the tests.
No autodiff, no GPU: desk-scale problems keep full precision cheap and
reruns bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._core import masked_softmax_1d

ACTIVATIONS = ("relu", "tanh", "identity")

WEIGHTS_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or gradient; training aborts loudly."""


class WeightsFormatError(ValueError):
    pass


class WeightsVersionError(WeightsFormatError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str


@dataclass
class Mlp:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]


def mlp_init(sizes, activations, rng: np.random.Generator) -> Mlp:
    """He-style init for relu layers, Xavier otherwise; float64 params."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for n_in, n_out, activation in zip(sizes, sizes[1:], activations):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        scale = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(1.0 / n_in)
        layers.append(
            Layer(
                weight=rng.normal(0.0, scale, (n_out, n_in)),
                bias=np.zeros(n_out),
                activation=activation,
            )
        )
    return Mlp(layers=layers)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _dact(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def forward(mlp: Mlp, x: np.ndarray):
    """Batched forward pass; returns (output, cache for backward)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != mlp.input_dim:
        raise ValueError(f"input width {x.shape[1]} != {mlp.input_dim}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite network input")
    cache = []
    for layer in mlp.layers:
        z = x @ layer.weight.T + layer.bias
        cache.append((x, z))
        x = _act(z, layer.activation)
    return x, cache


def backward(mlp: Mlp, cache, dy: np.ndarray):
    """Exact gradients of a scalar loss through the cached forward pass.

    dy is dLoss/dOutput with the batch convention already applied by the
    caller. Returns ([(dW, db) per layer], dLoss/dInput).
    """
    dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.layers)
    for idx in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[idx]
        x, z = cache[idx]
        dz = dy * _dact(z, layer.activation)
        grads[idx] = (dz.T @ x, dz.sum(axis=0))
        dy = dz @ layer.weight
    return grads, dy


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Probabilities supported exactly on the mask; stable via max-shift.

    1D inputs go through the core kernel (the rollout hot path); 2D inputs
    are handled as a batch with a per-row mask.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim == 1:
        return masked_softmax_1d(logits, mask)
    if not mask.any(axis=1).all():
        raise ValueError("masked_softmax: a row has no set mask bits")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    expv = np.where(mask, np.exp(shifted), 0.0)
    return expv / expv.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-log p[label], clipped at 1e-12 so impossible labels stay finite."""
    p = float(np.asarray(probs)[label])
    return -float(np.log(max(p, 1e-12)))


def cross_entropy_grad(probs: np.ndarray, label: int) -> np.ndarray:
    grad = np.zeros_like(np.asarray(probs, dtype=np.float64))
    grad[label] = -1.0 / max(float(probs[label]), 1e-12)
    return grad


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, dLoss/dlogits); the fused gradient (p - onehot)/n avoids
    the intermediate probability gradient entirely.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def adam_init(params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params, grads, state: AdamState):
    """Standard bias-corrected Adam update, applied in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    scale = state.lr * np.sqrt(1.0 - b2**state.step) / (1.0 - b1**state.step)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.isfinite(g).all():
            raise TrainingDivergedError("non-finite gradient")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= scale * m / (np.sqrt(v) + state.eps)
    return params


def parameters(mlp: Mlp) -> list[np.ndarray]:
    out = []
    for layer in mlp.layers:
        out.append(layer.weight)
        out.append(layer.bias)
    return out


def param_vector(params) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_param_vector(params, vector: np.ndarray) -> None:
    pos = 0
    for p in params:
        p[...] = vector[pos : pos + p.size].reshape(p.shape)
        pos += p.size
    if pos != vector.size:
        raise ValueError("parameter vector size mismatch")


# ---------------------------------------------------------------------------
# actor-critic: shared trunk, policy and value heads
# ---------------------------------------------------------------------------


@dataclass
class ActorCritic:
    trunk: Mlp
    policy_head: Mlp
    value_head: Mlp

    @property
    def obs_dim(self) -> int:
        return self.trunk.input_dim

    @property
    def n_actions(self) -> int:
        return self.policy_head.output_dim


def actor_critic_init(
    obs_dim: int,
    n_actions: int,
    rng: np.random.Generator,
    trunk_hidden=(256, 256),
    head_hidden=(128,),
) -> ActorCritic:
    trunk_sizes = [obs_dim, *trunk_hidden]
    trunk = mlp_init(trunk_sizes, ["relu"] * len(trunk_hidden), rng)
    rep = trunk_sizes[-1]
    policy = mlp_init([rep, *head_hidden, n_actions], ["relu"] * len(head_hidden) + ["identity"], rng)
    value = mlp_init([rep, *head_hidden, 1], ["relu"] * len(head_hidden) + ["identity"], rng)
    # small initial logits keep the starting policy near-uniform on the mask
    policy.layers[-1].weight *= 0.01
    policy.layers[-1].bias *= 0.0
    return ActorCritic(trunk=trunk, policy_head=policy, value_head=value)


def policy_value(ac: ActorCritic, obs: np.ndarray):
    """Forward both heads; returns (logits, values, cache)."""
    rep, trunk_cache = forward(ac.trunk, obs)
    logits, policy_cache = forward(ac.policy_head, rep)
    values, value_cache = forward(ac.value_head, rep)
    return logits, values[:, 0], (trunk_cache, policy_cache, value_cache)


def actor_critic_backward(ac: ActorCritic, cache, dlogits, dvalues):
    """Gradients for all parameters given head output gradients."""
    trunk_cache, policy_cache, value_cache = cache
    policy_grads, drep_policy = backward(ac.policy_head, policy_cache, dlogits)
    value_grads, drep_value = backward(
        ac.value_head, value_cache, np.asarray(dvalues)[:, None]
    )
    trunk_grads, _ = backward(ac.trunk, trunk_cache, drep_policy + drep_value)
    flat = []
    for grad_list in (trunk_grads, policy_grads, value_grads):
        for dw, db in grad_list:
            flat.append(dw)
            flat.append(db)
    return flat


def actor_critic_parameters(ac: ActorCritic) -> list[np.ndarray]:
    return parameters(ac.trunk) + parameters(ac.policy_head) + parameters(ac.value_head)


# ---------------------------------------------------------------------------
# weight files: versioned JSON, full float64 round-trip
# ---------------------------------------------------------------------------


def _mlp_doc(mlp: Mlp) -> dict:
    return {
        "layer_sizes": [mlp.input_dim] + [layer.weight.shape[0] for layer in mlp.layers],
        "activations": [layer.activation for layer in mlp.layers],
        "parameters": [
            arr
            for layer in mlp.layers
            for arr in (layer.weight.ravel().tolist(), layer.bias.tolist())
        ],
    }


def _mlp_from_doc(doc: dict) -> Mlp:
    sizes = doc["layer_sizes"]
    activations = doc["activations"]
    params = doc["parameters"]
    if len(params) != 2 * len(activations) or len(sizes) != len(activations) + 1:
        raise WeightsFormatError("layer structure inconsistent with parameters")
    layers = []
    for i, activation in enumerate(activations):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = np.array(params[2 * i], dtype=np.float64)
        b = np.array(params[2 * i + 1], dtype=np.float64)
        if w.size != n_in * n_out or b.size != n_out:
            raise WeightsFormatError(
                f"layer {i}: expected {n_in * n_out}+{n_out} values, "
                f"got {w.size}+{b.size}"
            )
        layers.append(Layer(weight=w.reshape(n_out, n_in), bias=b, activation=activation))
    return Mlp(layers=layers)


def save_weights(model, path) -> None:
    if isinstance(model, ActorCritic):
        doc = {
            "format_version": WEIGHTS_FORMAT_VERSION,
            "kind": "actor_critic",
            "trunk": _mlp_doc(model.trunk),
            "policy_head": _mlp_doc(model.policy_head),
            "value_head": _mlp_doc(model.value_head),
        }
    elif isinstance(model, Mlp):
        doc = {"format_version": WEIGHTS_FORMAT_VERSION, "kind": "mlp", **_mlp_doc(model)}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_weights(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise WeightsFormatError(f"corrupt weights file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise WeightsFormatError(f"{path}: not a weights document")
    version = doc["format_version"]
    if version != WEIGHTS_FORMAT_VERSION:
        raise WeightsVersionError(
            f"{path}: file format version {version}, this reader supports "
            f"version {WEIGHTS_FORMAT_VERSION}"
        )
    kind = doc.get("kind")
    if kind == "mlp":
        return _mlp_from_doc(doc)
    if kind == "actor_critic":
        return ActorCritic(
            trunk=_mlp_from_doc(doc["trunk"]),
            policy_head=_mlp_from_doc(doc["policy_head"]),
            value_head=_mlp_from_doc(doc["value_head"]),
        )
    raise WeightsFormatError(f"{path}: unknown model kind {kind!r}")
