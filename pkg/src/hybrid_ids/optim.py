"""Parameter update rules: sgd, adagrad, rmsprop, adam, adamax.

With gradient ``g``, parameter ``p`` and step counter ``t`` (1 on the first
call):

=========  ==============================================================
sgd        ``p -= lr * g``
adagrad    ``G += g**2``; ``p -= lr * g / (sqrt(G) + eps)``
rmsprop    ``v = rho*v + (1-rho)*g**2``; ``p -= lr * g / (sqrt(v) + eps)``
adam       ``m = b1*m + (1-b1)*g``; ``v = b2*v + (1-b2)*g**2``;
           ``p -= lr * m_hat / (sqrt(v_hat) + eps)`` with
           ``m_hat = m/(1-b1**t)``, ``v_hat = v/(1-b2**t)``
adamax     ``m = b1*m + (1-b1)*g``; ``u = max(b2*u, |g|)``;
           ``p -= lr/(1-b1**t) * m / (u + eps)``
=========  ==============================================================

``eps`` always sits in the denominator after the square root (or after the
infinity norm for adamax).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ConsistencyError, DimensionError, NumericError

OPTIMIZERS = ("sgd", "adagrad", "rmsprop", "adam", "adamax")
DEFAULT_LR = {"sgd": 0.01, "adagrad": 0.01, "rmsprop": 0.001, "adam": 0.001, "adamax": 0.001}
_SLOTS = {"sgd": (), "adagrad": ("accum",), "rmsprop": ("sq",), "adam": ("m", "v"), "adamax": ("m", "u")}


@dataclass
class OptimizerState:
    kind: str
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    eps: float = 1e-8
    t: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.kind]
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return step(self, params, grads)


def step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Apply one update to every array in ``params``, in place. Returns ``params``."""
    for name, p in params.items():
        if name not in grads:
            raise ConsistencyError(f"no gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    state.t += 1
    t, lr, eps = state.t, state.lr, state.eps
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        slots = state.slots.get(name)
        if slots is None:
            slots = state.slots[name] = {s: np.zeros_like(p) for s in _SLOTS[state.kind]}

        if state.kind == "sgd":
            p -= lr * g
        elif state.kind == "adagrad":
            slots["accum"] += g * g
            p -= lr * g / (np.sqrt(slots["accum"]) + eps)
        elif state.kind == "rmsprop":
            sq = slots["sq"]
            sq *= state.rho
            sq += (1.0 - state.rho) * g * g
            p -= lr * g / (np.sqrt(sq) + eps)
        elif state.kind == "adam":
            m, v = slots["m"], slots["v"]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            m, u = slots["m"], slots["u"]
            m *= b1
            m += (1.0 - b1) * g
            np.maximum(b2 * u, np.abs(g), out=u)
            p -= (lr / (1.0 - b1**t)) * m / (u + eps)
    return params


def effective_rate(state: OptimizerState, name: str) -> np.ndarray | float:
    """Per-coordinate multiplier on the raw gradient (adagrad/rmsprop), or ``lr``."""
    if state.kind == "adagrad":
        return state.lr / (np.sqrt(state.slots[name]["accum"]) + state.eps)
    if state.kind == "rmsprop":
        return state.lr / (np.sqrt(state.slots[name]["sq"]) + state.eps)
    return state.lr
