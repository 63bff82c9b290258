"""
Optimizer module for boxboost
AdamW with bias-corrected moments and decoupled weight decay
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from errors import ConfigError, ParameterError, ShapeError
from toynet import NetworkState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr > 0:
            raise ParameterError(f"Learning rate must be positive, got {self.lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ParameterError(f"betas must be two values in [0, 1), got {self.betas}")
        if not self.eps > 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")
        if not self.weight_decay >= 0:
            raise ParameterError(f"weight_decay must be non-negative, got {self.weight_decay}")

    def to_dict(self) -> Dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, data: Dict) -> "AdamWConfig":
        unknown = set(data) - {"lr", "betas", "eps", "weight_decay"}
        if unknown:
            raise ConfigError(f"Unknown AdamW config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AdamWState:
    """First and second moment buffers, one pair per parameter"""

    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
               cfg: AdamWConfig, t: int, state: AdamWState) -> Dict[str, np.ndarray]:
    """
    One AdamW update

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * theta

    Args:
        params: Current parameter values (not modified)
        grads: Gradients with the same names and shapes
        cfg: Hyperparameters
        t: 1-based step number used for bias correction
        state: Moment buffers, updated in place

    Returns:
        New parameter values
    """
    if t < 1:
        raise ParameterError(f"AdamW step number must be >= 1, got {t}")
    beta1, beta2 = cfg.betas
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t

    updated = {}
    for name in sorted(params):
        theta = params[name]
        grad = grads[name]
        if grad.shape != theta.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, expected {theta.shape}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        elif m.shape != theta.shape:
            raise ShapeError(f"Moment buffer for {name} has shape {m.shape}, expected {theta.shape}")

        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v

        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps) - cfg.lr * cfg.weight_decay * theta
    return updated


class AdamW:
    """Optimizer bound to one network"""

    def __init__(self, network: NetworkState, cfg: AdamWConfig = AdamWConfig()):
        self.network = network
        self.cfg = cfg
        self.state = AdamWState()
        logger.debug(f"AdamW for architecture {network.config.arch_id}: {cfg.to_dict()}")

    def step(self, grads: Dict[str, np.ndarray]):
        t = self.network.step + 1
        self.network.update(adamw_step(self.network.params, grads, self.cfg, t, self.state))
        self.network.step = t
