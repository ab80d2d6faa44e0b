"""
AdamW and the two learning-rate schedules used for training.
"""
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from hsvlt.core.errors import ContainerError
from hsvlt.core.nn import Parameter


def decays(param: Parameter) -> bool:
    """Weight decay applies to matrices and kernels; biases and norm affines are exempt."""
    return param.ndim > 1


class AdamW:
    """
    Adam with decoupled weight decay, in the same order as torch.optim.AdamW:
    p *= 1 - lr * wd; m, v updated; p -= (lr / bc1) * m / (sqrt(v) / sqrt(bc2) + eps).
    """

    def __init__(self, named_parameters: Sequence[Tuple[str, Parameter]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.named_parameters: List[Tuple[str, Parameter]] = list(named_parameters)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.exp_avg: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.named_parameters}
        self.exp_avg_sq: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.named_parameters}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bias_correction1 = 1.0 - self.beta1 ** self.t
        bias_correction2 = 1.0 - self.beta2 ** self.t
        step_size = lr / bias_correction1
        for name, param in self.named_parameters:
            if param.grad is None:
                continue
            grad = param.grad
            if self.weight_decay and decays(param):
                param.data *= 1.0 - lr * self.weight_decay
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            denom = np.sqrt(v) / math.sqrt(bias_correction2) + self.eps
            param.data -= step_size * m / denom

    def zero_grad(self) -> None:
        for _, param in self.named_parameters:
            param.zero_grad()

    def state_dict(self) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], int]:
        return ({n: a.copy() for n, a in self.exp_avg.items()},
                {n: a.copy() for n, a in self.exp_avg_sq.items()},
                self.t)

    def load_state_dict(self, exp_avg: Dict[str, np.ndarray], exp_avg_sq: Dict[str, np.ndarray], t: int) -> None:
        names = set(self.exp_avg)
        if set(exp_avg) != names or set(exp_avg_sq) != names:
            raise ContainerError("optimizer moments do not match the model parameters")
        for name, param in self.named_parameters:
            self.exp_avg[name] = np.asarray(exp_avg[name], dtype=param.dtype).copy()
            self.exp_avg_sq[name] = np.asarray(exp_avg_sq[name], dtype=param.dtype).copy()
        self.t = int(t)


class PolyLRScheduler:
    """lr at step s of S planned steps = base_lr * (1 - s / S) ** power."""

    def __init__(self, base_lr: float, total_steps: int, power: float = 0.9):
        self.base_lr = base_lr
        self.total_steps = max(int(total_steps), 1)
        self.power = power

    def lr_at(self, step: int) -> float:
        progress = min(step / self.total_steps, 1.0)
        return self.base_lr * (1.0 - progress) ** self.power

    def end_epoch(self, epoch_loss: float) -> None:
        pass

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class PlateauLRScheduler:
    """
    Constant lr, multiplied by `factor` once the epoch loss has failed to
    improve on its best value (relative threshold 1e-4) for more than
    `patience` consecutive epochs.
    """

    THRESHOLD = 1e-4

    def __init__(self, base_lr: float, patience: int = 5, factor: float = 0.1):
        self.base_lr = base_lr
        self.patience = patience
        self.factor = factor
        self.scale = 1.0
        self.best = math.inf
        self.bad_epochs = 0

    def lr_at(self, step: int) -> float:
        return self.base_lr * self.scale

    def end_epoch(self, epoch_loss: float) -> None:
        if epoch_loss < self.best * (1.0 - self.THRESHOLD):
            self.best = epoch_loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.scale *= self.factor
            self.bad_epochs = 0

    def state_dict(self) -> dict:
        return {"scale": self.scale, "best": None if math.isinf(self.best) else self.best,
                "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state: dict) -> None:
        self.scale = float(state.get("scale", 1.0))
        best = state.get("best")
        self.best = math.inf if best is None else float(best)
        self.bad_epochs = int(state.get("bad_epochs", 0))
