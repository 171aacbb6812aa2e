"""Small input-checking helpers shared by the estimators and free functions."""

import numpy as np
import torch

from .exceptions import InvalidArgumentError

DTYPE = torch.float64


def as_tensor(x, name="x"):
    """Convert array-like input to a float64 tensor and reject non-finite values."""
    if isinstance(x, torch.Tensor):
        t = x.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if not torch.isfinite(t).all():
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return t


def check_states(x, d, name="h"):
    """Return ``(tensor of shape (n, d), was_1d)`` for a vector or batch of vectors."""
    t = as_tensor(x, name)
    single = t.ndim == 1
    if single:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a vector or a 2-D batch, got shape {tuple(t.shape)}")
    if d is not None and t.shape[1] != d:
        raise InvalidArgumentError(f"{name} has dimension {t.shape[1]}, expected {d}")
    return t, single


def restore(t, single):
    out = t.detach().numpy()
    return out[0] if single else out


def check_unit(v, name="v", atol=1e-8):
    v = as_tensor(v, name)
    if v.ndim != 1:
        raise InvalidArgumentError(f"{name} must be a vector")
    if abs(float(torch.linalg.vector_norm(v)) - 1.0) > atol:
        raise InvalidArgumentError(f"{name} must have unit norm")
    return v


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise InvalidArgumentError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
