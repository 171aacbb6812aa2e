"""Intervention primitives on single hidden states or batches of them.

Linear steering (add scaled orthonormal directions), its change-of-basis form
through an orthogonal map, the non-linear form through any invertible feature
map, interchange of feature coordinates between two states, clamping a feature
coordinate to a cached value, and the difference-in-means baseline with its
ablation and activation-addition schemes.
"""

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DTYPE, as_tensor, check_states, check_unit, restore
from .exceptions import DegenerateDirectionError, InvalidArgumentError
from .featmap import LinearFeatureMap
from .serialization import dump_container, load_container

__all__ = [
    "InterventionSpec",
    "SteeringDirection",
    "DiffInMeans",
    "linear_intervene",
    "basis_intervene",
    "nonlinear_intervene",
    "interchange",
    "clamp_to_mean",
    "dim_direction",
    "ablate",
    "actadd",
]

ADD = "add"
CLAMP = "clamp"


@dataclass(frozen=True)
class InterventionSpec:
    """Targeted feature coordinates with one coefficient each.

    In ``add`` mode the coefficients are offsets; in ``clamp`` mode they are
    the values the coordinates are set to.
    """

    coords: tuple
    alphas: tuple
    mode: str = ADD

    def __post_init__(self):
        coords = tuple(int(c) for c in np.atleast_1d(self.coords))
        alphas = tuple(float(a) for a in np.atleast_1d(self.alphas))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "alphas", alphas)
        if len(coords) != len(alphas):
            raise InvalidArgumentError("coords and alphas must have the same length")
        if len(set(coords)) != len(coords):
            raise InvalidArgumentError("coords must be distinct")
        if self.mode not in (ADD, CLAMP):
            raise InvalidArgumentError(f"mode must be 'add' or 'clamp', got {self.mode!r}")

    def check(self, d):
        if any(c < 0 or c >= d for c in self.coords):
            raise InvalidArgumentError(f"coords must lie in [0, {d})")
        return self


@dataclass(frozen=True)
class SteeringDirection:
    """A unit direction plus the scheme used to apply it.

    ``v`` points from the compliant class mean toward the refusing class mean,
    so bypassing refusal with ``actadd`` uses a negative ``alpha``.
    """

    v: np.ndarray
    scheme: str = "ablation"
    alpha: float = 0.0
    scope: str = "all"

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > 1e-10:
            raise InvalidArgumentError("steering direction must have unit norm")
        if self.scheme not in ("ablation", "actadd"):
            raise InvalidArgumentError(f"unknown scheme {self.scheme!r}")
        object.__setattr__(self, "v", v)

    def apply(self, h):
        if self.scheme == "ablation":
            return ablate(h, self.v)
        return actadd(h, self.v, self.alpha)

    def save(self, path=None):
        payload = {"d": int(self.v.size), "v": self.v.tolist(), "scheme": self.scheme,
                   "alpha": float(self.alpha), "scope": self.scope}
        return dump_container("steering_direction", payload, path)

    @classmethod
    def load(cls, source):
        _, p = load_container(source, "steering_direction")
        return cls(np.asarray(p["v"], dtype=np.float64), p["scheme"], p["alpha"], p["scope"])


def _offsets(spec, n, d, like):
    delta = torch.zeros((n, d), dtype=DTYPE)
    for c, a in zip(spec.coords, spec.alphas):
        delta[:, c] = a
    return delta.to(like.dtype)


def _torch_linear(h, dirs, alphas):
    return h + (alphas.unsqueeze(-1) * dirs).sum(0)


def linear_intervene(h, dirs, alphas):
    """``h + sum_i alpha_i v_i`` for orthonormal rows ``dirs``."""
    V = as_tensor(dirs, "dirs")
    if V.ndim == 1:
        V = V.unsqueeze(0)
    a = as_tensor(alphas, "alphas").reshape(-1)
    if a.shape[0] != V.shape[0]:
        raise InvalidArgumentError("need one alpha per direction")
    gram = V @ V.T
    if float(torch.max(torch.abs(gram - torch.eye(V.shape[0], dtype=DTYPE)))) > 1e-8:
        raise InvalidArgumentError("directions must be orthonormal")
    ht, single = check_states(h, V.shape[1])
    return restore(_torch_linear(ht, V, a), single)


def basis_intervene(h, fmap, spec):
    """``W^-1 (W h + sum_i alpha_i e_i)`` for an orthogonal linear feature map."""
    if not isinstance(fmap, LinearFeatureMap):
        raise InvalidArgumentError("basis_intervene needs a LinearFeatureMap")
    if spec.mode != ADD:
        raise InvalidArgumentError("basis_intervene only supports add mode")
    check_is_fitted(fmap)
    spec.check(fmap.n_features_in_)
    ht, single = check_states(h, fmap.n_features_in_)
    with torch.no_grad():
        W = fmap.W
        z = ht @ W.T + _offsets(spec, ht.shape[0], ht.shape[1], ht)
        out = z @ W
    return restore(out, single)


def apply_nonlinear(fmap, h, spec, strict=True):
    """Torch-level core of :func:`nonlinear_intervene`; differentiable and batched."""
    z = fmap.forward(h)
    coords = list(spec.coords)
    target = torch.as_tensor(spec.alphas, dtype=h.dtype).expand(h.shape[0], -1)
    if spec.mode == ADD:
        z_new = z.clone()
        z_new[:, coords] = z[:, coords] + target
    else:
        z_new = z.clone()
        z_new[:, coords] = target
    x, _ = fmap.inverse(z_new, strict=strict)
    return x


def apply_interchange(fmap, h_minus, h_plus, coords, strict=True):
    """Torch-level interchange: coordinates ``coords`` of ``f(h_minus)`` take ``f(h_plus)``'s values."""
    z_minus = fmap.forward(h_minus)
    z_plus = fmap.forward(h_plus)
    coords = list(coords)
    alpha = z_plus[:, coords] - z_minus[:, coords]
    z_new = z_minus.clone()
    z_new[:, coords] = z_minus[:, coords] + alpha
    x, _ = fmap.inverse(z_new, strict=strict)
    return x


def nonlinear_intervene(h, fmap, spec):
    """``f^-1(f(h) + sum_i alpha_i e_i)``; in clamp mode the coordinates are set instead.

    Inversion failures propagate as :class:`~invsteer.exceptions.InversionError`.
    """
    check_is_fitted(fmap)
    spec.check(fmap.n_features_in_)
    ht, single = check_states(h, fmap.n_features_in_)
    with torch.no_grad():
        out = apply_nonlinear(fmap, ht, spec)
    return restore(out, single)


def interchange(h_minus, h_plus, fmap, coords=(0,)):
    """Move the targeted feature coordinates of ``h_plus`` into ``h_minus``."""
    check_is_fitted(fmap)
    d = fmap.n_features_in_
    InterventionSpec(tuple(coords), tuple(0.0 for _ in coords)).check(d)
    hm, single = check_states(h_minus, d, "h_minus")
    hp, _ = check_states(h_plus, d, "h_plus")
    if hp.shape != hm.shape:
        raise InvalidArgumentError("h_minus and h_plus must have the same shape")
    with torch.no_grad():
        out = apply_interchange(fmap, hm, hp, coords)
    return restore(out, single)


def clamp_to_mean(h, fmap, coord, mu_bar_plus):
    """Set feature coordinate ``coord`` of ``f(h)`` to ``mu_bar_plus`` and map back."""
    if not np.isfinite(mu_bar_plus):
        raise InvalidArgumentError("mu_bar_plus must be finite")
    return nonlinear_intervene(h, fmap, InterventionSpec((coord,), (mu_bar_plus,), CLAMP))


def dim_direction(acts_plus, acts_minus, scheme="ablation", alpha=None, scope="all"):
    """Unit class-mean difference pointing toward the refusing (minus) class.

    ``alpha`` defaults to minus the projection gap between the class means, so
    ``actadd`` pushes refusing states toward the compliant mean.
    """
    P = np.asarray(acts_plus, dtype=np.float64)
    M = np.asarray(acts_minus, dtype=np.float64)
    if P.ndim != 2 or M.ndim != 2 or len(P) == 0 or len(M) == 0:
        raise InvalidArgumentError("activation sets must be non-empty 2-D arrays")
    diff = M.mean(axis=0) - P.mean(axis=0)
    norm = np.linalg.norm(diff)
    if norm < 1e-10:
        raise DegenerateDirectionError("class means coincide; no direction to extract")
    if alpha is None:
        alpha = -norm
    return SteeringDirection(diff / norm, scheme, float(alpha), scope)


def _torch_ablate(h, v):
    return h - (h @ v).unsqueeze(-1) * v


def ablate(h, v):
    """Remove the component of ``h`` along unit vector ``v``."""
    vt = check_unit(v)
    ht, single = check_states(h, vt.shape[0])
    return restore(_torch_ablate(ht, vt), single)


def actadd(h, v, alpha):
    """``h + alpha v`` for unit ``v``."""
    vt = check_unit(v)
    ht, single = check_states(h, vt.shape[0])
    return restore(ht + float(alpha) * vt, single)


class DiffInMeans(TransformerMixin, BaseEstimator):
    """Difference-in-means steering as a transformer on hidden states.

    ``fit(X, y)`` takes hidden states with labels (1 = comply, 0 = refuse);
    ``transform`` applies the fitted direction with the chosen scheme.
    """

    def __init__(self, scheme="ablation", alpha=None):
        self.scheme = scheme
        self.alpha = alpha

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2 or len(X) != len(y):
            raise InvalidArgumentError("X must be (n, d) with one label per row")
        self.direction_ = dim_direction(X[y == 1], X[y == 0], self.scheme, self.alpha)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return self.direction_.apply(X)
