"""Invertible feature maps: an orthogonal linear map and an invertible residual network.

Both maps follow the scikit-learn transformer protocol (``fit`` initializes the
weights for the input width, ``transform`` is the forward map and
``inverse_transform`` the inverse). The torch-level methods ``forward`` and
``inverse`` are differentiable and are what the training loop uses.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DTYPE, as_tensor, check_states, restore
from .exceptions import InvalidArgumentError, InversionError
from .serialization import decode_array, dump_container, encode_array, load_container

__all__ = [
    "InversionReport",
    "ResidualBlock",
    "IResNetFeatureMap",
    "LinearFeatureMap",
    "spectral_normalize",
    "fmap_forward",
    "fmap_inverse",
    "fmap_gradients",
    "lipschitz_estimate",
    "load_feature_map",
]


@dataclass
class InversionReport:
    iterations_used: int
    residual: float
    converged: bool


def _normalize(v, eps=1e-12):
    n = torch.linalg.vector_norm(v)
    if n < eps:
        return None
    return v / n


def _reseed_state(n, seed):
    g = torch.Generator().manual_seed(int(seed))
    u = torch.randn(n, generator=g, dtype=DTYPE)
    return u / torch.linalg.vector_norm(u)


def _power_update(W, u, seed=0):
    """One power-iteration step on the left singular vector ``u`` of ``W``."""
    W = W.detach()
    if not torch.any(W != 0):
        return u
    if _normalize(u) is None or _normalize(W.T @ u) is None:
        u = _reseed_state(W.shape[0], seed)
    v = _normalize(W.T @ u)
    if v is None:
        return u
    u_new = _normalize(W @ v)
    return u if u_new is None else u_new


def _sigma(W, u):
    """Spectral-norm estimate ||W^T u|| (differentiable in W, ``u`` held fixed)."""
    return torch.linalg.vector_norm(W.T @ u.detach())


def _scaled(W, u):
    sigma = _sigma(W, u)
    if float(sigma.detach()) <= 1.0:
        return W, sigma
    return W / sigma, sigma


def spectral_normalize(weights, state, seed=0):
    """Run one power iteration and rescale ``weights`` to spectral norm at most one.

    Returns ``(W_tilde, new_state, sigma_hat)`` with ``W_tilde = W * min(1, 1/sigma_hat)``.
    A zero matrix gives ``sigma_hat = 0`` and is returned unchanged; a degenerate
    state vector is replaced by a unit vector drawn from ``seed``.
    """
    W = as_tensor(weights, "weights")
    u = as_tensor(state, "state")
    if W.ndim != 2 or u.shape != (W.shape[0],):
        raise InvalidArgumentError("state must have one entry per row of weights")
    if not torch.any(W != 0):
        return W.numpy().copy(), u.numpy().copy(), 0.0
    u = _power_update(W, u, seed)
    W_tilde, sigma = _scaled(W, u)
    return W_tilde.numpy().copy(), u.numpy().copy(), float(sigma)


# --------------------------------------------------------------------------
# residual blocks
# --------------------------------------------------------------------------


def _branch(x, W1, b1, W2, b2, kappa, slope):
    a = F.leaky_relu(x @ W1.T + b1, negative_slope=slope)
    return kappa * (a @ W2.T + b2)


class ResidualBlock:
    """One block ``z -> z + g(z)`` with a spectrally normalized two-layer MLP branch.

    ``W1`` is ``(width, d)`` and ``W2`` is ``(d, width)``. The power-iteration
    states ``u1`` and ``u2`` only move when :meth:`power_step` is called.
    """

    def __init__(self, W1, b1, W2, b2, kappa=0.6, negative_slope=0.1, u1=None, u2=None, seed=0):
        if not 0.0 < kappa < 1.0:
            raise InvalidArgumentError(f"kappa must lie in (0, 1), got {kappa}")
        self.W1 = as_tensor(W1, "W1").clone().requires_grad_(True)
        self.b1 = as_tensor(b1, "b1").clone().requires_grad_(True)
        self.W2 = as_tensor(W2, "W2").clone().requires_grad_(True)
        self.b2 = as_tensor(b2, "b2").clone().requires_grad_(True)
        width, d = self.W1.shape
        if self.W2.shape != (d, width) or self.b1.shape != (width,) or self.b2.shape != (d,):
            raise InvalidArgumentError("inconsistent residual block shapes")
        self.kappa = float(kappa)
        self.negative_slope = float(negative_slope)
        self.seed = int(seed)
        self.u1 = _reseed_state(width, seed) if u1 is None else as_tensor(u1, "u1").clone()
        self.u2 = _reseed_state(d, seed + 1) if u2 is None else as_tensor(u2, "u2").clone()

    @classmethod
    def random(cls, d, width, kappa, negative_slope, generator, seed, n_warmup=20):
        def uniform(shape, fan_in):
            a = 1.0 / np.sqrt(fan_in)
            return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2 - 1) * a

        W1 = uniform((width, d), d)
        W2 = uniform((d, width), width)
        block = cls(W1, torch.zeros(width, dtype=DTYPE), W2, torch.zeros(d, dtype=DTYPE),
                    kappa, negative_slope, seed=seed)
        for _ in range(n_warmup):
            block.power_step()
        return block

    @property
    def dim(self):
        return self.W1.shape[1]

    @property
    def width(self):
        return self.W1.shape[0]

    def parameters(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def power_step(self):
        self.u1 = _power_update(self.W1, self.u1, self.seed)
        self.u2 = _power_update(self.W2, self.u2, self.seed + 1)

    def sigmas(self):
        """Current spectral-norm estimates of the two raw weight matrices."""
        with torch.no_grad():
            return float(_sigma(self.W1, self.u1)), float(_sigma(self.W2, self.u2))

    def normalized(self):
        """``(W1~, b1, W2~, b2)`` with differentiable spectral rescaling."""
        W1, _ = _scaled(self.W1, self.u1)
        W2, _ = _scaled(self.W2, self.u2)
        return W1, self.b1, W2, self.b2

    def branch(self, x, weights=None):
        W1, b1, W2, b2 = self.normalized() if weights is None else weights
        return _branch(x, W1, b1, W2, b2, self.kappa, self.negative_slope)

    def forward(self, x, weights=None):
        return x + self.branch(x, weights)

    def solve(self, y, max_iter, tol, weights=None):
        """Fixed-point iteration ``x <- y - g(x)`` (no gradient tracking).

        Returns the iterate, the per-row relative residual
        ``||x + g(x) - y|| / max(||y||, 1)`` and the number of updates performed.
        The update already computed at the last check is applied before
        returning; since ``g`` is a contraction, the reported residual bounds
        the returned point's residual from above.
        """
        weights = self.normalized() if weights is None else weights
        weights = [w.detach() for w in weights]
        y = y.detach()
        scale = torch.clamp(torch.linalg.vector_norm(y, dim=-1), min=1.0)
        x = y.clone()
        iters = 0
        while True:
            r = x + _branch(x, *weights, self.kappa, self.negative_slope) - y
            res = torch.linalg.vector_norm(r, dim=-1) / scale
            x = x - r
            if bool((res <= tol).all()) or iters >= max_iter:
                return x, res, iters
            iters += 1

    def inverse(self, y, max_iter, tol, weights=None):
        weights = self.normalized() if weights is None else weights
        x_star, res, iters = self.solve(y, max_iter, tol, weights)
        x = _ImplicitInverse.apply(y, x_star, self, tol, *weights)
        return x, res, iters

    def to_dict(self):
        return {
            "W1": encode_array(self.W1), "b1": encode_array(self.b1),
            "W2": encode_array(self.W2), "b2": encode_array(self.b2),
            "u1": encode_array(self.u1), "u2": encode_array(self.u2),
            "kappa": self.kappa, "negative_slope": self.negative_slope, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj):
        arrays = {k: decode_array(obj[k]) for k in ("W1", "b1", "W2", "b2", "u1", "u2")}
        return cls(kappa=obj["kappa"], negative_slope=obj["negative_slope"], seed=obj["seed"], **arrays)


class _ImplicitInverse(torch.autograd.Function):
    """Identity on the solved fixed point, with an implicit-function backward.

    ``x* = y - g(x*)`` gives ``dL/dy = w`` with ``w = (I + J_g(x*)^T)^{-1} dL/dx*``.
    ``w`` comes from the Neumann iteration ``w <- a - J_g^T w``, which contracts
    because ``||J_g|| <= kappa < 1``. Parameter gradients are ``-(dg/dtheta)^T w``.
    """

    @staticmethod
    def forward(ctx, y, x_star, block, tol, W1, b1, W2, b2):
        ctx.block = block
        ctx.tol = tol
        ctx.save_for_backward(x_star, W1, b1, W2, b2)
        return x_star.clone()

    @staticmethod
    def backward(ctx, grad_x):
        x_star, *weights = ctx.saved_tensors
        block = ctx.block
        with torch.enable_grad():
            x = x_star.detach().requires_grad_(True)
            params = [w.detach().requires_grad_(True) for w in weights]
            out = _branch(x, *params, block.kappa, block.negative_slope)
            scale = max(float(torch.linalg.vector_norm(grad_x)), 1e-300)
            w = grad_x
            for _ in range(10_000):
                (jtw,) = torch.autograd.grad(out, x, w, retain_graph=True)
                w_new = grad_x - jtw
                step = float(torch.linalg.vector_norm(w_new - w))
                w = w_new
                if step <= ctx.tol * scale:
                    break
            grads = torch.autograd.grad(out, params, -w, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        return (w, None, None, None, *grads)


# --------------------------------------------------------------------------
# feature maps
# --------------------------------------------------------------------------


class _FeatureMapMixin:
    def transform(self, X):
        """Map hidden states to feature coordinates."""
        check_is_fitted(self)
        h, single = check_states(X, self.n_features_in_)
        with torch.no_grad():
            z = self.forward(h)
        return restore(z, single)

    def inverse_transform(self, Z):
        """Map feature coordinates back to hidden states; raises on non-convergence."""
        check_is_fitted(self)
        z, single = check_states(Z, self.n_features_in_, "z")
        with torch.no_grad():
            x, report = self.inverse(z, strict=True)
        return restore(x, single)

    def save(self, path=None):
        return dump_container(self.kind, self.to_dict(), path)


class IResNetFeatureMap(_FeatureMapMixin, TransformerMixin, BaseEstimator):
    """Invertible residual network ``f = phi_M o ... o phi_1`` with ``phi(z) = z + g(z)``.

    Parameters
    ----------
    n_blocks : int
        Number of residual blocks.
    width : int
        Hidden width of each two-layer branch.
    kappa : float
        Lipschitz coefficient applied to each branch output, in (0, 1).
    negative_slope : float
        LeakyReLU negative slope.
    max_iter, tol : int, float
        Fixed-point inversion budget per block and relative-residual tolerance.
    n_warmup : int
        Power iterations run per weight at initialization.
    random_state : int
        Seed for weight and power-iteration initialization.
    """

    kind = "iresnet"

    def __init__(self, n_blocks=2, width=128, kappa=0.6, negative_slope=0.1,
                 max_iter=30, tol=1e-5, n_warmup=20, random_state=0):
        self.n_blocks = n_blocks
        self.width = width
        self.kappa = kappa
        self.negative_slope = negative_slope
        self.max_iter = max_iter
        self.tol = tol
        self.n_warmup = n_warmup
        self.random_state = random_state

    def fit(self, X, y=None):
        """Initialize weights for the width of ``X`` (a batch of hidden states)."""
        h, _ = check_states(X, None, "X")
        return self.initialize(h.shape[1])

    def initialize(self, d):
        if not 0.0 < self.kappa < 1.0:
            raise InvalidArgumentError(f"kappa must lie in (0, 1), got {self.kappa}")
        g = torch.Generator().manual_seed(int(self.random_state))
        self.blocks_ = [
            ResidualBlock.random(d, self.width, self.kappa, self.negative_slope, g,
                                 seed=int(self.random_state) * 1000 + 2 * m, n_warmup=self.n_warmup)
            for m in range(self.n_blocks)
        ]
        self.n_features_in_ = d
        return self

    @classmethod
    def from_blocks(cls, blocks, max_iter=30, tol=1e-5):
        first = blocks[0]
        fmap = cls(n_blocks=len(blocks), width=first.width, kappa=first.kappa,
                   negative_slope=first.negative_slope, max_iter=max_iter, tol=tol)
        fmap.blocks_ = list(blocks)
        fmap.n_features_in_ = first.dim
        return fmap

    def parameters(self):
        return [p for b in self.blocks_ for p in b.parameters()]

    def named_parameters(self):
        names = ("W1", "b1", "W2", "b2")
        return [(f"blocks.{m}.{n}", p) for m, b in enumerate(self.blocks_) for n, p in zip(names, b.parameters())]

    def power_step(self):
        for b in self.blocks_:
            b.power_step()

    def freeze(self, n_iter=100):
        """Converge the power-iteration states so spectral estimates are tight."""
        for _ in range(n_iter):
            self.power_step()
        return self

    def forward(self, h):
        for b in self.blocks_:
            h = b.forward(h)
        return h

    def inverse(self, z, strict=True):
        """Invert block by block in reverse order.

        Returns ``(x, report)``. With ``strict`` a non-converged inverse raises
        :class:`InversionError`; otherwise ``report`` is returned with
        ``converged=False`` and ``self.last_converged_`` marks the good rows.
        """
        x = z
        iters, res_rows = 0, torch.zeros(z.shape[:-1], dtype=DTYPE)
        for b in reversed(self.blocks_):
            x, res, n = b.inverse(x, self.max_iter, self.tol)
            iters = max(iters, n)
            res_rows = torch.maximum(res_rows, res)
        ok = res_rows <= self.tol
        self.last_converged_ = ok
        report = InversionReport(iters, float(res_rows.max()) if res_rows.numel() else 0.0, bool(ok.all()))
        if strict and not report.converged:
            raise InversionError(
                f"fixed-point inversion did not converge in {self.max_iter} iterations "
                f"(residual {report.residual:.3g} > tol {self.tol:.3g})", report)
        return x, report

    def to_dict(self):
        check_is_fitted(self)
        return {
            "d": self.n_features_in_, "M": len(self.blocks_), "width": self.width,
            "kappa": self.kappa, "negative_slope": self.negative_slope,
            "max_iter": self.max_iter, "tol": self.tol, "n_warmup": self.n_warmup,
            "random_state": self.random_state,
            "blocks": [b.to_dict() for b in self.blocks_],
        }

    @classmethod
    def from_dict(cls, obj):
        fmap = cls(n_blocks=obj["M"], width=obj["width"], kappa=obj["kappa"],
                   negative_slope=obj["negative_slope"], max_iter=obj["max_iter"], tol=obj["tol"],
                   n_warmup=obj["n_warmup"], random_state=obj["random_state"])
        fmap.blocks_ = [ResidualBlock.from_dict(b) for b in obj["blocks"]]
        fmap.n_features_in_ = obj["d"]
        return fmap


def _skew(A):
    return A - A.T


class LinearFeatureMap(_FeatureMapMixin, TransformerMixin, BaseEstimator):
    """Orthogonal linear map ``z = W h``; rows of ``W`` are feature directions.

    With ``matrix`` given, ``W`` is fixed to it (after an orthogonality check).
    Otherwise ``W = expm(A - A^T)`` for a trainable generator ``A`` drawn from
    ``random_state``, which keeps ``W`` orthogonal during optimization.
    """

    kind = "linear"

    def __init__(self, matrix=None, init_scale=0.5, random_state=0):
        self.matrix = matrix
        self.init_scale = init_scale
        self.random_state = random_state

    def fit(self, X, y=None):
        h, _ = check_states(X, None, "X")
        return self.initialize(h.shape[1])

    def initialize(self, d):
        if self.matrix is not None:
            W = as_tensor(self.matrix, "matrix")
            if W.shape != (d, d):
                raise InvalidArgumentError(f"matrix must be {d}x{d}")
            err = float(torch.linalg.matrix_norm(W.T @ W - torch.eye(d, dtype=DTYPE)))
            if err > 1e-8:
                raise InvalidArgumentError(f"matrix is not orthogonal (||W^T W - I||_F = {err:.3g})")
            self.generator_ = None
            self.W_fixed_ = W.clone()
        else:
            g = torch.Generator().manual_seed(int(self.random_state))
            A = (torch.rand((d, d), generator=g, dtype=DTYPE) * 2 - 1) * self.init_scale / np.sqrt(d)
            self.generator_ = A.requires_grad_(True)
            self.W_fixed_ = None
        self.n_features_in_ = d
        return self

    @property
    def W(self):
        if self.generator_ is None:
            return self.W_fixed_
        return torch.linalg.matrix_exp(_skew(self.generator_))

    def parameters(self):
        return [] if self.generator_ is None else [self.generator_]

    def named_parameters(self):
        return [("generator", p) for p in self.parameters()]

    def power_step(self):
        pass

    def freeze(self, n_iter=0):
        return self

    def forward(self, h):
        return h @ self.W.T

    def inverse(self, z, strict=True):
        self.last_converged_ = torch.ones(z.shape[:-1], dtype=torch.bool)
        return z @ self.W, InversionReport(0, 0.0, True)

    def to_dict(self):
        check_is_fitted(self)
        return {
            "d": self.n_features_in_,
            "W": encode_array(self.W.detach()),
            "generator": None if self.generator_ is None else encode_array(self.generator_),
            "init_scale": self.init_scale, "random_state": self.random_state,
        }

    @classmethod
    def from_dict(cls, obj):
        fmap = cls(init_scale=obj["init_scale"], random_state=obj["random_state"])
        fmap.n_features_in_ = obj["d"]
        if obj["generator"] is None:
            fmap.generator_ = None
            fmap.W_fixed_ = torch.as_tensor(decode_array(obj["W"]))
            fmap.matrix = fmap.W_fixed_.numpy().copy()
        else:
            fmap.generator_ = torch.as_tensor(decode_array(obj["generator"])).requires_grad_(True)
            fmap.W_fixed_ = None
        return fmap


def load_feature_map(source):
    kind, payload = load_container(source)
    if kind == "iresnet":
        return IResNetFeatureMap.from_dict(payload)
    if kind == "linear":
        return LinearFeatureMap.from_dict(payload)
    raise ValueError(f"container holds a {kind!r}, not a feature map")


# --------------------------------------------------------------------------
# functional API
# --------------------------------------------------------------------------


def fmap_forward(fmap, h):
    """``z = f(h)`` for one vector or a batch."""
    return fmap.transform(h)


def fmap_inverse(fmap, z):
    """``(x, report)`` with ``f(x) ~ z``; raises :class:`InversionError` on failure."""
    check_is_fitted(fmap)
    zt, single = check_states(z, fmap.n_features_in_, "z")
    with torch.no_grad():
        x, report = fmap.inverse(zt, strict=True)
    return restore(x, single), report


def fmap_gradients(fmap, h=None, grad_forward=None, z=None, grad_inverse=None):
    """Parameter gradients of ``<grad_forward, f(h)> + <grad_inverse, f^-1(z)>``.

    Either pair may be omitted. Gradients through the inverse use implicit
    differentiation at the fixed point. Returns a dict keyed by parameter name.
    """
    check_is_fitted(fmap)
    d = fmap.n_features_in_
    named = fmap.named_parameters()
    total = torch.zeros((), dtype=DTYPE)
    if h is not None:
        ht, _ = check_states(h, d)
        gt, _ = check_states(grad_forward, d, "grad_forward")
        total = total + (fmap.forward(ht) * gt).sum()
    if z is not None:
        zt, _ = check_states(z, d, "z")
        gt, _ = check_states(grad_inverse, d, "grad_inverse")
        x, report = fmap.inverse(zt, strict=False)
        if not report.converged:
            raise InversionError("refusing to differentiate through a non-converged inverse", report)
        total = total + (x * gt).sum()
    params = [p for _, p in named]
    if not total.requires_grad:
        return {n: np.zeros(tuple(p.shape)) for n, p in named}
    grads = torch.autograd.grad(total, params, allow_unused=True)
    return {n: (np.zeros(tuple(p.shape)) if g is None else g.numpy().copy()) for (n, p), g in zip(named, grads)}


def lipschitz_estimate(block, n_pairs=10_000, seed=0, scale=1.0, points=None):
    """Largest ``||g(a) - g(b)|| / ||a - b||`` over sampled pairs.

    Pairs mix far-apart Gaussian draws with close pairs at log-uniform
    separations; with ``points`` given, anchors are drawn from those rows.
    Coincident pairs are skipped.
    """
    rng = np.random.default_rng(seed)
    d = block.dim
    if points is not None:
        anchors = np.asarray(points, dtype=np.float64)
        a = anchors[rng.integers(0, len(anchors), n_pairs)]
    else:
        a = rng.normal(0.0, scale, (n_pairs, d))
    far = rng.normal(0.0, scale, (n_pairs, d))
    step = rng.normal(size=(n_pairs, d)) * (10.0 ** rng.uniform(-4, 0, (n_pairs, 1))) * scale
    b = np.where(rng.random((n_pairs, 1)) < 0.5, a + step, far)
    with torch.no_grad():
        ga = block.branch(torch.as_tensor(a))
        gb = block.branch(torch.as_tensor(b))
    num = torch.linalg.vector_norm(ga - gb, dim=1).numpy()
    den = np.linalg.norm(a - b, axis=1)
    keep = den > 0
    if not keep.any():
        return 0.0
    return float(np.max(num[keep] / den[keep]))
