"""Learning a feature map from interchange interventions on a frozen subject.

For sampled pairs ``(x-, x+)`` the hidden state of ``x-`` at the intervention
site gets the targeted feature coordinates of ``x+``; the subject continues
from the edited state and the hinge loss at the selected loss sites is
back-propagated into the feature map only.
"""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import DTYPE, as_tensor, check_positive_int
from .exceptions import InvalidArgumentError, TrainingError
from .featmap import IResNetFeatureMap, LinearFeatureMap, load_feature_map
from .intervene import InterventionSpec, apply_interchange, apply_nonlinear, CLAMP
from .serialization import dump_container, load_container
from .sites import LossSiteSet, SiteStats, collect_site_stats, select_sites
from .subject import COMPLY, Site, forward_with_hooks

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "NonlinearSteering",
    "sample_pairs",
    "train_fmap",
    "grad_check",
    "compute_loss_sites",
]


@dataclass
class TrainConfig:
    layer: int = 2
    position: int = -3
    coords: tuple = (0,)
    tau: float = 0.9
    feature_map: str = "iresnet"
    n_blocks: int = 2
    width: int = 128
    kappa: float = 0.6
    negative_slope: float = 0.1
    max_iter: int = 30
    tol: float = 1e-5
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    log_every: int = 100

    @property
    def site(self):
        return Site(self.layer, self.position)

    def validate(self):
        if self.feature_map not in ("iresnet", "linear"):
            raise InvalidArgumentError(f"feature_map must be 'iresnet' or 'linear', got {self.feature_map!r}")
        if not 0.0 < self.kappa < 1.0:
            raise InvalidArgumentError(f"kappa must lie in (0, 1), got {self.kappa}")
        for name in ("n_blocks", "width", "batch_size", "max_iter", "log_every"):
            check_positive_int(getattr(self, name), name)
        check_positive_int(self.steps, "steps", minimum=0)
        if not (self.lr > 0 and self.tol > 0 and self.weight_decay >= 0):
            raise InvalidArgumentError("lr and tol must be > 0, weight_decay >= 0")
        if not 0.5 < self.tau <= 1.0:
            raise InvalidArgumentError(f"tau must lie in (0.5, 1], got {self.tau}")
        InterventionSpec(tuple(self.coords), tuple(0.0 for _ in self.coords))
        return self

    def to_dict(self):
        out = asdict(self)
        out["coords"] = list(self.coords)
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "coords" in obj:
            obj["coords"] = tuple(obj["coords"])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**obj)


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)
    saturation: list = field(default_factory=list)
    mu_bar_plus: float = float("nan")
    grad_check: float = None
    wall_clock: float = 0.0
    skipped_pairs: int = 0
    total_pairs: int = 0
    interchange_error: float = 0.0
    n_loss_sites: int = 0

    @property
    def initial_loss(self):
        return self.loss_curve[0] if self.loss_curve else float("nan")

    @property
    def final_loss(self):
        tail = self.loss_curve[-100:]
        return float(np.mean(tail)) if tail else float("nan")

    def to_dict(self):
        out = asdict(self)
        out["initial_loss"] = self.initial_loss
        out["final_loss"] = self.final_loss
        return out


def make_feature_map(config, d):
    if config.feature_map == "linear":
        return LinearFeatureMap(random_state=config.seed).initialize(d)
    return IResNetFeatureMap(
        n_blocks=config.n_blocks, width=config.width, kappa=config.kappa,
        negative_slope=config.negative_slope, max_iter=config.max_iter, tol=config.tol,
        random_state=config.seed,
    ).initialize(d)


def sample_pairs(dataset, batch, seed):
    """``batch`` independent uniform draws from negatives x positives: list of ``(x-, x+)``."""
    rng = np.random.default_rng(seed)
    i, j = _pair_indices(len(dataset.X_neg), len(dataset.X_pos), batch, rng)
    return [(dataset.X_neg[a], dataset.X_pos[b]) for a, b in zip(i, j)]


def _pair_indices(n_minus, n_plus, batch, rng):
    if n_minus < 1 or n_plus < 1:
        raise InvalidArgumentError("both sides of the pair set must be non-empty")
    return rng.integers(0, n_minus, batch), rng.integers(0, n_plus, batch)


class _Cache:
    """Unintervened hidden states of the training split, computed once."""

    def __init__(self, subject, dataset, site):
        self.site = subject.resolve(site)
        sites = subject.all_sites()
        with torch.no_grad():
            rp = subject.run(dataset.X_pos, record=sites, capture_layer=self.site.layer)
            rn = subject.run(dataset.X_neg, record=sites, capture_layer=self.site.layer)
        self.states_plus = {s: rp.states[s].numpy() for s in sites}
        self.states_minus = {s: rn.states[s].numpy() for s in sites}
        self.layer_minus = rn.layer_output
        self.h_plus = rp.layer_output[:, self.site.position]
        self.h_minus = rn.layer_output[:, self.site.position]


def compute_loss_sites(subject, dataset, site, tau):
    """Site statistics from the training split and the selected loss-site set."""
    cache = _Cache(subject, dataset, site)
    stats = collect_site_stats(cache.states_plus, cache.states_minus)
    return select_sites(stats, tau, cache.site), cache


def _objective(subject, fmap, cache, loss_sites, idx_minus, idx_plus, coords, strict=False):
    """Mean hinge loss over a batch of interchange-intervened forward passes.

    Returns ``(loss, info)``; rows whose inversion failed are dropped from the mean.
    """
    site = cache.site
    H = cache.layer_minus[idx_minus]
    h_minus, h_plus = H[:, site.position], cache.h_plus[idx_plus]
    edited = apply_interchange(fmap, h_minus, h_plus, coords, strict=strict)
    ok = getattr(fmap, "last_converged_", torch.ones(len(idx_minus), dtype=torch.bool))
    H_int = H.clone()
    H_int[:, site.position] = edited
    later = [e.site for e in loss_sites if e.site.layer > site.layer]
    res = subject.run(H_int, record=later, start_layer=site.layer + 1) if later else None
    total = torch.zeros(len(idx_minus), dtype=DTYPE)
    sat = {}
    for e in loss_sites:
        states = res.states[e.site] if e.site.layer > site.layer else H_int[:, e.site.position]
        proj = states @ torch.as_tensor(e.direction)
        total = total + torch.clamp(e.mu_plus - proj, min=0.0)
        sat[str(e.site)] = float((proj.detach() >= e.mu_plus).double().mean())
    n_ok = int(ok.sum())
    loss = (total * ok).sum() / max(n_ok, 1)
    return loss, {"ok": ok, "edited": edited, "h_plus": h_plus, "saturation": sat}


def train_fmap(subject, dataset, config=None, fmap=None, loss_sites=None):
    """Fit a feature map so interchanged states drive the loss sites to their positive means.

    Returns ``(fmap, loss_sites, report)``. The subject is only read. After the
    optimization the power-iteration state is converged and frozen, and the mean
    targeted coordinate over the training positives is stored as
    ``report.mu_bar_plus``.
    """
    config = (config or TrainConfig()).validate()
    start = time.perf_counter()
    if loss_sites is None:
        loss_sites, cache = compute_loss_sites(subject, dataset, config.site, config.tau)
    else:
        cache = _Cache(subject, dataset, config.site)
    if fmap is None:
        fmap = make_feature_map(config, subject.d)
    params = fmap.parameters()
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay) if params else None
    rng = np.random.default_rng(config.seed)
    report = TrainReport(n_loss_sites=len(loss_sites))
    coords = list(config.coords)
    for step in range(config.steps):
        i, j = _pair_indices(len(dataset.X_neg), len(dataset.X_pos), config.batch_size, rng)
        fmap.power_step()
        loss, info = _objective(subject, fmap, cache, loss_sites, i, j, coords)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        report.total_pairs += len(i)
        report.skipped_pairs += int((~info["ok"]).sum())
        if report.total_pairs >= 10 * config.batch_size and report.skipped_pairs > 0.01 * report.total_pairs:
            raise TrainingError(
                f"{report.skipped_pairs} of {report.total_pairs} pairs skipped for non-converged inversion")
        report.loss_curve.append(float(loss.detach()))
        if step % config.log_every == 0:
            report.saturation.append({"step": step, **info["saturation"]})
            with torch.no_grad():
                got = fmap.forward(info["edited"])[:, coords]
                want = fmap.forward(info["h_plus"])[:, coords]
                err = float(torch.max(torch.abs(got - want)[info["ok"]]).item()) if info["ok"].any() else 0.0
            report.interchange_error = max(report.interchange_error, err)
            logger.info("step %d loss %.4f", step, report.loss_curve[-1])
        if opt is not None and loss.requires_grad:
            opt.zero_grad()
            loss.backward()
            opt.step()
    if config.steps:
        fmap.freeze()
    with torch.no_grad():
        report.mu_bar_plus = float(fmap.forward(cache.h_plus)[:, coords[0]].mean())
    report.wall_clock = time.perf_counter() - start
    return fmap, loss_sites, report


def grad_check(subject, dataset, config=None, n_probes=50, fmap=None, loss_sites=None,
               n_pairs=8, step=1e-5, atol=1e-5):
    """Largest relative gap between autograd and central finite differences of the objective.

    The check uses a fixed batch of ``n_pairs`` pairs, frozen power-iteration
    state and a tight inversion tolerance so the finite differences see a
    smooth function. Relative error is ``|a - n| / max(|a|, |n|, atol)``; the
    floor sits above the roundoff of a central difference at ``step`` on a loss
    of order ten, which is about 1e-9 in absolute terms.
    """
    config = (config or TrainConfig()).validate()
    if loss_sites is None:
        loss_sites, cache = compute_loss_sites(subject, dataset, config.site, config.tau)
    else:
        cache = _Cache(subject, dataset, config.site)
    if fmap is None:
        fmap = make_feature_map(config, subject.d)
    params = fmap.parameters()
    if not params:
        return 0.0
    saved = getattr(fmap, "tol", None), getattr(fmap, "max_iter", None)
    if isinstance(fmap, IResNetFeatureMap):
        fmap.tol, fmap.max_iter = 1e-13, 2000
    rng = np.random.default_rng(config.seed + 1)
    i, j = _pair_indices(len(dataset.X_neg), len(dataset.X_pos), n_pairs, rng)
    coords = list(config.coords)
    try:
        loss, _ = _objective(subject, fmap, cache, loss_sites, i, j, coords, strict=True)
        if loss.requires_grad:
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        else:
            grads = [torch.zeros_like(p) for p in params]
        sizes = np.array([p.numel() for p in params])
        flat = rng.choice(int(sizes.sum()), size=min(n_probes, int(sizes.sum())), replace=False)
        worst = 0.0
        for k in flat:
            t = int(np.searchsorted(np.cumsum(sizes), k, side="right"))
            offset = int(k - (np.cumsum(sizes)[t - 1] if t else 0))
            p = params[t]
            idx = np.unravel_index(offset, tuple(p.shape))
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + step
                up = float(_objective(subject, fmap, cache, loss_sites, i, j, coords, strict=True)[0])
                p[idx] = orig - step
                down = float(_objective(subject, fmap, cache, loss_sites, i, j, coords, strict=True)[0])
                p[idx] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(grads[t][idx])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol))
    finally:
        if isinstance(fmap, IResNetFeatureMap):
            fmap.tol, fmap.max_iter = saved
    return worst


class NonlinearSteering(BaseEstimator):
    """Estimator wrapper: learn a feature map on a subject, then steer by clamping.

    ``fit(dataset)`` trains on a :class:`~invsteer.subject.ContrastiveDataset`;
    ``transform(H)`` clamps hidden states at the intervention site;
    ``predict(X)`` returns the subject's labels on inputs under the clamp.
    """

    def __init__(self, subject=None, layer=2, position=-3, coords=(0,), tau=0.9,
                 feature_map="iresnet", n_blocks=2, width=128, kappa=0.6, negative_slope=0.1,
                 max_iter=30, tol=1e-5, lr=1e-3, steps=2000, batch_size=32, random_state=0):
        self.subject = subject
        self.layer = layer
        self.position = position
        self.coords = coords
        self.tau = tau
        self.feature_map = feature_map
        self.n_blocks = n_blocks
        self.width = width
        self.kappa = kappa
        self.negative_slope = negative_slope
        self.max_iter = max_iter
        self.tol = tol
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.random_state = random_state

    def train_config(self):
        return TrainConfig(
            layer=self.layer, position=self.position, coords=tuple(self.coords), tau=self.tau,
            feature_map=self.feature_map, n_blocks=self.n_blocks, width=self.width,
            kappa=self.kappa, negative_slope=self.negative_slope, max_iter=self.max_iter,
            tol=self.tol, lr=self.lr, steps=self.steps, batch_size=self.batch_size,
            seed=self.random_state,
        )

    def fit(self, dataset, y=None):
        if self.subject is None:
            raise InvalidArgumentError("NonlinearSteering needs a subject")
        config = self.train_config()
        self.fmap_, self.loss_sites_, self.report_ = train_fmap(self.subject, dataset, config)
        self.mu_bar_plus_ = self.report_.mu_bar_plus
        self.site_ = self.subject.resolve(config.site)
        self.n_features_in_ = self.subject.d
        return self

    @property
    def spec_(self):
        return InterventionSpec((self.coords[0],), (self.mu_bar_plus_,), CLAMP)

    def edit(self, h):
        """Torch-level clamp used as a forward hook."""
        return apply_nonlinear(self.fmap_, h, self.spec_)

    def transform(self, H):
        check_is_fitted(self)
        h = as_tensor(H, "H")
        with torch.no_grad():
            return self.edit(h).numpy()

    def predict(self, X):
        check_is_fitted(self)
        labels, _ = forward_with_hooks(self.subject, X, [(self.site_, self.edit)])
        return labels

    def score(self, X, y=None):
        """Fraction of inputs labeled comply under the intervention."""
        return float(np.mean(self.predict(X) == COMPLY))

    def save(self, path=None):
        check_is_fitted(self)
        payload = {
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.get_params().items() if k != "subject"},
            "feature_map": {"kind": self.fmap_.kind, "payload": self.fmap_.to_dict()},
            "loss_sites": [e.as_dict() for e in self.loss_sites_],
            "tau": self.loss_sites_.tau,
            "mu_bar_plus": self.mu_bar_plus_,
            "site": self.site_.as_dict(),
        }
        return dump_container("nonlinear_steering", payload, path)

    @classmethod
    def load(cls, source, subject=None):
        _, p = load_container(source, "nonlinear_steering")
        params = dict(p["params"])
        params["coords"] = tuple(params["coords"])
        est = cls(subject=subject, **params)
        fm = p["feature_map"]
        est.fmap_ = load_feature_map(dump_container(fm["kind"], fm["payload"]))
        est.loss_sites_ = LossSiteSet(tuple(SiteStats.from_dict(e) for e in p["loss_sites"]), p["tau"])
        est.mu_bar_plus_ = p["mu_bar_plus"]
        est.site_ = Site.from_dict(p["site"])
        est.n_features_in_ = est.fmap_.n_features_in_
        return est
