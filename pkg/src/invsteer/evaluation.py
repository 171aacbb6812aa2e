"""Behavioral evaluation of steering methods on a subject.

A :class:`Method` is a named list of ``(Site, fn)`` edits. Every method used
in the reports (no intervention, the difference-in-means baselines, linear
shifts at the loss sites, and the clamp through a learned feature map) is
built by one of the factories below and scored the same way.
"""

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from ._validation import as_tensor
from .exceptions import InvalidArgumentError, InversionError, NoSupervisionError, TrainingError
from .intervene import CLAMP, InterventionSpec, _torch_ablate, apply_nonlinear, dim_direction
from .sites import collect_site_stats
from .subject import COMPLY, Site
from .train import TrainConfig, train_fmap

logger = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "Method",
    "MagnitudeReport",
    "SweepResult",
    "compliance_rate",
    "intervention_magnitude",
    "evaluate_method",
    "no_intervention",
    "dim_site",
    "dim_ablation",
    "dim_actadd",
    "loss_site_shift",
    "feature_clamp",
    "radius_oracle",
    "linear_at_loss_sites",
    "layer_sweep",
    "run_linear_fmap_ablation",
]

METHODS = ("none", "dim-ablate", "dim-actadd", "linear-at-loss-sites", "linear-fmap", "nonlinear-clamp")


@dataclass
class Method:
    """A named set of per-site edit functions applied during the forward pass."""

    name: str
    edits: list = field(default_factory=list)

    @property
    def sites(self):
        return [s for s, _ in self.edits]


@dataclass
class MagnitudeReport:
    """Per-example edited-site counts and summed L2 edit norms, with their means."""

    sites_per_example: np.ndarray
    l2_per_example: np.ndarray

    @property
    def mean_sites(self):
        return float(np.mean(self.sites_per_example)) if self.sites_per_example.size else 0.0

    @property
    def mean_l2(self):
        return float(np.mean(self.l2_per_example)) if self.l2_per_example.size else 0.0

    @classmethod
    def from_states(cls, examples):
        """Build from ``[[(h, h_edited), ...] per example]`` by direct summation."""
        sites, l2 = [], []
        for pairs in examples:
            sites.append(len(pairs))
            l2.append(sum(float(np.linalg.norm(np.asarray(b, float) - np.asarray(a, float)))
                          for a, b in pairs))
        return cls(np.asarray(sites, dtype=int), np.asarray(l2, dtype=np.float64))

    def to_dict(self):
        return {"mean_sites": self.mean_sites, "mean_l2": self.mean_l2,
                "sites_per_example": self.sites_per_example.tolist(),
                "l2_per_example": self.l2_per_example.tolist()}


@dataclass
class SweepResult:
    """One row per candidate layer: compliance rate, mean L2 magnitude and any training error."""

    rows: list

    @property
    def layers(self):
        return [r["layer"] for r in self.rows]

    @property
    def rates(self):
        return [r["rate"] for r in self.rows]

    @property
    def best_layer(self):
        best = max(self.rows, key=lambda r: (r["rate"], -r["layer"]))
        return best["layer"]

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "rate", "magnitude", "error"])
        for r in self.rows:
            writer.writerow([r["layer"], repr(r["rate"]), repr(r["magnitude"]), r["error"] or ""])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_dict(self):
        return {"rows": self.rows, "best_layer": self.best_layer}


def _check_nonempty(X):
    X = as_tensor(X, "test set")
    if X.ndim != 3 or X.shape[0] == 0:
        raise InvalidArgumentError("test set must be a non-empty (n, T, d) array")
    return X


def _run(subject, method, X):
    resolved = {}
    for site, fn in method.edits:
        s = subject.resolve(site)
        if s in resolved:
            raise InvalidArgumentError(f"method {method.name!r} edits {s} twice")
        resolved[s] = fn
    with torch.no_grad():
        return subject.run(X, resolved), list(resolved)


def compliance_rate(subject, method, test_negatives):
    """Fraction of the (refusing) test inputs labeled comply under ``method``."""
    res, _ = _run(subject, method, _check_nonempty(test_negatives))
    return float(np.mean(res.labels == COMPLY))


def intervention_magnitude(subject, method, test_set):
    """Mean over examples of the summed L2 change at every site the method edits."""
    X = _check_nonempty(test_set)
    res, sites = _run(subject, method, X)
    n = X.shape[0]
    l2 = np.zeros(n)
    for s in sites:
        l2 += res.edit_norms[s].numpy()
    return MagnitudeReport(np.full(n, len(sites), dtype=int), l2)


def evaluate_method(subject, method, test_negatives):
    """Compliance rate and magnitude from a single forward pass."""
    X = _check_nonempty(test_negatives)
    res, sites = _run(subject, method, X)
    l2 = np.zeros(X.shape[0])
    for s in sites:
        l2 += res.edit_norms[s].numpy()
    mag = MagnitudeReport(np.full(X.shape[0], len(sites), dtype=int), l2)
    return {"method": method.name, "rate": float(np.mean(res.labels == COMPLY)), **mag.to_dict()}


# ---- method factories ------------------------------------------------------


def no_intervention(sites=()):
    """Identity edits at ``sites`` (none by default)."""
    return Method("none", [(s, lambda h: h) for s in sites])


def _site_states(subject, X):
    sites = subject.all_sites()
    with torch.no_grad():
        res = subject.run(X, record=sites)
    return {s: res.states[s].numpy() for s in sites}


def dim_site(subject, dataset):
    """Site whose mean-difference direction best separates the training classes (earliest on ties)."""
    stats = collect_site_stats(_site_states(subject, dataset.X_pos), _site_states(subject, dataset.X_neg))
    best = max(stats, key=lambda s: (s.auc, -s.site.layer, -s.site.position))
    return best.site


def _dim_from(subject, dataset, site, scheme, alpha=None, scope="all"):
    site = subject.resolve(site)
    with torch.no_grad():
        P = subject.run(dataset.X_pos, record=[site]).states[site].numpy()
        M = subject.run(dataset.X_neg, record=[site]).states[site].numpy()
    return dim_direction(P, M, scheme, alpha, scope), site


def dim_ablation(subject, dataset, site=None):
    """Project the difference-in-means direction out of every block output at every position."""
    site = dim_site(subject, dataset) if site is None else site
    direction, _ = _dim_from(subject, dataset, site, "ablation")
    v = torch.as_tensor(direction.v)
    return Method("dim-ablate", [(s, lambda h: _torch_ablate(h, v)) for s in subject.all_sites()])


def dim_actadd(subject, dataset, site=None, alpha=None):
    """Add ``alpha v`` at every position of the extraction layer.

    ``alpha`` defaults to minus the class-mean projection gap, which moves the
    refusing mean onto the compliant one at the extraction site.
    """
    site = dim_site(subject, dataset) if site is None else site
    direction, site = _dim_from(subject, dataset, site, "actadd", alpha, scope="layer")
    delta = float(direction.alpha) * torch.as_tensor(direction.v)
    edits = [(s, lambda h: h + delta) for s in subject.all_sites() if s.layer == site.layer]
    return Method("dim-actadd", edits)


def loss_site_shift(loss_sites):
    """``h <- h + (mu_s - v_s^T h) v_s`` at every loss site, applied in causal order."""
    edits = []
    for e in sorted(loss_sites, key=lambda e: (e.site.layer, e.site.position)):
        v = torch.as_tensor(e.direction)
        mu = float(e.mu_plus)
        edits.append((e.site, lambda h, v=v, mu=mu: h + (mu - h @ v).unsqueeze(-1) * v))
    return Method("linear-at-loss-sites", edits)


def feature_clamp(fmap, site, mu_bar_plus, coord=0, name="nonlinear-clamp"):
    """Clamp feature coordinate ``coord`` to ``mu_bar_plus`` at one site."""
    spec = InterventionSpec((coord,), (mu_bar_plus,), CLAMP)
    return Method(name, [(site, lambda h: apply_nonlinear(fmap, h, spec))])


def radius_oracle(subject, radius=None):
    """Ground-truth edit: rescale the planted subspace at the planted site to ``radius`` (default ``2 r0``)."""
    radius = 2.0 * subject.config.r0 if radius is None else float(radius)
    P = subject.planted_direction_pair()

    def edit(h):
        coef = h @ P.T
        norm = torch.linalg.vector_norm(coef, dim=-1, keepdim=True).clamp_min(1e-12)
        return h + (radius * coef / norm - coef) @ P

    site = subject.resolve(Site(subject.planted_layer, subject.intervention_position))
    return Method("oracle", [(site, edit)])


# ---- analyses --------------------------------------------------------------


def linear_at_loss_sites(subject, loss_sites, test_set):
    return compliance_rate(subject, loss_site_shift(loss_sites), test_set)


def _trained_clamp(subject, dataset, config, name):
    fmap, loss_sites, report = train_fmap(subject, dataset, config)
    method = feature_clamp(fmap, subject.resolve(config.site), report.mu_bar_plus,
                           config.coords[0], name=name)
    return method, fmap, loss_sites, report


def layer_sweep(subject, dataset, base_config=None, layers=None):
    """Retrain from scratch at each layer with everything else fixed; score on the test negatives.

    A layer whose training fails (no supervision, divergence, inversion
    failure) is recorded with rate 0 and its error message.
    """
    base_config = base_config or TrainConfig()
    layers = list(range(subject.n_layers)) if layers is None else list(layers)
    if len(layers) < 2:
        raise InvalidArgumentError("a sweep needs at least two layers")
    rows = []
    for layer in layers:
        config = replace(base_config, layer=int(layer))
        try:
            method, *_ = _trained_clamp(subject, dataset, config, "nonlinear-clamp")
            out = evaluate_method(subject, method, dataset.X_neg_test)
            rows.append({"layer": int(layer), "rate": out["rate"], "magnitude": out["mean_l2"], "error": None})
        except (NoSupervisionError, TrainingError, InversionError) as exc:
            logger.warning("layer %d failed: %s", layer, exc)
            rows.append({"layer": int(layer), "rate": 0.0, "magnitude": float("nan"), "error": str(exc)})
    return SweepResult(rows)


def run_linear_fmap_ablation(subject, dataset, config=None):
    """Train the same pipeline with the i-ResNet and with an orthogonal linear map; return both rates."""
    config = config or TrainConfig()
    rates = {}
    for kind in ("linear", "iresnet"):
        cfg = replace(config, feature_map=kind)
        method, *_ = _trained_clamp(subject, dataset, cfg, kind)
        rates["nonlinear" if kind == "iresnet" else "linear"] = compliance_rate(
            subject, method, dataset.X_neg_test)
    return rates
