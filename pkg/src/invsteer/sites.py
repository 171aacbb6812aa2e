"""Loss-site machinery: per-site mean-difference directions, AUC gating and the hinge loss."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from ._validation import as_tensor
from .exceptions import InvalidArgumentError, NoSupervisionError
from .subject import Site

__all__ = [
    "SiteStats",
    "LossSiteSet",
    "auc",
    "mean_diff_stats",
    "collect_site_stats",
    "select_sites",
    "hinge_loss",
    "hinge_terms",
]

DEGENERATE_NORM = 1e-10


@dataclass(frozen=True)
class SiteStats:
    site: Site
    direction: np.ndarray
    mu_plus: float
    auc: float
    degenerate: bool = False

    def as_dict(self):
        return {"site": self.site.as_dict(), "direction": self.direction.tolist(),
                "mu_plus": self.mu_plus, "auc": self.auc}

    @classmethod
    def from_dict(cls, obj):
        return cls(Site.from_dict(obj["site"]), np.asarray(obj["direction"], dtype=np.float64),
                   float(obj["mu_plus"]), float(obj["auc"]))


@dataclass(frozen=True)
class LossSiteSet:
    entries: tuple
    tau: float

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def sites(self):
        return [e.site for e in self.entries]

    def to_json(self, path=None):
        text = json.dumps({"tau": self.tau, "entries": [e.as_dict() for e in self.entries]}, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source):
        text = str(source) if str(source).lstrip().startswith("{") else Path(source).read_text()
        obj = json.loads(text)
        return cls(tuple(SiteStats.from_dict(e) for e in obj["entries"]), float(obj["tau"]))


def auc(scores_plus, scores_minus):
    """Probability that a positive score beats a negative one, ties counting one half.

    Computed from mid-ranks (Mann-Whitney U). Rank sums are half-integers, so
    the result is exact in float64 and equals the pairwise count.
    """
    sp = np.asarray(scores_plus, dtype=np.float64).ravel()
    sm = np.asarray(scores_minus, dtype=np.float64).ravel()
    if sp.size == 0 or sm.size == 0:
        raise InvalidArgumentError("auc needs at least one score per class")
    ranks = rankdata(np.concatenate([sp, sm]), method="average")
    u = ranks[: sp.size].sum() - sp.size * (sp.size + 1) / 2.0
    return float(u / (sp.size * sm.size))


def mean_diff_stats(site, acts_plus, acts_minus):
    """Direction, positive-class mean projection and AUC at one site.

    The direction is the unit-normalized difference ``mean(plus) - mean(minus)``;
    a difference shorter than 1e-10 marks the site degenerate.
    """
    P = np.asarray(acts_plus, dtype=np.float64)
    M = np.asarray(acts_minus, dtype=np.float64)
    if len(P) == 0 or len(M) == 0:
        raise InvalidArgumentError("both activation sets must be non-empty")
    diff = P.mean(axis=0) - M.mean(axis=0)
    norm = np.linalg.norm(diff)
    if norm < DEGENERATE_NORM:
        return SiteStats(site, np.zeros_like(diff), 0.0, 0.5, degenerate=True)
    v = diff / norm
    proj_p, proj_m = P @ v, M @ v
    return SiteStats(site, v, float(proj_p.mean()), auc(proj_p, proj_m))


def collect_site_stats(states_plus, states_minus):
    """Stats for every site present in both ``{site: (n, d)}`` dicts, layer-major order."""
    return [mean_diff_stats(s, states_plus[s], states_minus[s]) for s in sorted(states_plus)]


def is_downstream(site, origin):
    return site.layer > origin.layer or (site.layer == origin.layer and site.position > origin.position)


def select_sites(stats, tau, intervention_site):
    """Keep non-degenerate sites downstream of the edit whose AUC is at least ``tau``.

    Sites must be resolved (non-negative positions). Raises
    :class:`NoSupervisionError` when nothing survives.
    """
    if not 0.5 < tau <= 1.0:
        raise InvalidArgumentError(f"tau must lie in (0.5, 1], got {tau}")
    kept = [s for s in stats
            if not s.degenerate and s.auc >= tau and is_downstream(s.site, intervention_site)]
    if not kept:
        raise NoSupervisionError(
            f"no site downstream of {intervention_site} reaches AUC >= {tau}; nothing to train on")
    kept.sort(key=lambda s: (s.site.layer, s.site.position))
    return LossSiteSet(tuple(kept), float(tau))


def hinge_terms(projections, loss_sites):
    """Per-site ``max(0, mu_s - proj_s)``; projections may be scalars or batches (tensors allowed)."""
    terms = {}
    for e in loss_sites:
        if e.site not in projections:
            raise InvalidArgumentError(f"no projection supplied for loss site {e.site}")
        p = projections[e.site]
        if isinstance(p, torch.Tensor):
            terms[e.site] = torch.clamp(e.mu_plus - p, min=0.0)
        else:
            terms[e.site] = np.maximum(0.0, e.mu_plus - np.asarray(p, dtype=np.float64))
    return terms


def hinge_loss(projections, loss_sites):
    """``sum_s max(0, mu_s - v_s^T h_s)`` over the loss sites."""
    terms = hinge_terms(projections, loss_sites)
    total = sum(terms.values())
    return total if isinstance(total, torch.Tensor) else float(np.sum(total))


def project(states, loss_sites):
    """``{site: v_s^T h_s}`` for a dict of ``(n, d)`` tensors."""
    out = {}
    for e in loss_sites:
        v = as_tensor(e.direction, "direction")
        out[e.site] = states[e.site] @ v
    return out
