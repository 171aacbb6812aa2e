"""A small causal residual-stream model with a planted non-linear feature.

The model is the object under intervention. Its behavior (comply or refuse)
is decided by the radius of a 2-D vector that layer ``planted_layer`` writes
into a dedicated subspace at the intervention position. Radius is invisible to
every linear probe of that state when the angle is uniform, so linear edits
there cannot move it in a controlled way.

Layout of the canonical residual stream (before a fixed random rotation):

* ``IN``  (2 dims): raw planted vector, present only at ``source_position``.
* ``PL``  (2 dims): planted subspace, written at the planted layer and position.
  It shares dims with ``IN``; the two never occupy the same position.
* ``ANG`` (2 dims): unit angle code of the planted vector, written next to ``PL``.
* ``CP``  (2 dims): copy of ``PL`` at the last position, read by the output head.
  It shares dims with ``ANG``.
* ``Q``   : a resting level ``q_rest`` plus monotone functions of the planted
  radius, written one layer later at the planted position and every later
  position.
* ``F``   : squashed mixtures of ``Q``, written two layers after the planted layer.
* ``N``   : nuisance noise carried and mixed along the whole sequence.

Every write replaces the content of the dims it owns, so an edit made before
the writing layer is overwritten. Information only flows to equal or later
positions.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import DTYPE, as_tensor, check_positive_int
from .exceptions import InvalidArgumentError
from .serialization import decode_array, dump_container, encode_array, load_container

COMPLY = 1
REFUSE = 0

__all__ = [
    "COMPLY",
    "REFUSE",
    "Site",
    "SubjectConfig",
    "Subject",
    "RunResult",
    "ContrastiveDataset",
    "build_subject",
    "forward_with_hooks",
    "generate_dataset",
    "load_subject",
]


@dataclass(frozen=True, order=True)
class Site:
    """Address of one block-output hidden state: ``(layer, position)``.

    Negative positions count from the end of the sequence (``-1`` is the last
    token). Ordering is layer-major, then position.
    """

    layer: int
    position: int
    point: str = "block_output"

    def resolve(self, n_layers, seq_len):
        if self.point != "block_output":
            raise InvalidArgumentError(f"unknown stream point {self.point!r}")
        pos = self.position + seq_len if self.position < 0 else self.position
        if not 0 <= self.layer < n_layers or not 0 <= pos < seq_len:
            raise InvalidArgumentError(f"site {self} does not resolve for L={n_layers}, T={seq_len}")
        return Site(self.layer, pos, self.point)

    def as_dict(self):
        return {"layer": self.layer, "position": self.position, "point": self.point}

    @classmethod
    def from_dict(cls, obj):
        return cls(int(obj["layer"]), int(obj["position"]), obj.get("point", "block_output"))

    def __str__(self):
        return f"L{self.layer}:P{self.position}"


@dataclass
class SubjectConfig:
    n_layers: int = 6
    d: int = 16
    seq_len: int = 8
    r0: float = 1.0
    planted_layer: int = 2
    position: int = -3
    source_position: int = 1
    radius_range: tuple = (0.3, 2.0)
    margin: float = 0.05
    nuisance_scale: float = 0.3
    readout_weight: float = 0.5
    angle_scale: float = 1.0
    q_rest: float = 6.0
    seed: int = 7

    def validate(self):
        if self.n_layers < 4:
            raise InvalidArgumentError(f"n_layers must be >= 4, got {self.n_layers}")
        if self.d < 8:
            raise InvalidArgumentError(f"d must be >= 8, got {self.d}")
        if not self.r0 > 0:
            raise InvalidArgumentError(f"r0 must be > 0, got {self.r0}")
        if self.seq_len < 4:
            raise InvalidArgumentError(f"seq_len must be >= 4, got {self.seq_len}")
        if not 0 <= self.planted_layer <= self.n_layers - 3:
            raise InvalidArgumentError(
                f"planted_layer must be in [0, n_layers - 3], got {self.planted_layer}")
        p = self.position + self.seq_len if self.position < 0 else self.position
        if not 0 <= self.source_position < p < self.seq_len - 1:
            raise InvalidArgumentError(
                "position must come after source_position and before the last token")
        lo, hi = self.radius_range
        if not 0 < lo < self.r0 - self.margin and self.r0 + self.margin < hi:
            raise InvalidArgumentError("radius_range must straddle r0 with room for the margin")
        if self.margin < 0 or self.nuisance_scale < 0 or self.readout_weight < 0:
            raise InvalidArgumentError("margin, nuisance_scale and readout_weight must be >= 0")
        return self

    @property
    def resolved_position(self):
        return self.position + self.seq_len if self.position < 0 else self.position


@dataclass
class RunResult:
    labels: np.ndarray
    scores: torch.Tensor
    states: dict = field(default_factory=dict)
    edit_norms: dict = field(default_factory=dict)
    layer_output: torch.Tensor = None


def _layout(d):
    # IN/PL share dims (different positions), as do ANG/CP
    rest = d - 4
    n_nuis = max(1, rest // 3)
    n_q = -(-(rest - n_nuis) // 2)
    n_f = rest - n_nuis - n_q
    return {
        "IN": [0, 1], "PL": [0, 1], "ANG": [2, 3], "CP": [2, 3],
        "Q": list(range(4, 4 + n_q)),
        "F": list(range(4 + n_q, 4 + n_q + n_f)),
        "N": list(range(4 + n_q + n_f, d)),
    }


class Subject:
    """Frozen hooked model. Build it with :func:`build_subject`.

    Inputs are ``(n, seq_len, d)`` arrays in the rotated basis; hidden states at
    every :class:`Site` are ``d``-vectors in the same basis.
    """

    def __init__(self, config, rotation, pos_emb, nuis_in, nuis_bias, f_weights, f_bias):
        self.config = config
        self.layout = _layout(config.d)
        self.rotation = as_tensor(rotation, "rotation")
        self.pos_emb = as_tensor(pos_emb, "pos_emb")
        self.nuis_in = as_tensor(nuis_in, "nuis_in")
        self.nuis_bias = as_tensor(nuis_bias, "nuis_bias")
        self.f_weights = as_tensor(f_weights, "f_weights")
        self.f_bias = as_tensor(f_bias, "f_bias")

    # ---- basic properties -------------------------------------------------

    @property
    def n_layers(self):
        return self.config.n_layers

    @property
    def d(self):
        return self.config.d

    @property
    def seq_len(self):
        return self.config.seq_len

    @property
    def planted_layer(self):
        return self.config.planted_layer

    @property
    def intervention_position(self):
        return self.config.position

    def resolve(self, site):
        return site.resolve(self.n_layers, self.seq_len)

    def all_sites(self):
        return [Site(l, p) for l in range(self.n_layers) for p in range(self.seq_len)]

    def planted_direction_pair(self):
        """Rotated-basis unit vectors spanning the planted subspace."""
        return self.rotation[self.layout["PL"]].clone()

    def to_canonical(self, h):
        return h @ self.rotation.T

    def from_canonical(self, c):
        return c @ self.rotation

    def checksum(self):
        import hashlib

        return hashlib.sha256(self.save().encode()).hexdigest()

    # ---- inputs -----------------------------------------------------------

    def make_inputs(self, radius, angle, noise):
        """Assemble rotated-basis inputs from planted polar coordinates and nuisance noise."""
        radius = as_tensor(radius, "radius").reshape(-1)
        angle = as_tensor(angle, "angle").reshape(-1)
        n = radius.shape[0]
        lay = self.layout
        C = torch.zeros((n, self.seq_len, self.d), dtype=DTYPE)
        C[:, self.config.source_position, lay["IN"][0]] = radius * torch.cos(angle)
        C[:, self.config.source_position, lay["IN"][1]] = radius * torch.sin(angle)
        C[:, :, lay["N"]] = self.pos_emb + as_tensor(noise, "noise").reshape(n, self.seq_len, -1)
        return self.from_canonical(C)

    def sample_inputs(self, n, rng):
        """Draw ``n`` inputs; returns ``(X, radius)``.

        Radius is uniform on ``radius_range`` minus a ``margin`` band around
        ``r0``; angle is uniform.
        """
        cfg = self.config
        lo, hi = cfg.radius_range
        width_lo = (cfg.r0 - cfg.margin) - lo
        width_hi = hi - (cfg.r0 + cfg.margin)
        t = rng.uniform(0.0, width_lo + width_hi, n)
        radius = np.where(t < width_lo, lo + t, cfg.r0 + cfg.margin + (t - width_lo))
        angle = rng.uniform(0.0, 2 * np.pi, n)
        noise = rng.normal(0.0, cfg.nuisance_scale, (n, self.seq_len, len(self.layout["N"])))
        return self.make_inputs(radius, angle, noise).numpy(), radius

    # ---- the network ------------------------------------------------------

    def _block(self, layer, H):
        """One residual block applied to rotated-basis states ``H`` of shape ``(n, T, d)``."""
        cfg, lay = self.config, self.layout
        C = self.to_canonical(H)
        p = cfg.resolved_position
        N = lay["N"]
        new = C.clone()
        if layer == cfg.planted_layer:
            # planted write: PL at the intervention position := IN at the source position
            new[:, p, lay["PL"][0]] = C[:, cfg.source_position, lay["IN"][0]]
            new[:, p, lay["PL"][1]] = C[:, cfg.source_position, lay["IN"][1]]
            src = C[:, cfg.source_position][:, lay["IN"]]
            unit = src / torch.linalg.vector_norm(src, dim=-1, keepdim=True)
            new[:, p, lay["ANG"][0]] = cfg.angle_scale * unit[:, 0]
            new[:, p, lay["ANG"][1]] = cfg.angle_scale * unit[:, 1]
        elif layer == cfg.planted_layer + 1:
            pl = C[:, p][:, lay["PL"]]
            q = self._radius_features(pl)
            for t in range(p, self.seq_len):
                new[:, t, lay["Q"]] = q
            new[:, -1, lay["CP"][0]] = pl[:, 0]
            new[:, -1, lay["CP"][1]] = pl[:, 1]
        elif layer == cfg.planted_layer + 2:
            if lay["F"]:
                q = C[:, p:][:, :, lay["Q"]]
                new[:, p:, lay["F"]] = torch.tanh((q - cfg.q_rest) @ self.f_weights.T + self.f_bias)
            new[:, p, lay["PL"][0]] = 0.0
            new[:, p, lay["PL"][1]] = 0.0
        # every block also processes the nuisance stream
        n = C[:, :, N]
        if layer % 2 == 0:
            mixed = n + 0.5 * torch.tanh(n @ self.nuis_in[layer].T + self.nuis_bias[layer])
        else:
            shifted = torch.cat([torch.zeros_like(n[:, :1]), n[:, :-1]], dim=1)
            mixed = n + 0.3 * torch.tanh(shifted @ self.nuis_in[layer].T)
        new[:, :, N] = mixed
        return self.from_canonical(new)

    def _radius_features(self, pl):
        r0 = self.config.r0
        rho2 = (pl ** 2).sum(-1)
        rho = torch.sqrt(rho2)
        bank = [
            torch.tanh(2.0 * (rho2 - r0 ** 2)),
            2.0 * rho2,
            2.0 * F.softplus(3.0 * (rho - r0)),
            3.0 * torch.sigmoid(4.0 * (rho - r0)),
        ]
        # resting level plus a radius-dependent part
        rest = self.config.q_rest
        feats = [rest + bank[j % 4] * (1.0 + 0.25 * (j // 4)) for j in range(len(self.layout["Q"]))]
        return torch.stack(feats, dim=-1)

    def _readout(self, h_last):
        """Behavior score from the final hidden state at the last position (> 0 means comply)."""
        c = self.to_canonical(h_last)
        cp = c[:, self.layout["CP"]]
        q0 = c[:, self.layout["Q"][0]]
        cfg = self.config
        return (cp ** 2).sum(-1) - cfg.r0 ** 2 + cfg.readout_weight * (q0 - cfg.q_rest)

    def run(self, X, edits=(), record=(), start_layer=0, capture_layer=None):
        """Forward pass with optional edits; the torch-level engine behind :func:`forward_with_hooks`.

        ``X`` is the input embedding when ``start_layer == 0``, otherwise the
        output of block ``start_layer - 1``. ``edits`` maps resolved sites to
        callables on ``(n, d)`` tensors. Gradients flow when inputs or edits
        carry them.
        """
        H = as_tensor(X, "X") if not isinstance(X, torch.Tensor) else X
        if H.ndim != 3 or H.shape[1:] != (self.seq_len, self.d):
            raise InvalidArgumentError(
                f"inputs must have shape (n, {self.seq_len}, {self.d}), got {tuple(H.shape)}")
        by_layer = {}
        for site, fn in dict(edits).items():
            by_layer.setdefault(site.layer, []).append((site.position, site, fn))
        wanted = {s: s for s in record}
        out = RunResult(labels=None, scores=None)
        for layer in range(start_layer, self.n_layers):
            H = self._block(layer, H)
            if layer in by_layer:
                H = H.clone()
                for pos, site, fn in sorted(by_layer[layer], key=lambda e: e[0]):
                    before = H[:, pos]
                    after = fn(before)
                    if not isinstance(after, torch.Tensor):
                        after = torch.as_tensor(np.asarray(after, dtype=np.float64))
                    if after.shape != before.shape:
                        raise InvalidArgumentError(f"edit at {site} changed the state shape")
                    if not torch.isfinite(after).all():
                        raise InvalidArgumentError(f"edit at {site} produced non-finite values")
                    out.edit_norms[site] = torch.linalg.vector_norm((after - before).detach(), dim=-1)
                    H[:, pos] = after
            for pos in range(self.seq_len):
                s = Site(layer, pos)
                if s in wanted:
                    out.states[s] = H[:, pos]
            if capture_layer == layer:
                out.layer_output = H
        out.scores = self._readout(H[:, -1])
        out.labels = (out.scores.detach() > 0).numpy().astype(int)
        return out

    # ---- persistence ------------------------------------------------------

    def to_dict(self):
        cfg = asdict(self.config)
        cfg["radius_range"] = list(cfg["radius_range"])
        return {
            "config": cfg,
            "rotation": encode_array(self.rotation),
            "pos_emb": encode_array(self.pos_emb),
            "nuis_in": encode_array(self.nuis_in),
            "nuis_bias": encode_array(self.nuis_bias),
            "f_weights": encode_array(self.f_weights),
            "f_bias": encode_array(self.f_bias),
        }

    def save(self, path=None):
        return dump_container("subject", self.to_dict(), path)

    @classmethod
    def from_dict(cls, obj):
        cfg = dict(obj["config"])
        cfg["radius_range"] = tuple(cfg["radius_range"])
        arrays = {k: decode_array(obj[k]) for k in
                  ("rotation", "pos_emb", "nuis_in", "nuis_bias", "f_weights", "f_bias")}
        return cls(SubjectConfig(**cfg).validate(), **arrays)


def load_subject(source):
    _, payload = load_container(source, "subject")
    return Subject.from_dict(payload)


def build_subject(config=None, seed=None):
    """Construct the planted subject. ``seed`` overrides ``config.seed``."""
    config = SubjectConfig() if config is None else config
    if seed is not None:
        config = SubjectConfig(**{**asdict(config), "seed": int(seed)})
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, L, T = config.d, config.n_layers, config.seq_len
    lay = _layout(d)
    rotation, r = np.linalg.qr(rng.normal(size=(d, d)))
    rotation = rotation * np.sign(np.diag(r))
    n_nuis, n_q, n_f = len(lay["N"]), len(lay["Q"]), len(lay["F"])
    pos_emb = rng.normal(0.0, 0.5, (T, n_nuis))
    nuis_in = rng.normal(0.0, 1.0 / np.sqrt(n_nuis), (L, n_nuis, n_nuis))
    nuis_bias = rng.normal(0.0, 0.1, (L, n_nuis))
    # non-negative mixing keeps every F feature monotone in the planted radius
    f_weights = np.abs(rng.normal(0.0, 0.5, (n_f, n_q)))
    f_bias = rng.normal(0.0, 0.5, n_f) - f_weights.sum(axis=1)
    return Subject(config, rotation, pos_emb, nuis_in, nuis_bias, f_weights, f_bias)


def forward_with_hooks(subject, inputs, edits=(), record=()):
    """Run the subject with edit functions at sites; returns ``(labels, states)``.

    ``edits`` is a sequence of ``(Site, fn)`` with at most one edit per site;
    ``fn`` maps an ``(n, d)`` batch to an ``(n, d)`` batch (tensor or array).
    ``states`` maps each requested site to its post-edit ``(n, d)`` array.
    """
    resolved = {}
    for site, fn in edits:
        s = subject.resolve(site)
        if s in resolved:
            raise InvalidArgumentError(f"more than one edit at {s}")
        resolved[s] = fn
    rec = [subject.resolve(s) for s in record]
    with torch.no_grad():
        res = subject.run(inputs, resolved, rec)
    states = {orig: res.states[s].numpy().copy() for orig, s in zip(record, rec)}
    return res.labels, states


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class ContrastiveDataset:
    """Comply-eliciting positives and refuse-eliciting negatives, with a held-out split.

    ``radius_*`` arrays record the planted radius of each item for diagnostics.
    """

    X_pos: np.ndarray
    X_neg: np.ndarray
    X_pos_test: np.ndarray
    X_neg_test: np.ndarray
    radius_pos: np.ndarray
    radius_neg: np.ndarray
    radius_pos_test: np.ndarray
    radius_neg_test: np.ndarray

    def to_jsonl(self, path=None):
        rows = []
        for split, label, X, radius in (
            ("train", COMPLY, self.X_pos, self.radius_pos),
            ("train", REFUSE, self.X_neg, self.radius_neg),
            ("test", COMPLY, self.X_pos_test, self.radius_pos_test),
            ("test", REFUSE, self.X_neg_test, self.radius_neg_test),
        ):
            for x, r in zip(X, radius):
                rows.append(json.dumps({"input": x.tolist(), "label": "comply" if label else "refuse",
                                        "radius": float(r), "split": split}))
        text = "\n".join(rows) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_jsonl(cls, source):
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        parts = {(s, l): ([], []) for s in ("train", "test") for l in ("comply", "refuse")}
        for line in text.splitlines():
            if line.strip():
                row = json.loads(line)
                xs, rs = parts[(row["split"], row["label"])]
                xs.append(row["input"])
                rs.append(row["radius"])

        def arr(key):
            xs, rs = parts[key]
            return np.asarray(xs, dtype=np.float64), np.asarray(rs, dtype=np.float64)

        (Xp, rp), (Xn, rn) = arr(("train", "comply")), arr(("train", "refuse"))
        (Xpt, rpt), (Xnt, rnt) = arr(("test", "comply")), arr(("test", "refuse"))
        return cls(Xp, Xn, Xpt, Xnt, rp, rn, rpt, rnt)


def generate_dataset(subject, n_pos, n_neg, seed, test_fraction=0.5, max_batches=1000):
    """Rejection-sample inputs until ``n_pos`` comply and ``n_neg`` refuse items are found.

    Each class is split into train and test parts (``test_fraction`` of the items,
    rounded down, go to test). Labels come from the subject itself.
    """
    n_pos = check_positive_int(n_pos, "n_pos")
    n_neg = check_positive_int(n_neg, "n_neg")
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidArgumentError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    pos, neg = [], []
    pos_r, neg_r = [], []
    batch = max(64, 2 * (n_pos + n_neg))
    for _ in range(max_batches):
        if len(pos) >= n_pos and len(neg) >= n_neg:
            break
        X, radius = subject.sample_inputs(batch, rng)
        labels, _ = forward_with_hooks(subject, X)
        for x, r, y in zip(X, radius, labels):
            if y == COMPLY and len(pos) < n_pos:
                pos.append(x)
                pos_r.append(r)
            elif y == REFUSE and len(neg) < n_neg:
                neg.append(x)
                neg_r.append(r)
    if len(pos) < n_pos or len(neg) < n_neg:
        raise RuntimeError(f"rejection sampling failed after {max_batches} batches")
    pos, neg = np.asarray(pos), np.asarray(neg)
    pos_r, neg_r = np.asarray(pos_r), np.asarray(neg_r)
    kp, kn = n_pos - int(n_pos * test_fraction), n_neg - int(n_neg * test_fraction)
    return ContrastiveDataset(pos[:kp], neg[:kn], pos[kp:], neg[kn:],
                              pos_r[:kp], neg_r[:kn], pos_r[kp:], neg_r[kn:])
