"""Descriptors and the pluggable scorer family (heuristic, logistic, file-backed).

Every scorer maps a candidate to a synthesizability probability in [0, 1].
Scorers are plain callables taking any object with ``id``, ``composition``
and (for structure scorers) ``structure`` attributes.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .chemcore import ChargeBalanceUndetermined, Composition, charge_balance_assignments
from .elements import NONMETALS, get_element
from .evalkit import auprc
from .structio import DEFAULT_CLASH_DISTANCE, CrystalStructure, neighbor_list

COMPOSITION_SCHEMA = "comp-v1"
STRUCTURE_SCHEMA = "struct-v1"

_PROPS = ("Z", "electronegativity", "covalent_radius", "group", "row", "mass")
_STATS = ("mean", "std", "min", "max")
COMPOSITION_FEATURES = tuple(f"{p}_{s}" for p in _PROPS for s in _STATS) + ("n_elements", "charge_balanced")
STRUCTURE_FEATURES = (
    "mean_cn", "min_cn", "min_distance", "number_density",
    "undercoordinated_fraction", "connected_network", "partial_occupancy",
)


@dataclass(frozen=True)
class DescriptorVector:
    names: tuple[str, ...]
    values: np.ndarray
    schema: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or len(vals) != len(self.names):
            raise ValueError("descriptor values must be 1-D and match the feature names")
        if len(set(self.names)) != len(self.names):
            raise ValueError("descriptor feature names must be unique")
        if not np.all(np.isfinite(vals)):
            bad = [n for n, v in zip(self.names, vals) if not math.isfinite(v)]
            raise ValueError(f"non-finite descriptor values: {bad}")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


@dataclass(frozen=True)
class ScoreVector:
    id: str
    s_c: Optional[float] = None
    s_s: Optional[float] = None

    def __post_init__(self):
        if self.s_c is None and self.s_s is None:
            raise ValueError(f"candidate {self.id}: at least one score is required")
        for name in ("s_c", "s_s"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"candidate {self.id}: {name}={v} outside [0, 1]")


# --- composition ----------------------------------------------------------

def _element_property(sym: str, prop: str) -> float:
    e = get_element(sym)
    v = getattr(e, prop)
    if v is None:
        raise ValueError(f"missing {prop} for element {sym}")
    return float(v)


def charge_balance_flag(c: Composition, states=None, max_combinations: int = 100_000) -> float:
    """1.0 if some neutral assignment exists, 0.0 if none, 0.5 if undetermined."""
    try:
        return 1.0 if charge_balance_assignments(c, states, max_combinations) else 0.0
    except (ChargeBalanceUndetermined, ValueError):
        return 0.5


def composition_descriptors(c: Composition, states=None, max_combinations: int = 100_000) -> DescriptorVector:
    """Fraction-weighted element-property statistics plus element count and charge balance."""
    if not c:
        raise ValueError("empty composition")
    syms = list(c)
    w = np.array([float(c[s]) for s in syms])
    w = w / w.sum()
    vals: list[float] = []
    for prop in _PROPS:
        x = np.array([_element_property(s, prop) for s in syms])
        mean = float(w @ x)
        std = math.sqrt(max(float(w @ (x - mean) ** 2), 0.0))
        vals += [mean, std, float(x.min()), float(x.max())]
    vals.append(float(len(syms)))
    vals.append(charge_balance_flag(c, states, max_combinations))
    return DescriptorVector(COMPOSITION_FEATURES, np.array(vals), COMPOSITION_SCHEMA)


def heuristic_composition_score(c: Composition, states=None, max_combinations: int = 100_000) -> float:
    """Rule-based compositional plausibility in [0, 1].

    Rewards charge balance (undetermined counts half) and penalizes more than
    five elements and an electronegativity spread above 2.5.
    """
    d = composition_descriptors(c, states, max_combinations)
    logit = -1.0 + 2.5 * d["charge_balanced"]
    logit -= 0.75 * max(0.0, d["n_elements"] - 5)
    logit -= 1.0 * max(0.0, d["electronegativity_max"] - d["electronegativity_min"] - 2.5)
    return _sigmoid(logit)


# --- structure ------------------------------------------------------------

@dataclass(frozen=True)
class DescriptorConfig:
    """Bond detection settings.

    With ``cutoff=None`` a pair is bonded when its distance is within
    ``bond_tolerance`` times the summed covalent radii (``fallback_cutoff``
    when a radius is missing); otherwise the fixed ``cutoff`` applies.
    """

    cutoff: Optional[float] = None
    bond_tolerance: float = 1.2
    fallback_cutoff: float = 2.6
    clash_distance: float = DEFAULT_CLASH_DISTANCE
    undercoordinated_below: int = 2


def _pair_cutoff(a: str, b: str, cfg: DescriptorConfig) -> float:
    if cfg.cutoff is not None:
        return cfg.cutoff
    ra, rb = get_element(a).covalent_radius, get_element(b).covalent_radius
    if ra is None or rb is None:
        return cfg.fallback_cutoff
    return cfg.bond_tolerance * (ra + rb)


def _extended(n: int, bonds: Sequence[tuple[int, int, tuple[int, int, int]]]) -> bool:
    """True if some bonded component wraps through a periodic boundary."""
    adj: list[list[tuple[int, tuple[int, int, int]]]] = [[] for _ in range(n)]
    for i, j, img in bonds:
        adj[i].append((j, img))
    offset: list[Optional[tuple[int, int, int]]] = [None] * n
    for start in range(n):
        if offset[start] is not None:
            continue
        offset[start] = (0, 0, 0)
        stack = [start]
        while stack:
            i = stack.pop()
            oi = offset[i]
            for j, img in adj[i]:
                want = (oi[0] + img[0], oi[1] + img[1], oi[2] + img[2])
                if offset[j] is None:
                    offset[j] = want
                    stack.append(j)
                elif offset[j] != want:
                    return True
    return False


def structure_descriptors(s: CrystalStructure, config: DescriptorConfig = DescriptorConfig()) -> DescriptorVector:
    """Coordination, packing and connectivity features.

    Metal-metal contacts are not counted as bonds when the structure also
    contains a nonmetal, so cation sublattices in ionic solids do not inflate
    coordination numbers.
    """
    p1 = s.expand_p1()
    sites = p1.sites
    n = len(sites)
    if n == 0:
        raise ValueError("structure has no sites")
    elements = sorted({x.element for x in sites})
    if config.cutoff is not None:
        search = config.cutoff
    else:
        search = max(_pair_cutoff(a, b, config) for a in elements for b in elements)
    pair_cut = {(a, b): _pair_cutoff(a, b, config) for a in elements for b in elements}
    ionic = any(e in NONMETALS for e in elements)

    neighbors = neighbor_list(p1, search, clash_distance=config.clash_distance, on_clash="keep")
    min_d = min((nb.distance for nb in neighbors), default=search)
    cn = np.zeros(n, dtype=int)
    bonds = []
    for nb in neighbors:
        a, b = sites[nb.i].element, sites[nb.j].element
        if ionic and a not in NONMETALS and b not in NONMETALS:
            continue
        if nb.distance <= pair_cut[(a, b)]:
            cn[nb.i] += 1
            bonds.append((nb.i, nb.j, nb.image))
    occ = sum(x.occupancy for x in sites)
    vals = [
        float(cn.mean()),
        float(cn.min()),
        float(min_d),
        occ / p1.lattice.volume,
        float(np.mean(cn < config.undercoordinated_below)),
        1.0 if _extended(n, bonds) else 0.0,
        1.0 if any(x.occupancy < 1.0 for x in sites) else 0.0,
    ]
    return DescriptorVector(STRUCTURE_FEATURES, np.array(vals), STRUCTURE_SCHEMA)


def heuristic_structure_score(s: CrystalStructure, config: DescriptorConfig = DescriptorConfig()) -> float:
    """Rule-based structural plausibility in [0, 1]; 0 for clashing atoms."""
    d = structure_descriptors(s, config)
    if d["min_distance"] < config.clash_distance:
        return 0.0
    logit = -1.5 + 2.5 * d["connected_network"] + 1.5 * min(d["mean_cn"], 6.0) / 6.0
    logit -= 3.0 * d["undercoordinated_fraction"]
    logit -= 1.0 * d["partial_occupancy"]
    return _sigmoid(logit)


# --- logistic model -------------------------------------------------------

_TINY = np.finfo(float).tiny
_BELOW_ONE = 1.0 - np.finfo(float).epsneg


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    if np.any(np.isnan(z)):
        raise ValueError("NaN logit")
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    out = np.clip(out, _TINY, _BELOW_ONE)
    return float(out) if out.ndim == 0 else out


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    feature_names: tuple[str, ...]
    schema: str
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.feature_names),):
            raise ValueError("weight dimension must equal the schema dimension")
        k = len(self.feature_names)
        self.mean = np.zeros(k) if self.mean is None else np.asarray(self.mean, dtype=float)
        self.scale = np.ones(k) if self.scale is None else np.asarray(self.scale, dtype=float)

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        with np.errstate(over="ignore"):  # saturated logits are clipped by the sigmoid
            return ((X - self.mean) / self.scale) @ self.weights + self.bias


def predict(model: LogisticModel, d: DescriptorVector) -> float:
    if d.schema != model.schema or tuple(d.names) != tuple(model.feature_names):
        raise ValueError(f"schema mismatch: model {model.schema!r}, descriptor {d.schema!r}")
    return float(_sigmoid(model.logits(d.values)[0]))


def bce_loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean binary cross-entropy of ``sigmoid(X w + b)`` and its gradient."""
    z = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(w @ w))
    # unclipped logistic; clipping would bias the gradient
    r = np.exp(-np.logaddexp(0.0, -z)) - y
    grad_w = X.T @ r / len(y) + l2 * w
    grad_b = float(np.mean(r))
    return loss, grad_w, grad_b


@dataclass(frozen=True)
class LogisticConfig:
    learning_rate: float = 0.1
    max_epochs: int = 2000
    patience: int = 20
    eval_every: int = 1
    min_delta: float = 0.0
    l2: float = 0.0
    standardize: bool = True


def _as_matrix(data) -> tuple[np.ndarray, np.ndarray, Optional[tuple[str, ...]], Optional[str]]:
    X, y = data
    names = schema = None
    if len(X) and isinstance(X[0], DescriptorVector):
        names, schema = tuple(X[0].names), X[0].schema
        X = np.array([d.values for d in X])
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("training data must be a nonempty (n, k) matrix with n labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    return X, y, names, schema


def train_logistic(train, val, config: LogisticConfig = LogisticConfig(),
                   feature_names: Optional[Sequence[str]] = None, schema: str = "custom") -> LogisticModel:
    """Full-batch gradient descent on BCE with early stopping on validation AUPRC.

    ``train`` and ``val`` are ``(X, y)`` pairs where ``X`` is a matrix or a
    list of :class:`DescriptorVector`.  The returned model is the snapshot
    with the best validation AUPRC; the per-evaluation trace is stored in
    ``metadata["trace"]`` as ``(epoch, train_loss, val_auprc)`` tuples.
    """
    Xt, yt, names, sch = _as_matrix(train)
    Xv, yv, _, _ = _as_matrix(val)
    if yt.min() == yt.max():
        raise ValueError("training set contains a single class")
    if not yv.any():
        raise ValueError("validation set needs at least one positive for AUPRC")
    k = Xt.shape[1]
    names = tuple(feature_names) if feature_names is not None else names or tuple(f"x{i}" for i in range(k))
    schema = sch or schema
    if Xv.shape[1] != k:
        raise ValueError("train and validation feature dimensions differ")

    if config.standardize:
        mean = Xt.mean(axis=0)
        scale = Xt.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(k), np.ones(k)
    Zt = (Xt - mean) / scale
    Zv = (Xv - mean) / scale

    w = np.zeros(k)
    b = 0.0
    trace = []
    best = (-np.inf, w.copy(), b, 0)
    waited = 0
    epoch = 0
    while True:
        loss, gw, gb = bce_loss_and_grad(w, b, Zt, yt, config.l2)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        if epoch % config.eval_every == 0:
            score = auprc(Zv @ w + b, yv.astype(int))
            trace.append((epoch, loss, score))
            if score > best[0] + config.min_delta:
                best = (score, w.copy(), b, epoch)
                waited = 0
            else:
                waited += 1
                if waited >= config.patience:
                    break
        if epoch >= config.max_epochs:
            break
        w = w - config.learning_rate * gw
        b = b - config.learning_rate * gb
        epoch += 1

    best_score, bw, bb, best_epoch = best
    meta = {"epochs": epoch, "best_epoch": best_epoch, "best_val_auprc": best_score, "trace": trace}
    return LogisticModel(bw, float(bb), names, schema, mean, scale, meta)


_MODEL_HEADER = "# synthscreen logistic model"


def save_model(model: LogisticModel, path: str | Path) -> None:
    """Versioned line-oriented text: schema, bias, then one line per feature."""
    lines = [_MODEL_HEADER, "format 1", f"schema {model.schema}", f"bias {model.bias!r}"]
    for name, w, m, s in zip(model.feature_names, model.weights, model.mean, model.scale):
        lines.append(f"feature {name} {float(w)!r} {float(m)!r} {float(s)!r}")
    meta = {k: v for k, v in model.metadata.items() if k != "trace"}
    lines.append("meta " + json.dumps(meta, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> LogisticModel:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != _MODEL_HEADER:
        raise ValueError(f"{path}: not a synthscreen logistic model file")
    schema, bias, meta = None, None, {}
    names, ws, ms, ss = [], [], [], []
    for line in text[1:]:
        key, _, rest = line.partition(" ")
        if key == "format" and rest.strip() != "1":
            raise ValueError(f"{path}: unsupported model format {rest!r}")
        elif key == "schema":
            schema = rest.strip()
        elif key == "bias":
            bias = float(rest)
        elif key == "feature":
            name, w, m, s = rest.split()
            names.append(name)
            ws.append(float(w))
            ms.append(float(m))
            ss.append(float(s))
        elif key == "meta":
            meta = json.loads(rest)
    if schema is None or bias is None:
        raise ValueError(f"{path}: model file lacks schema or bias")
    return LogisticModel(np.array(ws), bias, tuple(names), schema, np.array(ms), np.array(ss), meta)


# --- scorer objects -------------------------------------------------------

class MissingScoreError(KeyError):
    pass


class NoStructureError(MissingScoreError):
    """A structure scorer was asked about a candidate without a structure."""


class HeuristicCompositionScorer:
    lookup_only = False

    def __init__(self, states=None, max_combinations: int = 100_000):
        self.states = states
        self.max_combinations = max_combinations

    def __call__(self, candidate) -> float:
        return heuristic_composition_score(candidate.composition, self.states, self.max_combinations)


class HeuristicStructureScorer:
    lookup_only = False

    def __init__(self, config: DescriptorConfig = DescriptorConfig()):
        self.config = config

    def __call__(self, candidate) -> float:
        s = candidate.structure
        if s is None:
            raise NoStructureError(f"candidate {candidate.id} has no structure")
        return heuristic_structure_score(s, self.config)


class LogisticScorer:
    lookup_only = False

    def __init__(self, model: LogisticModel, kind: str = "composition", config: DescriptorConfig = DescriptorConfig()):
        if kind not in ("composition", "structure"):
            raise ValueError("kind must be 'composition' or 'structure'")
        self.model, self.kind, self.config = model, kind, config

    def __call__(self, candidate) -> float:
        if self.kind == "composition":
            d = composition_descriptors(candidate.composition)
        else:
            if candidate.structure is None:
                raise NoStructureError(f"candidate {candidate.id} has no structure")
            d = structure_descriptors(candidate.structure, self.config)
        return predict(self.model, d)


class FileScorer:
    """Replays externally computed probabilities keyed by candidate id."""

    lookup_only = True

    def __init__(self, scores: Mapping[str, float], source: str = ""):
        self.scores = dict(scores)
        self.source = source

    def __call__(self, candidate) -> float:
        key = candidate if isinstance(candidate, str) else candidate.id
        try:
            return self.scores[key]
        except KeyError:
            raise MissingScoreError(f"no score for id {key!r} in {self.source or 'score file'}") from None

    def __contains__(self, key: str) -> bool:
        return key in self.scores

    def __len__(self) -> int:
        return len(self.scores)


def file_scorer_load(path: str | Path) -> FileScorer:
    """Load ``id,probability`` rows (header line required)."""
    scores: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["id", "probability"]:
            raise ValueError(f"{path}: expected header 'id,probability'")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected two columns")
            key = row[0].strip()
            try:
                p = float(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric probability {row[1]!r}") from None
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{path}:{lineno}: probability {p} outside [0, 1]")
            if key in scores:
                raise ValueError(f"{path}:{lineno}: duplicate id {key!r}")
            scores[key] = p
    return FileScorer(scores, str(path))
