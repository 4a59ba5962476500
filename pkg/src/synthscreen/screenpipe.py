"""Screening funnel: ingest, score, fuse, rank-threshold and element filters.

Candidates are streamed once.  Per candidate only the id, formula, source,
two scores and a small filter bitmask are retained, so memory grows with the
rank table rather than with the candidate objects.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional

import numpy as np

from .chemcore import Composition, FormulaError, contains_any, parse_formula
from .elements import PLATINOIDS
from .fusion import RankTable, rank_average_columns
from .scoring import MissingScoreError, NoStructureError
from .structio import CrystalStructure, parse_cif

log = logging.getLogger(__name__)

DEFAULT_TOXIC = ("Cd", "Hg", "Pb", "Tl", "As", "Be", "Os")
# Anions other than oxygen rejected by the strict oxide filter.
MIXED_ANIONS = ("F", "Cl", "Br", "I", "N", "S", "Se", "H")
DEFAULT_PROTOTYPES = (
    "A", "AB", "AB2", "AB3", "A2B3", "A2B5", "AB4", "A3B4",
    "ABC2", "ABC3", "ABC4", "AB2C4", "A2BC4", "A2B2C7",
)
FILTER_STAGES = ("platinoid", "oxide", "toxicity")


@dataclass(frozen=True)
class ScreenConfig:
    tau: float = 0.95
    selector: str = "rank"  # "rank" (RankAvg >= tau) or "probability" (both scores >= prob_threshold)
    prob_threshold: float = 0.5
    filters: tuple[str, ...] = FILTER_STAGES
    platinoids: tuple[str, ...] = tuple(sorted(PLATINOIDS))
    toxic: tuple[str, ...] = DEFAULT_TOXIC
    oxide_mode: str = "contains_o"  # or "strict": O present and no other anion
    strict_structures: bool = True
    max_malformed_fraction: float = 0.05
    workers: int = 0  # 0 = all available cores
    chunk_size: int = 5000
    common_prototypes: tuple[str, ...] = DEFAULT_PROTOTYPES

    def __post_init__(self):
        if self.selector not in ("rank", "probability"):
            raise ValueError(f"selector must be 'rank' or 'probability', not {self.selector!r}")
        if self.oxide_mode not in ("contains_o", "strict"):
            raise ValueError(f"oxide_mode must be 'contains_o' or 'strict', not {self.oxide_mode!r}")
        bad = [f for f in self.filters if f not in FILTER_STAGES]
        if bad:
            raise ValueError(f"unknown filter stage(s): {bad}")
        if not 0.0 <= self.max_malformed_fraction <= 1.0:
            raise ValueError("max_malformed_fraction must lie in [0, 1]")
        if self.workers < 0 or self.chunk_size < 1:
            raise ValueError("workers must be >= 0 and chunk_size positive")


class Candidate:
    """One screening unit.  The structure is parsed lazily from ``structure_path``."""

    __slots__ = ("id", "source", "composition", "formula", "structure_path", "e_above_hull", "_structure")

    def __init__(self, id: str, composition: Composition, source: str = "", formula: Optional[str] = None,
                 structure_path: Optional[str] = None, e_above_hull: Optional[float] = None,
                 structure: Optional[CrystalStructure] = None):
        self.id = id
        self.source = source
        self.composition = composition
        self.formula = formula if formula is not None else composition.formula
        self.structure_path = structure_path
        self.e_above_hull = e_above_hull
        self._structure = structure

    @property
    def structure(self) -> Optional[CrystalStructure]:
        if self._structure is None and self.structure_path is not None:
            self._structure = parse_cif(Path(self.structure_path).read_text(encoding="utf-8"))
        return self._structure

    def __repr__(self) -> str:
        return f"Candidate({self.id!r}, {self.formula!r})"


class DuplicateIdError(ValueError):
    pass


class MalformedInputError(ValueError):
    pass


class CandidateReader:
    """Streaming JSONL reader: ``{"id", "formula", "structure"?, "e_above_hull"?, "source"?}``.

    Malformed lines are skipped and counted in ``rejections``; a duplicate
    id raises; a malformed fraction above the limit aborts.
    """

    def __init__(self, path: str | Path, source: str = "", max_malformed_fraction: float = 0.05):
        self.path = Path(path)
        self.source = source
        self.max_malformed_fraction = max_malformed_fraction
        self.rejections: Counter = Counter()
        self.lines = 0
        self.accepted = 0
        if not self.path.is_file():
            raise FileNotFoundError(f"cannot read candidate file {self.path}")

    def _check_fraction(self, final: bool) -> None:
        bad = sum(self.rejections.values())
        if self.lines and bad / self.lines > self.max_malformed_fraction and (final or self.lines >= 1000):
            raise MalformedInputError(
                f"{self.path}: {bad} of {self.lines} lines malformed, above the allowed "
                f"fraction {self.max_malformed_fraction}"
            )

    def __iter__(self) -> Iterator[Candidate]:
        seen: set[str] = set()
        base = self.path.parent
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                self.lines += 1
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    self._reject("bad_json", lineno)
                    continue
                if not isinstance(rec, dict) or "id" not in rec or "formula" not in rec:
                    self._reject("missing_field", lineno)
                    continue
                cid = str(rec["id"])
                try:
                    comp = parse_formula(rec["formula"])
                except (FormulaError, TypeError):
                    self._reject("bad_formula", lineno)
                    continue
                hull = rec.get("e_above_hull")
                if hull is not None:
                    try:
                        hull = float(hull)
                    except (TypeError, ValueError):
                        self._reject("bad_hull", lineno)
                        continue
                if cid in seen:
                    raise DuplicateIdError(f"{self.path}:{lineno}: duplicate candidate id {cid!r}")
                seen.add(cid)
                spath = rec.get("structure")
                if spath is not None:
                    spath = str(base / spath)
                self.accepted += 1
                yield Candidate(cid, comp, rec.get("source") or self.source, rec["formula"], spath, hull)
        self._check_fraction(final=True)

    def _reject(self, reason: str, lineno: int) -> None:
        self.rejections[reason] += 1
        log.debug("%s:%d rejected (%s)", self.path, lineno, reason)
        self._check_fraction(final=False)


def ingest(path: str | Path, source: str = "", max_malformed_fraction: float = 0.05) -> CandidateReader:
    return CandidateReader(path, source, max_malformed_fraction)


def common_formula_flag(c: Composition, prototypes: Iterable[str] = DEFAULT_PROTOTYPES) -> bool:
    """True if the anonymous formula (e.g. ``AB2`` for DyO2) is a listed common prototype."""
    protos = set(prototypes)
    return bool(protos) and c.anonymous_formula in protos


@dataclass
class StageRecord:
    name: str
    n_in: int
    n_out: int
    rejections: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "input": self.n_in, "output": self.n_out,
                "rejections": dict(sorted(self.rejections.items()))}


@dataclass
class FunnelReport:
    stages: list[StageRecord] = field(default_factory=list)

    def add(self, name: str, n_in: int, n_out: int, rejections: Optional[Mapping[str, int]] = None) -> None:
        if self.stages and self.stages[-1].n_out != n_in:
            raise AssertionError(f"stage {name} input {n_in} != previous output {self.stages[-1].n_out}")
        rej = {k: int(v) for k, v in (rejections or {}).items() if v}
        if n_in != n_out + sum(rej.values()):
            raise AssertionError(f"stage {name}: counts not conserved")
        self.stages.append(StageRecord(name, n_in, n_out, rej))

    def to_json(self) -> str:
        return json.dumps({"stages": [s.to_dict() for s in self.stages]}, indent=2, sort_keys=True) + "\n"


_PLAT, _NONOX, _TOXIC = 1, 2, 4
_FLAG_OF_STAGE = {"platinoid": _PLAT, "oxide": _NONOX, "toxicity": _TOXIC}
_REASON_OF_STAGE = {"platinoid": "contains_platinoid", "oxide": "non_oxide", "toxicity": "toxic_element"}


def _flags(c: Composition, cfg: ScreenConfig) -> int:
    f = 0
    if contains_any(c, cfg.platinoids):
        f |= _PLAT
    if "O" not in c or (cfg.oxide_mode == "strict" and contains_any(c, MIXED_ANIONS)):
        f |= _NONOX
    if contains_any(c, cfg.toxic):
        f |= _TOXIC
    return f


# scorers installed once per worker process
_WORKER_SCORERS: dict = {}


def _init_worker(scorers) -> None:
    _WORKER_SCORERS.clear()
    _WORKER_SCORERS.update(scorers)


def _score_one(cand: Candidate, scorers: Mapping[str, Callable]) -> tuple[dict[str, float], Optional[str]]:
    out = {}
    for m, scorer in scorers.items():
        try:
            v = float(scorer(cand))
        except NoStructureError:
            if m == "s":
                out[m] = float("nan")
                continue
            return out, f"{m}_missing_score"
        except MissingScoreError:
            return out, f"{m}_missing_score"
        except Exception as e:  # scorer failure on one candidate must not stop the run
            log.debug("scorer %s failed on %s: %s", m, cand.id, e)
            return out, f"{m}_scorer_error:{type(e).__name__}"
        if not (0.0 <= v <= 1.0):
            return out, f"{m}_out_of_range"
        out[m] = v
    return out, None


def _score_chunk(chunk: list[Candidate]):
    return [_score_one(c, _WORKER_SCORERS) for c in chunk]


@dataclass
class ShortlistRow:
    id: str
    formula: str
    source: str
    s_c: float
    s_s: float
    rank_c: int
    rank_s: int
    rank_avg: float
    common_formula: bool
    imputed: bool


SHORTLIST_COLUMNS = ("id", "formula", "source", "s_c", "s_s", "rank_c", "rank_s", "rank_avg",
                     "common_formula", "imputed_structure_score")


def shortlist_csv(rows: Iterable[ShortlistRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SHORTLIST_COLUMNS)
    for r in rows:
        w.writerow([
            r.id, r.formula, r.source, repr(r.s_c), repr(r.s_s), r.rank_c, r.rank_s,
            repr(r.rank_avg), int(r.common_formula), int(r.imputed),
        ])
    return buf.getvalue()


@dataclass
class FunnelResult:
    table: Optional[RankTable]
    report: FunnelReport
    shortlist: list[ShortlistRow]


def _scored_stream(candidates: Iterable[Candidate], scorers, cfg: ScreenConfig):
    workers = cfg.workers or os.cpu_count() or 1
    parallel = workers > 1 and not all(getattr(s, "lookup_only", False) for s in scorers.values())
    if not parallel:
        for c in candidates:
            yield c, _score_one(c, scorers)
        return
    it = iter(candidates)
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(dict(scorers),)) as pool:
        while True:
            # bounded number of chunks in flight keeps memory flat
            chunks = [list(islice(it, cfg.chunk_size)) for _ in range(workers * 2)]
            chunks = [ch for ch in chunks if ch]
            if not chunks:
                break
            for ch, results in zip(chunks, pool.map(_score_chunk, chunks)):
                yield from zip(ch, results)


def run_funnel(candidates: Iterable[Candidate], scorers: Mapping[str, Callable],
               config: ScreenConfig = ScreenConfig()) -> FunnelResult:
    """Score -> fuse -> select -> platinoid / oxide / toxicity filters.

    ``scorers`` maps ``"c"`` and ``"s"`` to callables returning probabilities.
    A candidate without a structure has its structure score imputed with the
    pool median only when ``strict_structures`` is off; otherwise it is
    rejected at the scoring stage.
    """
    if set(scorers) != {"c", "s"}:
        raise ValueError("scorers must provide exactly the 'c' and 's' models")
    cfg = config
    ids: list[str] = []
    formulas: list[str] = []
    sources: list[str] = []
    s_c: list[float] = []
    s_s: list[float] = []
    flags = bytearray()
    protos = set(cfg.common_prototypes)
    common = bytearray()
    score_rej: Counter = Counter()
    # compositions repeat heavily in real pools; flags depend only on the composition
    comp_meta: dict[Composition, tuple[int, int]] = {}
    n_in = 0
    for cand, (vals, err) in _scored_stream(candidates, scorers, cfg):
        n_in += 1
        if err is None and np.isnan(vals.get("s", 0.0)) and cfg.strict_structures:
            err = "no_structure"
        if err is not None:
            score_rej[err] += 1
            continue
        ids.append(cand.id)
        formulas.append(cand.formula)
        sources.append(cand.source)
        s_c.append(vals["c"])
        s_s.append(vals["s"])
        comp = cand.composition
        meta = comp_meta.get(comp)
        if meta is None:
            meta = comp_meta[comp] = (_flags(comp, cfg), 1 if protos and comp.anonymous_formula in protos else 0)
        flags.append(meta[0])
        common.append(meta[1])

    report = FunnelReport()
    reader_stats = candidates if isinstance(candidates, CandidateReader) else None
    if reader_stats is not None:
        report.add("ingest", reader_stats.lines, reader_stats.accepted, reader_stats.rejections)
    else:
        report.add("ingest", n_in, n_in)
    report.add("score", n_in, len(ids), score_rej)

    n = len(ids)
    if n == 0:
        report.add("fuse", 0, 0)
        report.add("select", 0, 0)
        for stage in cfg.filters:
            report.add(stage, 0, 0)
        return FunnelResult(None, report, [])

    sc = np.array(s_c)
    ss = np.array(s_s)
    imputed = np.isnan(ss)
    if imputed.any():
        if imputed.all():
            raise ValueError("no structure scores available to impute from")
        ss[imputed] = float(np.median(ss[~imputed]))
    table = rank_average_columns(ids, {"c": sc, "s": ss})
    report.add("fuse", n, n)

    if cfg.selector == "rank":
        keep = table.rank_avg >= cfg.tau
        reason = "rank_avg_below_tau"
    else:
        keep = (sc >= cfg.prob_threshold) & (ss >= cfg.prob_threshold)
        reason = "probability_below_threshold"
    report.add("select", n, int(keep.sum()), {reason: int((~keep).sum())})

    fl = np.frombuffer(bytes(flags), dtype=np.uint8)
    for stage in cfg.filters:
        hit = keep & ((fl & _FLAG_OF_STAGE[stage]) != 0)
        before = int(keep.sum())
        keep = keep & ~hit
        report.add(stage, before, int(keep.sum()), {_REASON_OF_STAGE[stage]: int(hit.sum())})

    idx = np.flatnonzero(keep)
    order = sorted(idx.tolist(), key=lambda k: (-table.rank_avg[k], ids[k]))
    rows = [
        ShortlistRow(ids[k], formulas[k], sources[k], float(sc[k]), float(ss[k]), int(table.ranks["c"][k]),
                     int(table.ranks["s"][k]), float(table.rank_avg[k]), bool(common[k]), bool(imputed[k]))
        for k in order
    ]
    return FunnelResult(table, report, rows)
