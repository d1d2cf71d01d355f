"""Top-k accuracy evaluation, unseen-ratio sweeps and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import DatasetSplit, PoiSet, Target, UserHistory, find_threshold_for_unseen_ratio, temporal_split, write_json
from .errors import ConfigError
from .prior import ProximityPrior
from .ranking import ForecastRanking, top_k

log = logging.getLogger(__name__)

K_VALUES = (1, 5, 10, 20)
# rank given to a truth absent from the candidate set; a miss at every k
MISSING = np.iinfo(np.int64).max


def accuracy_at_k(rankings: Iterable[tuple[ForecastRanking, str]], k: int) -> float:
    """Fraction of (ranking, true poi) pairs whose truth is among the top ``k``."""
    hits = [truth in top_k(r, k) for r, truth in rankings]
    if not hits:
        raise ValueError("accuracy over an empty target collection")
    return float(np.mean(hits))


def _acc_from_ranks(ranks: np.ndarray, k_values) -> dict[int, float]:
    return {k: float(np.mean(ranks < k)) for k in k_values}


@dataclass
class EvalReport:
    method: str
    threshold: int
    unseen_ratio: float
    acc_at: dict[int, float]
    unseen_acc_at: dict[int, float] | None
    n_targets: int
    n_unseen_targets: int

    @property
    def n_seen_targets(self) -> int:
        return self.n_targets - self.n_unseen_targets

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "threshold": self.threshold,
            "unseen_ratio": self.unseen_ratio,
            "acc_at": {str(k): v for k, v in self.acc_at.items()},
            "unseen_acc_at": None if self.unseen_acc_at is None
            else {str(k): v for k, v in self.unseen_acc_at.items()},
            "n_targets": self.n_targets,
            "n_unseen_targets": self.n_unseen_targets,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        conv = (lambda m: None if m is None else {int(k): float(v) for k, v in m.items()})
        return cls(d["method"], int(d["threshold"]), float(d["unseen_ratio"]), conv(d["acc_at"]),
                   conv(d["unseen_acc_at"]), int(d["n_targets"]), int(d["n_unseen_targets"]))


def evaluate(method, split: DatasetSplit, k_values: Sequence[int] = K_VALUES, *,
             candidates: PoiSet | None = None, pois: PoiSet | None = None,
             targets: Sequence[Target] | None = None, dump_path: str | os.PathLike | None = None,
             dump_top: int = 50) -> EvalReport:
    """Acc@k over all test targets and over targets whose true POI is unseen.

    Every target is ranked against the same candidate set (default: the
    method's full PoiSet); only the target filter differs between the two
    subsets. A truth missing from the candidate set counts as a miss.
    """
    targets = split.test if targets is None else tuple(targets)
    if not targets:
        raise ValueError("no targets to evaluate")
    if candidates is None:
        candidates = pois if pois is not None else method.state.featurizer.pois
    ranks = np.empty(len(targets), dtype=np.int64)
    unseen = np.zeros(len(targets), dtype=bool)
    dump = open(dump_path, "w") if dump_path is not None else None
    try:
        for i, (t, ranking) in enumerate(method.rankings(split, targets, candidates)):
            truth = split.visit(t).poi_id
            r = ranking.rank_of(truth)
            ranks[i] = MISSING if r is None else r
            unseen[i] = truth in split.unseen_poi_ids
            if dump is not None:
                top = [{"poi_id": ranking.candidate_ids[j], "score": float(ranking.scores[j])}
                       for j in ranking.order[:dump_top]]
                dump.write(json.dumps({"user_id": t.user_id, "anchor_poi": ranking.anchor_poi, "truth_poi": truth,
                                       "truth_rank": None if r is None else r + 1, "topk": top}) + "\n")
    finally:
        if dump is not None:
            dump.close()

    unseen_acc = None
    if unseen.any():
        unseen_acc = _acc_from_ranks(ranks[unseen], k_values)
    else:
        log.warning("no test target has an unseen POI; unseen accuracy omitted")
    return EvalReport(method.name, split.threshold, split.unseen_ratio, _acc_from_ranks(ranks, k_values),
                      unseen_acc, len(targets), int(unseen.sum()))


# --- sweeps -------------------------------------------------------------------

def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of y on x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two points to fit a slope")
    dx = x - x.mean()
    denom = float(dx @ dx)
    if denom == 0:
        raise ValueError("x values are all equal")
    return float(dx @ (y - y.mean())) / denom


@dataclass
class Scenario:
    """Data for one sweep point."""

    pois: PoiSet
    histories: Sequence[UserHistory]
    threshold: int
    candidates: PoiSet | None = None


@dataclass
class SweepPoint:
    target_ratio: float
    realized_ratio: float
    threshold: int
    seed: int
    reports: dict[str, EvalReport]


@dataclass
class SweepResult:
    points: list[SweepPoint]
    k_values: tuple[int, ...] = K_VALUES
    slopes: dict[str, dict[int, float]] = field(default_factory=dict)

    def __post_init__(self):
        ratios = [p.realized_ratio for p in self.points]
        if any(b <= a for a, b in zip(ratios, ratios[1:])):
            raise ValueError("sweep ratios must be strictly increasing")
        if len(self.points) >= 2 and not self.slopes:
            self.slopes = self._fit()

    @property
    def methods(self) -> list[str]:
        return sorted({m for p in self.points for m in p.reports})

    def series(self, method: str, k: int) -> tuple[list[float], list[float]]:
        pts = [p for p in self.points if method in p.reports]
        return [p.realized_ratio for p in pts], [p.reports[method].acc_at[k] for p in pts]

    def _fit(self) -> dict[str, dict[int, float]]:
        out = {}
        for m in self.methods:
            out[m] = {}
            for k in self.k_values:
                x, y = self.series(m, k)
                if len(x) >= 2:
                    out[m][k] = fit_slope(x, y)
        return out

    def slope_ratios(self, reference: str = "baseline", method: str = "joint") -> dict[int, float | None]:
        """reference slope / method slope per k (None where the method's slope is 0)."""
        out = {}
        for k in self.k_values:
            a, b = self.slopes.get(reference, {}).get(k), self.slopes.get(method, {}).get(k)
            out[k] = None if a is None or not b else a / b
        return out

    def to_json(self) -> dict:
        return {
            "k_values": list(self.k_values),
            "points": [{"target_ratio": p.target_ratio, "realized_ratio": p.realized_ratio,
                        "threshold": p.threshold, "seed": p.seed,
                        "reports": {m: r.to_json() for m, r in sorted(p.reports.items())}}
                       for p in self.points],
            "slopes": {m: {str(k): v for k, v in s.items()} for m, s in sorted(self.slopes.items())},
            "mean_slope": {m: float(np.mean(list(s.values()))) for m, s in sorted(self.slopes.items()) if s},
            "slope_ratio_baseline_over_joint": {str(k): v for k, v in self.slope_ratios().items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "SweepResult":
        points = [SweepPoint(p["target_ratio"], p["realized_ratio"], p["threshold"], p["seed"],
                             {m: EvalReport.from_json(r) for m, r in p["reports"].items()})
                  for p in d["points"]]
        return cls(points, tuple(d["k_values"]))


def sweep_unseen_ratio(fit_method: Callable[[str, DatasetSplit, PoiSet, int], object],
                       methods: Sequence[str], pois: PoiSet | None, histories: Sequence[UserHistory] | None,
                       ratios: Sequence[float], k_values: Sequence[int] = K_VALUES, *, seed: int = 0,
                       scenario: Callable[[float], Scenario] | None = None) -> SweepResult:
    """Train and evaluate every method at each target unseen ratio.

    By default each point thresholds the same histories at the timestamp
    whose unseen ratio is closest to the target. ``scenario`` overrides how
    a ratio becomes data, threshold and candidate set. Unrealisable ratios
    are skipped with a warning. ``fit_method(name, split, pois, seed)``
    must return a fresh, trained forecaster.
    """
    points = []
    for i, ratio in enumerate(sorted(ratios)):
        try:
            if scenario is not None:
                sc = scenario(ratio)
            else:
                threshold, _ = find_threshold_for_unseen_ratio(histories, ratio)
                sc = Scenario(pois, histories, threshold)
            point_seed = seed + i
            split = temporal_split(sc.histories, sc.threshold, point_seed)
        except ConfigError as exc:
            log.warning("skipping unseen ratio %.2f: %s", ratio, exc)
            continue
        reports = {}
        for name in methods:
            forecaster = fit_method(name, split, sc.pois, point_seed)
            reports[name] = evaluate(forecaster, split, k_values, candidates=sc.candidates or sc.pois)
        log.info("ratio %.2f (realized %.3f): %s", ratio, split.unseen_ratio,
                 {m: r.acc_at for m, r in reports.items()})
        if points and split.unseen_ratio <= points[-1].realized_ratio:
            log.warning("realized ratio %.3f does not increase; dropping point", split.unseen_ratio)
            continue
        points.append(SweepPoint(ratio, split.unseen_ratio, split.threshold, point_seed, reports))
    return SweepResult(points, tuple(k_values))


# --- reports -------------------------------------------------------------------

def run_id(run_info: Mapping) -> str:
    """Content hash of the run description (config, seeds)."""
    blob = json.dumps(run_info, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()


def table1_rows(reports: Sequence[EvalReport], k_values: Sequence[int] = K_VALUES) -> list[list[str]]:
    rows = [["POIs", "Method", *[f"Acc@{k}" for k in k_values]]]
    for subset in ("All", "Unseen"):
        for r in reports:
            acc = r.acc_at if subset == "All" else r.unseen_acc_at
            if acc is None:
                continue
            rows.append([subset, r.method, *[f"{acc[k]:.4f}" for k in k_values]])
    return rows


def _prepare_dir(outdir) -> Path:
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def emit_report(outdir, *, reports: Sequence[EvalReport] = (), sweep: SweepResult | None = None,
                prior: ProximityPrior | None = None, run_info: Mapping | None = None,
                plots: bool = True) -> list[Path]:
    """Write results.json, the accuracy table as CSV/text, histogram and sweep CSVs and figures."""
    if not reports and sweep is None:
        raise ValueError("nothing to report")
    if sweep is not None and not sweep.points:
        raise ValueError("empty sweep: no points to report")
    out = _prepare_dir(outdir)
    written = []
    run_info = dict(run_info or {})
    results = {"run_id": run_id(run_info), "run": run_info,
               "reports": [r.to_json() for r in reports]}
    if sweep is not None:
        results["sweep"] = sweep.to_json()
    if prior is not None:
        results["prior"] = prior.to_json()
    write_json(results, out / "results.json")
    written.append(out / "results.json")

    if reports:
        k_values = sorted(reports[0].acc_at)
        rows = table1_rows(reports, k_values)
        with open(out / "table1.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
        (out / "table1.txt").write_text(text)
        written += [out / "table1.csv", out / "table1.txt"]

    if prior is not None:
        prior.write_histogram_csv(out / "prior_histogram.csv")
        written.append(out / "prior_histogram.csv")

    if sweep is not None:
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target_ratio", "realized_ratio", "threshold", "method",
                        *[f"acc@{k}" for k in sweep.k_values]])
            for p in sweep.points:
                for m in sorted(p.reports):
                    w.writerow([f"{p.target_ratio:.4f}", f"{p.realized_ratio:.6f}", p.threshold, m,
                                *[f"{p.reports[m].acc_at[k]:.6f}" for k in sweep.k_values]])
        written.append(out / "sweep.csv")

    if plots:
        from . import plotting
        if prior is not None:
            written.append(plotting.plot_prior_histogram(prior, out / "prior_histogram.png"))
        if sweep is not None:
            written.append(plotting.plot_sweep(sweep, out / "sweep.png"))
    return written
