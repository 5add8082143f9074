"""Offline parameter labelling and boundary fitting; online parameter switching.

Offline: every (trace, payload) pair is scored for every candidate scheme with
the loss-only accountant, the best scheme becomes the label, a KNN classifier
fills the (payload, PER) plane and ``y = a * exp(b / x) + c`` is fitted to the
boundary between each pair of adjacent aggressiveness levels.

Online: ``SwitchController`` keeps a 200-packet PER window and switches when
the fitted curves have disagreed with the current scheme for 50 packets in a row.
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from sklearn.neighbors import KNeighborsClassifier

from .accounting import DEFAULT_SEED, frame_lengths, goodput
from .auth import AggScheme
from .channel import LossTrace
from .record import HEADER_BYTES, LINK_MTU, LINK_OVERHEAD

PAYLOAD_DOMAIN = (1, 91)
PER_SCALE = 0.15
PER_WINDOW = 200
HYSTERESIS = 50

FAMILIES: dict[str, tuple[AggScheme, ...]] = {
    "agg": tuple(AggScheme.agg(n) for n in (16, 8, 4, 2)) + (AggScheme.trad(),),
    "r2d2": tuple(AggScheme.r2d2(o) for o in (50, 100, 150, 200)) + (AggScheme.trad(),),
    "trad": (AggScheme.trad(),),
}


class FitError(ValueError):
    pass


def family_schemes(family: str) -> tuple[AggScheme, ...]:
    """Schemes of ``family`` from most aggressive to Trad."""
    try:
        return FAMILIES[family.lower()]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None


def trad_frame_len(payload_len: int) -> int:
    return HEADER_BYTES + 1 + payload_len + 16


# -- labelling -----------------------------------------------------------------


@dataclass(frozen=True)
class LabeledPoint:
    payload_len: int
    per: float
    label: AggScheme
    goodputs: dict = field(default_factory=dict, compare=False, hash=False)


def _best(goodputs: dict[AggScheme, float]) -> AggScheme:
    # ties go to the larger per-message tag
    return max(goodputs, key=lambda s: (round(goodputs[s], 12), s.mean_tag_bytes))


def score_trace(trace: LossTrace, payload_len: int, candidates: Sequence[AggScheme],
                seed: bytes = DEFAULT_SEED, max_frame: int = LINK_MTU - LINK_OVERHEAD) -> dict[AggScheme, float]:
    n = len(trace)
    out = {}
    for s in candidates:
        lengths = frame_lengths(s, payload_len, n)
        if lengths.max() > max_frame:
            continue
        out[s] = goodput(s, payload_len, trace.delivered(lengths), seed)
    return out


def label_optimal(traces: Iterable[LossTrace], payload_lens: Sequence[int], candidates: Sequence[AggScheme],
                  seed: bytes = DEFAULT_SEED) -> list[LabeledPoint]:
    """One labelled point per (trace, payload); PER is measured at the Trad frame length."""
    candidates = list(candidates)
    if AggScheme.trad() not in candidates:
        raise ValueError("candidate set must include Trad")
    points = []
    for tr in traces:
        for p in payload_lens:
            gp = score_trace(tr, p, candidates, seed)
            points.append(LabeledPoint(int(p), tr.per(trad_frame_len(p)), _best(gp), gp))
    return points


def relabel(points: Sequence[LabeledPoint], candidates: Sequence[AggScheme]) -> list[LabeledPoint]:
    """Restrict already scored points to a subset of candidates."""
    keep = set(candidates)
    return [LabeledPoint(p.payload_len, p.per, _best({s: g for s, g in p.goodputs.items() if s in keep}), p.goodputs)
            for p in points]


def write_dataset(points: Sequence[LabeledPoint], path: str | Path) -> None:
    schemes = sorted({s for p in points for s in p.goodputs}, key=lambda s: (s.id, s.n, s.o or 0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["payload_len", "per", "label"] + [f"goodput:{s}" for s in schemes])
        for p in points:
            w.writerow([p.payload_len, f"{p.per:.6f}", str(p.label)]
                       + [f"{p.goodputs[s]:.6f}" if s in p.goodputs else "" for s in schemes])


def read_dataset(path: str | Path) -> list[LabeledPoint]:
    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            gp = {AggScheme.parse(k.split(":", 1)[1]): float(v)
                  for k, v in row.items() if k.startswith("goodput:") and v}
            points.append(LabeledPoint(int(row["payload_len"]), float(row["per"]),
                                       AggScheme.parse(row["label"]), gp))
    return points


# -- KNN fill ------------------------------------------------------------------


def _features(payload, per, domain=PAYLOAD_DOMAIN) -> np.ndarray:
    width = domain[1] - domain[0]
    return np.column_stack([np.asarray(payload, float) / width, np.asarray(per, float) / PER_SCALE])


class KnnMap:
    """KNN over (payload / domain width, PER / 0.15)."""

    def __init__(self, points: Sequence[LabeledPoint], k: int = 5, domain=PAYLOAD_DOMAIN) -> None:
        if not points:
            raise ValueError("empty dataset")
        if k % 2 == 0 or k > len(points):
            raise ValueError("k must be odd and at most the dataset size")
        self.domain = domain
        self._labels = sorted({p.label for p in points}, key=lambda s: s.aggressiveness, reverse=True)
        index = {s: i for i, s in enumerate(self._labels)}
        x = _features([p.payload_len for p in points], [p.per for p in points], domain)
        self._clf = KNeighborsClassifier(n_neighbors=k).fit(x, [index[p.label] for p in points])

    def predict(self, payload, per) -> list[AggScheme]:
        idx = self._clf.predict(_features(np.atleast_1d(payload), np.atleast_1d(per), self.domain))
        return [self._labels[i] for i in idx]

    def grid(self, payloads: Sequence[int], pers: Sequence[float]) -> list[LabeledPoint]:
        xx, yy = np.meshgrid(np.asarray(payloads), np.asarray(pers), indexing="ij")
        labels = self.predict(xx.ravel(), yy.ravel())
        return [LabeledPoint(int(x), float(y), s) for x, y, s in zip(xx.ravel(), yy.ravel(), labels)]


def knn_label(points: Sequence[LabeledPoint], k: int, query: tuple[float, float]) -> AggScheme:
    return KnnMap(points, k).predict(query[0], query[1])[0]


# -- boundary fitting ------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryCurve:
    """``per = a * exp(b / payload) + c``; ``below`` wins under the curve."""

    family: str
    a: float
    b: float
    c: float
    below: AggScheme
    above: AggScheme
    residual: float = 0.0

    def __call__(self, x: float) -> float:
        return self.a * math.exp(self.b / x) + self.c


def _exp_model(x, a, b, c):
    return a * np.exp(b / x) + c


def fit_curve(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float, float]:
    """Least-squares ``(a, b, c, rms residual)``; multi-start over ``b``.

    Among starts that reach the same residual the one with the smallest
    ``|b|`` wins, so a flat boundary comes back with ``b = 0``.
    """
    x = np.asarray(xs, float)
    y = np.asarray(ys, float)
    if len(x) < 3:
        raise FitError(f"need at least 3 boundary points, got {len(x)}")
    span = float(np.ptp(y)) or max(abs(float(y.mean())), 1e-6)
    best = None
    for b0 in (0.0, -5.0, -20.0, -50.0, 5.0, 20.0):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OptimizeWarning)
                p, _ = curve_fit(_exp_model, x, y, p0=(span, b0, float(y.min())), maxfev=20000)
        except (RuntimeError, ValueError):
            continue
        if not np.all(np.isfinite(p)):
            continue
        rms = float(np.sqrt(np.mean((_exp_model(x, *p) - y) ** 2)))
        key = (round(rms / span, 6), abs(p[1]))
        if best is None or key < best[0]:
            best = (key, p, rms)
    if best is None:
        raise FitError("least-squares fit did not converge")
    a, b, c = (float(v) for v in best[1])
    return a, b, c, best[2]


def boundary_points(points: Sequence[LabeledPoint], aggressive: set[AggScheme],
                    conservative: set[AggScheme]) -> tuple[list[float], list[float], list[int]]:
    """Per payload column, the midpoint between the highest PER labelled from
    ``aggressive`` and the lowest PER labelled from ``conservative``.

    Returns ``(xs, ys, skipped_columns)``.
    """
    cols: dict[int, list[LabeledPoint]] = {}
    for p in points:
        cols.setdefault(p.payload_len, []).append(p)
    xs, ys, skipped = [], [], []
    for x in sorted(cols):
        hi = [p.per for p in cols[x] if p.label in aggressive]
        lo = [p.per for p in cols[x] if p.label in conservative]
        if not hi or not lo:
            skipped.append(x)
            continue
        xs.append(float(x))
        ys.append((max(hi) + min(lo)) / 2)
    return xs, ys, skipped


def fit_boundary(points: Sequence[LabeledPoint], scheme_pair: tuple[AggScheme, AggScheme],
                 family: Optional[str] = None) -> BoundaryCurve:
    """Fit the boundary between ``scheme_pair = (more aggressive, less aggressive)``.

    With a family given, labels are grouped by aggressiveness level: everything
    at least as aggressive as the first scheme counts for the lower side.
    """
    lo_s, hi_s = scheme_pair
    if family is not None:
        order = family_schemes(family)
        cut = order.index(lo_s) + 1
        aggressive, conservative = set(order[:cut]), set(order[cut:])
    else:
        aggressive, conservative = {lo_s}, {hi_s}
    xs, ys, skipped = boundary_points(points, aggressive, conservative)
    if len(xs) < 3:
        raise FitError(f"boundary {lo_s} / {hi_s} is degenerate: only {len(xs)} usable payload columns "
                       f"({len(skipped)} columns lack one of the two labels)")
    a, b, c, res = fit_curve(xs, ys)
    return BoundaryCurve(family or "", a, b, c, lo_s, hi_s, res)


def fit_family(points: Sequence[LabeledPoint], family: str) -> list[BoundaryCurve]:
    """All boundaries of a family that the data supports, most aggressive first."""
    order = family_schemes(family)
    curves = []
    for lo_s, hi_s in zip(order, order[1:]):
        try:
            curves.append(fit_boundary(points, (lo_s, hi_s), family))
        except FitError:
            continue
    return curves


def select_params(curves: Sequence[BoundaryCurve], payload_len: float, per: float) -> AggScheme:
    """Scheme of the region containing ``(payload_len, per)``.

    Curves are ordered by aggressiveness; a curve value below zero is treated
    as zero so a loss-free window always picks the most aggressive scheme.
    """
    if not curves:
        return AggScheme.trad()
    for cv in curves:
        if per <= max(cv(payload_len), 0.0):
            return cv.below
    return curves[-1].above


def region_map(curves: Sequence[BoundaryCurve], payloads: Sequence[int], pers: Sequence[float]) -> list[LabeledPoint]:
    return [LabeledPoint(int(x), float(y), select_params(curves, x, y)) for x in payloads for y in pers]


CURVE_FIELDS = ("family", "a", "b", "c", "below", "above", "residual")


def write_curves(curves: Sequence[BoundaryCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for cv in curves:
            w.writerow([cv.family, repr(cv.a), repr(cv.b), repr(cv.c), str(cv.below), str(cv.above),
                        f"{cv.residual:.3g}"])


def read_curves(path: str | Path, family: Optional[str] = None) -> list[BoundaryCurve]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    curves = [BoundaryCurve(r["family"], float(r["a"]), float(r["b"]), float(r["c"]),
                            AggScheme.parse(r["below"]), AggScheme.parse(r["above"]),
                            float(r.get("residual") or 0.0)) for r in rows]
    if family is not None:
        curves = [cv for cv in curves if cv.family == family]
    return curves


# -- online controller ---------------------------------------------------------------


@dataclass
class SwitchController:
    curves: Sequence[BoundaryCurve]
    payload_len: int
    current: AggScheme
    window: int = PER_WINDOW
    hysteresis: int = HYSTERESIS
    nonoptimal_run: int = 0
    transmitted: int = 0
    switches: list[tuple[int, AggScheme]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._outcomes: deque[bool] = deque(maxlen=self.window)
        self._lost = 0

    @property
    def per(self) -> float:
        return self._lost / len(self._outcomes) if self._outcomes else 0.0

    def observe(self, delivered: bool, payload_len: Optional[int] = None) -> Optional[AggScheme]:
        """Account one transmitted packet; returns the new scheme when a switch fires."""
        if payload_len is not None:
            self.payload_len = payload_len
        if len(self._outcomes) == self._outcomes.maxlen and not self._outcomes[0]:
            self._lost -= 1
        self._outcomes.append(delivered)
        self._lost += not delivered
        self.transmitted += 1
        best = select_params(self.curves, self.payload_len, self.per)
        if best == self.current:
            self.nonoptimal_run = 0
            return None
        self.nonoptimal_run += 1
        if self.nonoptimal_run < self.hysteresis:
            return None
        self.nonoptimal_run = 0
        self.current = best
        self.switches.append((self.transmitted, best))
        return best
