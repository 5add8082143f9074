"""Gilbert-Elliot loss process with length-dependent loss scaling, and loss traces.

Randomness comes from raw 64-bit PCG64 outputs.  The high 32 bits of a draw
decide the state transition, the low 32 bits the loss, both by integer
comparison against ``floor(p * 2**32)``, so a trace depends only on
(parameters, seed) and not on batch sizes or float rounding in branches.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

GOOD, BAD = 0, 1
_SCALE = 1 << 32


def _threshold(p: float) -> int:
    return min(_SCALE, max(0, int(p * _SCALE)))


@dataclass(frozen=True)
class LengthProfile:
    """Piecewise-linear PER as a function of packet length."""

    anchors: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        pts = tuple(sorted((int(l), float(p)) for l, p in self.anchors))
        if not pts:
            raise ValueError("profile needs at least one anchor")
        if any(b[1] < a[1] for a, b in zip(pts, pts[1:])):
            raise ValueError("PER must be non-decreasing in packet length")
        object.__setattr__(self, "anchors", pts)

    @classmethod
    def flat(cls) -> "LengthProfile":
        return cls(((1, 1.0),))

    @property
    def domain(self) -> tuple[int, int]:
        return self.anchors[0][0], self.anchors[-1][0]

    def __call__(self, length: float) -> float:
        xs = [a[0] for a in self.anchors]
        lo, hi = self.domain
        x = min(max(length, lo), hi)
        i = bisect.bisect_right(xs, x)
        if i == 0:
            return self.anchors[0][1]
        if i == len(xs):
            return self.anchors[-1][1]
        (x0, y0), (x1, y1) = self.anchors[i - 1], self.anchors[i]
        return y0 + (y1 - y0) * (x - x0) / (x1 - x0)

    def length_at(self, per: float) -> float:
        """Inverse on the increasing part; clamps to the domain."""
        for (x0, y0), (x1, y1) in zip(self.anchors, self.anchors[1:]):
            if y0 <= per <= y1 and y1 > y0:
                return x0 + (per - y0) * (x1 - x0) / (y1 - y0)
        return float(self.domain[0] if per < self.anchors[0][1] else self.domain[1])


@dataclass
class GilbertElliot:
    p_gb: float
    p_bg: float
    loss_good: float
    loss_bad: float
    seed: int = 0
    start_bad: bool = False
    state: int = field(init=False)

    def __post_init__(self) -> None:
        for name in ("p_gb", "p_bg", "loss_good", "loss_bad"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        self.state = BAD if self.start_bad else GOOD
        self._bitgen = np.random.PCG64(self.seed)

    @classmethod
    def from_stationary(cls, pi_bad: float, mean_bad_run: float, loss_good: float, loss_bad: float,
                        seed: int = 0) -> "GilbertElliot":
        """Parameterise by bad-state share and mean bad-run length in packets."""
        p_bg = 1.0 / mean_bad_run
        p_gb = pi_bad * p_bg / (1.0 - pi_bad) if pi_bad < 1 else 1.0
        return cls(p_gb, p_bg, loss_good, loss_bad, seed)

    @classmethod
    def bernoulli(cls, per: float, seed: int = 0) -> "GilbertElliot":
        return cls(0.0, 1.0, per, per, seed)

    @property
    def pi_bad(self) -> float:
        tot = self.p_gb + self.p_bg
        return self.p_gb / tot if tot else float(self.start_bad)

    @property
    def stationary_per(self) -> float:
        pb = self.pi_bad
        return pb * self.loss_bad + (1 - pb) * self.loss_good

    def params(self) -> dict:
        return {"p_gb": self.p_gb, "p_bg": self.p_bg, "loss_good": self.loss_good,
                "loss_bad": self.loss_bad, "seed": self.seed}

    def reseeded(self, seed: int) -> "GilbertElliot":
        return GilbertElliot(self.p_gb, self.p_bg, self.loss_good, self.loss_bad, seed, self.start_bad)

    def raw(self, count: int) -> np.ndarray:
        return self._bitgen.random_raw(count)

    def advance(self, draws: np.ndarray) -> np.ndarray:
        """Run the state machine over ``draws``; returns the state per packet."""
        up, down = _threshold(self.p_gb), _threshold(self.p_bg)
        states = np.empty(len(draws), dtype=np.uint8)
        s = self.state
        for i, hi in enumerate((draws >> np.uint64(32)).tolist()):
            if s == GOOD:
                if hi < up:
                    s = BAD
            elif hi < down:
                s = GOOD
            states[i] = s
        self.state = s
        return states

    def loss_probability(self, state: int, packet_len: int, profile: Optional[LengthProfile],
                         reference_len: Optional[float] = None) -> float:
        base = self.loss_bad if state == BAD else self.loss_good
        return min(1.0, base * length_scale(self, packet_len, profile, reference_len))

    def step(self, packet_len: int, profile: Optional[LengthProfile] = None,
             reference_len: Optional[float] = None) -> bool:
        """Advance one packet; True if delivered."""
        draw = self.raw(1)
        state = int(self.advance(draw)[0])
        lo = int(draw[0]) & 0xFFFFFFFF
        return lo >= _threshold(self.loss_probability(state, packet_len, profile, reference_len))


def length_scale(model: GilbertElliot, packet_len: float, profile: Optional[LengthProfile],
                 reference_len: Optional[float] = None) -> float:
    """``profile(len) / profile(reference_len)``.

    Without an explicit reference length the profile is normalised by the
    model's stationary PER, so the realised PER at length ``L`` is ``profile(L)``.
    """
    if profile is None:
        return 1.0
    if reference_len is None:
        denom = model.stationary_per
        return profile(packet_len) / denom if denom > 0 else 0.0
    return profile(packet_len) / profile(reference_len)


@dataclass
class LossTrace:
    """Channel states and loss draws for a run of packets.

    Outcomes for any packet length are derived from the shared draws, which is
    how per-length traces are stitched together for schemes whose frames vary
    in length.
    """

    params: dict
    seed: int
    states: np.ndarray
    draws: np.ndarray  # low 32 bits of each raw draw
    profile: Optional[LengthProfile] = None
    reference_len: Optional[float] = None
    realized_per: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    def _model(self) -> GilbertElliot:
        p = self.params
        return GilbertElliot(p["p_gb"], p["p_bg"], p["loss_good"], p["loss_bad"], self.seed)

    def thresholds(self, lengths: np.ndarray | int) -> np.ndarray:
        model = self._model()
        lengths = np.broadcast_to(np.asarray(lengths), self.states.shape)
        uniq = np.unique(lengths)
        out = np.empty(len(self.states), dtype=np.uint64)
        for L in uniq.tolist():
            sel = lengths == L
            tg = _threshold(model.loss_probability(GOOD, L, self.profile, self.reference_len))
            tb = _threshold(model.loss_probability(BAD, L, self.profile, self.reference_len))
            out[sel] = np.where(self.states[sel] == BAD, tb, tg)
        return out

    def delivered(self, lengths: np.ndarray | int) -> np.ndarray:
        """Boolean delivery mask for packets of the given length(s)."""
        return self.draws >= self.thresholds(lengths)

    def per(self, length: int) -> float:
        return float(1.0 - self.delivered(length).mean())

    def to_file(self, path: str | Path, length: int) -> None:
        """One line per packet, ``1`` delivered / ``0`` dropped."""
        mask = self.delivered(length)
        lines = [f"# gilbert-elliot {' '.join(f'{k}={v}' for k, v in self.params.items())} "
                 f"length={length} packets={len(mask)}"]
        lines += ["1" if d else "0" for d in mask.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")


def read_trace_file(path: str | Path) -> tuple[dict, np.ndarray]:
    header: dict = {}
    bits = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    header[k] = v
        elif line.strip():
            bits.append(line.strip() == "1")
    return header, np.array(bits, dtype=bool)


def make_trace(model: GilbertElliot, packets: int, profile: Optional[LengthProfile] = None,
               reference_len: Optional[float] = None, lengths: Iterable[int] = ()) -> LossTrace:
    """Run ``model`` forward for ``packets`` steps and record states and draws."""
    raw = model.raw(packets)
    states = model.advance(raw)
    trace = LossTrace(model.params(), model.seed, states, raw & np.uint64(0xFFFFFFFF), profile, reference_len)
    for L in lengths:
        trace.realized_per[int(L)] = trace.per(int(L))
    return trace


Sampler = Callable[[np.random.Generator], GilbertElliot]


def default_sampler(rng: np.random.Generator) -> GilbertElliot:
    """Broad prior over channels: stationary PER log-uniform in [0.2%, 30%]."""
    target = float(np.exp(rng.uniform(np.log(0.002), np.log(0.30))))
    pi_bad = float(rng.uniform(0.02, 0.35))
    mean_bad = float(rng.uniform(1.5, 20.0))
    ratio = float(rng.uniform(5.0, 40.0))  # loss_bad / loss_good
    loss_good = target / (pi_bad * ratio + 1 - pi_bad)
    loss_bad = min(1.0, loss_good * ratio)
    return GilbertElliot.from_stationary(pi_bad, mean_bad, loss_good, loss_bad,
                                         seed=int(rng.integers(0, 2**63)))


def generate_traces(count: int, sampler: Sampler = default_sampler, lengths: Sequence[int] = (),
                    packets: int = 2000, profile: Optional[LengthProfile] = None,
                    reference_len: Optional[float] = None, seed: int = 0) -> list[LossTrace]:
    """``count`` independent traces from channels drawn by ``sampler``.

    ``profile`` only shapes the length dependence here: each sampled channel
    keeps its own loss level at ``reference_len`` (default: middle of the
    profile domain).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if profile is not None and reference_len is None:
        lo, hi = profile.domain
        reference_len = (lo + hi) / 2
    rng = np.random.default_rng(seed)
    return [make_trace(sampler(rng), packets, profile, reference_len, lengths) for _ in range(count)]


@dataclass(frozen=True)
class ChannelPreset:
    name: str
    model: GilbertElliot
    profile: LengthProfile

    def fresh(self, seed: int) -> GilbertElliot:
        return self.model.reseeded(seed)
