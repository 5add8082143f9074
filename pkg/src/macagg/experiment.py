"""End-to-end runs: sender, lossy channel and receiver advance in lockstep per packet.

Goodput is measured over the first ``messages // 80 * 80`` data records.  A
short drain of extra records (34 for R2D2, none otherwise) is sent afterwards
so the last measured records can collect their covering tags; drain frames are
not counted.  Control records (AggregationUpdate, ACK) in either direction
count towards transmitted bytes and energy.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .accounting import WINDOW_UNIT
from .adaptation import BoundaryCurve, SwitchController, family_schemes
from .auth import TAG_BITS, WINDOW, AggScheme, SchemeId
from .channel import ChannelPreset, GilbertElliot, LengthProfile
from .endpoint import DataReceiver, DataSender, open_control
from .record import EpochKeys, Layout
from .session import ExtensionOffer, scripted_handshake
from .verify import Verified

E_MIN_LEN, E_MAX_LEN = 4, 110
E_MIN_UJ, E_MAX_UJ = 0.6, 2.6


def energy_of(packet_len: float) -> float:
    """Transmit energy in microjoules, linear between 0.6 uJ @ 4 B and 2.6 uJ @ 110 B."""
    length = min(max(packet_len, E_MIN_LEN), E_MAX_LEN)
    return E_MIN_UJ + (length - E_MIN_LEN) * (E_MAX_UJ - E_MIN_UJ) / (E_MAX_LEN - E_MIN_LEN)


def drain_messages(scheme: AggScheme) -> int:
    return WINDOW if scheme.id is SchemeId.R2D2 else 0


def _seed_bytes(seed: int, label: str) -> bytes:
    return hashlib.sha256(f"{label}:{seed}".encode()).digest()[:16]


def _sub_seed(seed: int, label: str) -> int:
    return int.from_bytes(_seed_bytes(seed, label)[:8], "big")


# -- scenarios -------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    payload_len: int
    rate_hz: float = 1.0
    messages: int = 100_000
    channel: str = "good"
    scheme: str = "Trad"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.payload_len <= 91:
            raise ValueError("payload_len must be in [1, 91]")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.messages < WINDOW_UNIT:
            raise ValueError(f"need at least {WINDOW_UNIT} messages for a measurement window")
        AggScheme.parse(self.scheme)

    @property
    def agg_scheme(self) -> AggScheme:
        return AggScheme.parse(self.scheme)


# payload bytes, send rate, median PER measured in the reference deployment
STATIC_SCENARIOS = {
    "static-10B": (10, 1.0, 0.0025),
    "static-30B": (30, 10.0, 0.0030),
    "static-70B": (70, 1.0, 0.0045),
}


def static_scenario(name: str, scheme: str = "Trad", **overrides) -> Scenario:
    payload, rate, _ = STATIC_SCENARIOS[name]
    return Scenario(name=name, payload_len=payload, rate_hz=rate, scheme=scheme, **overrides)


# -- channels -------------------------------------------------------------------------


@dataclass
class Link:
    """One direction of the radio link: a model plus optional length scaling."""

    model: GilbertElliot
    profile: Optional[LengthProfile] = None
    reference_len: Optional[float] = None

    def transmit(self, length: int) -> bool:
        return self.model.step(length, self.profile, self.reference_len)


@dataclass(frozen=True)
class Segment:
    """A schedule phase of ``packets`` data records over one channel setting."""

    packets: int
    model: GilbertElliot
    profile: Optional[LengthProfile] = None
    reference_len: Optional[float] = None


class ScheduledLink:
    """Switches channel settings as the data record counter crosses segment ends."""

    def __init__(self, segments: Sequence[Segment], seed: int, label: str) -> None:
        if not segments:
            raise ValueError("schedule must not be empty")
        self._segments = list(segments)
        self._ends = np.cumsum([s.packets for s in segments])
        self._links = [Link(s.model.reseeded(_sub_seed(seed, f"{label}:{k}")), s.profile, s.reference_len)
                       for k, s in enumerate(segments)]
        self.position = 0

    @property
    def total(self) -> int:
        return int(self._ends[-1])

    def _current(self) -> Link:
        k = int(np.searchsorted(self._ends, self.position, side="right"))
        return self._links[min(k, len(self._links) - 1)]

    def transmit(self, length: int) -> bool:
        return self._current().transmit(length)


def preset_link(preset: ChannelPreset, seed: int, label: str = "fwd") -> ScheduledLink:
    seg = Segment(1 << 62, preset.model, preset.profile, None)
    return ScheduledLink([seg], seed, label)


# -- metrics --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    scheme: str
    payload_len: int
    rate_hz: float
    messages: int
    authenticated_goodput: float
    energy_total: float
    energy_per_auth_bit: float
    delay_histogram: dict[int, int]
    per_timeline: list[tuple[int, float, float]] = field(default_factory=list)
    switch_log: list[tuple[int, str]] = field(default_factory=list)
    bytes_sent: int = 0
    auth_payload_bytes: int = 0
    frames_lost: int = 0
    realized_per: float = 0.0
    control_bytes: int = 0
    security: list[int] = field(default_factory=list, repr=False)

    def delay_seconds(self) -> dict[float, int]:
        return {d / self.rate_hz: c for d, c in self.delay_histogram.items()}

    def row(self) -> dict:
        return {
            "scheme": self.scheme,
            "payload_len": self.payload_len,
            "messages": self.messages,
            "goodput": f"{self.authenticated_goodput:.6f}",
            "energy_total_uj": f"{self.energy_total:.3f}",
            "energy_per_auth_bit_uj": f"{self.energy_per_auth_bit:.6f}",
            "realized_per": f"{self.realized_per:.6f}",
            "bytes_sent": self.bytes_sent,
            "auth_payload_bytes": self.auth_payload_bytes,
            "control_bytes": self.control_bytes,
            "switches": max(0, len(self.switch_log) - 1),
        }


def delay_profile(report: MetricsReport) -> list[tuple[int, float, float]]:
    """CDF rows ``(follow-up messages, seconds, fraction of measured messages)``.

    The fraction is relative to all measured messages, so the curve tops out at
    the share that was ever fully authenticated.
    """
    total = report.messages
    out, acc = [], 0
    for d in sorted(report.delay_histogram):
        acc += report.delay_histogram[d]
        out.append((d, d / report.rate_hz, acc / total))
    return out


def fraction_within(report: MetricsReport, follow_ups: int) -> float:
    hit = sum(c for d, c in report.delay_histogram.items() if d <= follow_ups)
    return hit / report.messages


# -- the packet loop --------------------------------------------------------------------


def _session(seed: int, scheme: AggScheme, dynamic: bool) -> tuple[EpochKeys, EpochKeys, Layout]:
    """Scripted handshake for one data direction: (data keys, control keys, layout).

    Dynamic runs always negotiate the extension so AggregationUpdates are
    allowed even when the session starts with Trad.
    """
    if scheme.is_trad and not dynamic:
        hs = scripted_handshake(_seed_bytes(seed, "psk"), None, None)
    else:
        offered = (scheme,) if not scheme.is_trad else (AggScheme.agg(16),)
        hs = scripted_handshake(_seed_bytes(seed, "psk"), ExtensionOffer(offered, offered),
                                list(offered), None)
    return hs.server_keys, hs.client_keys, Layout.CT_FIRST if dynamic else hs.layout


def _simulate(
    payload_len: int,
    messages: int,
    scheme: AggScheme,
    fwd: ScheduledLink,
    rev: ScheduledLink,
    *,
    rate_hz: float,
    seed: int,
    controller: Optional[SwitchController] = None,
    drain: Optional[int] = None,
    timeline_every: int = 200,
) -> MetricsReport:
    window = messages // WINDOW_UNIT * WINDOW_UNIT
    if drain is None:
        drain = max(drain_messages(s) for s in ([scheme] + (list(family_schemes_of(controller)) if controller else [])))
    total = window + drain
    data_keys, ctl_keys, layout = _session(seed, scheme, controller is not None)
    sender = DataSender(data_keys, scheme, layout)
    receiver = DataReceiver(data_keys, scheme, control_keys=ctl_keys, layout=layout)
    rng = np.random.Generator(np.random.PCG64(_sub_seed(seed, "payload")))

    where: list[tuple[int, int]] = []  # (epoch, seq) per data message
    index_of: dict[tuple[int, int], int] = {}
    frame_len = np.zeros(total, dtype=np.int64)
    delivered = np.zeros(total, dtype=bool)
    full_at = np.full(total, -1, dtype=np.int64)
    control_bytes = 0
    control_energy = 0.0
    switch_log = [(0, str(scheme))]
    highest: dict[int, int] = {}
    ctl_expected = 0

    def on_verified(epoch: int, events: list, now_idx: int) -> None:
        for ev in events:
            if isinstance(ev, Verified):
                i = index_of.get((epoch, ev.seq))
                if i is not None and full_at[i] < 0:
                    full_at[i] = now_idx

    def control_forward(raw: bytes, now_idx: int) -> None:
        nonlocal control_bytes, control_energy
        control_bytes += len(raw)
        control_energy += energy_of(len(raw))
        if fwd.transmit(len(raw)):
            res = receiver.receive(raw)
            for ep, evs in res.verified:
                on_verified(ep, evs, now_idx)

    def control_reverse(raw: bytes, now_idx: int) -> None:
        nonlocal control_bytes, control_energy, ctl_expected
        control_bytes += len(raw)
        control_energy += energy_of(len(raw))
        if not rev.transmit(len(raw)):
            return
        body = open_control(ctl_keys, raw, ctl_expected)
        ctl_expected += 1
        if body is not None:
            control_forward(sender.on_update(body).to_bytes(), now_idx)

    for i in range(total):
        now = i / rate_hz
        fwd.position = rev.position = i
        payload = rng.bytes(payload_len)
        frame = sender.send(payload)
        key = (sender.epoch.keys.epoch, sender.epoch.next_seq - 1)
        where.append(key)
        index_of[key] = i
        raw = frame.to_bytes()
        frame_len[i] = len(raw)
        ok = fwd.transmit(len(raw))
        delivered[i] = ok
        if ok:
            res = receiver.receive(raw)
            for ep, evs in res.verified:
                on_verified(ep, evs, i)
            if controller is not None and res.kind == "data":
                # losses become visible through the sequence gap
                prev = highest.get(res.epoch, receiver.epochs[res.epoch].base - 1)
                outcomes = [False] * max(0, res.seq - prev - 1) + [True]
                highest[res.epoch] = max(prev, res.seq)
                for o in outcomes:
                    choice = controller.observe(o)
                    if choice is None:
                        continue
                    if not receiver.machine.busy and i < window:
                        switch_log.append((i, str(choice)))
                        control_reverse(receiver.request_update(choice, now), i)
                    controller.current = receiver.scheme
        if controller is not None:
            retry = receiver.poll(now)
            if retry is not None:
                control_reverse(retry, i)

    # final security of every measured message
    security = []
    auth_bytes = 0
    for i in range(window):
        ep, seq = where[i]
        bits = 0
        if delivered[i]:
            led = receiver.epochs[ep].ledger
            lvl = led.security_of(seq)
            bits = 0 if lvl.status.value == "refuted" else lvl.raw_bits
        security.append(bits)
        if bits >= TAG_BITS:
            auth_bytes += payload_len

    sent = int(frame_len[:window].sum()) + control_bytes
    energy = float(sum(energy_of(L) for L in frame_len[:window])) + control_energy
    hist: dict[int, int] = {}
    for i in range(window):
        if security[i] >= TAG_BITS and full_at[i] >= 0:
            d = int(full_at[i] - i)
            hist[d] = hist.get(d, 0) + 1
    timeline = []
    sec = np.asarray(security)
    for end in range(timeline_every, window + 1, timeline_every):
        sl = slice(end - timeline_every, end)
        per = 1.0 - delivered[sl].mean()
        gp = (sec[sl] >= TAG_BITS).sum() * payload_len / frame_len[sl].sum()
        timeline.append((end, float(per), float(gp)))
    auth_bits = auth_bytes * 8
    return MetricsReport(
        scheme=str(scheme) if controller is None else f"dynamic:{switch_log[-1][1]}",
        payload_len=payload_len,
        rate_hz=rate_hz,
        messages=window,
        authenticated_goodput=auth_bytes / sent,
        energy_total=energy,
        energy_per_auth_bit=energy / auth_bits if auth_bits else float("inf"),
        delay_histogram=dict(sorted(hist.items())),
        per_timeline=timeline,
        switch_log=switch_log,
        bytes_sent=sent,
        auth_payload_bytes=auth_bytes,
        frames_lost=int((~delivered[:window]).sum()),
        realized_per=float(1.0 - delivered[:window].mean()),
        control_bytes=control_bytes,
        security=security,
    )


def family_schemes_of(controller: SwitchController) -> tuple[AggScheme, ...]:
    fams = {cv.family for cv in controller.curves}
    out: list[AggScheme] = [controller.current]
    for f in fams:
        if f:
            out.extend(family_schemes(f))
    return tuple(out)


def run_scenario(s: Scenario, presets: Optional[dict[str, ChannelPreset]] = None,
                 link: Optional[ScheduledLink] = None) -> MetricsReport:
    """Full sender/receiver pipeline for one fixed scheme."""
    if link is None:
        if presets is None:
            from .config import load_presets
            presets = load_presets()
        if s.channel not in presets:
            raise ValueError(f"unknown channel preset {s.channel!r}")
        link = preset_link(presets[s.channel], s.seed)
    rev = ScheduledLink([Segment(1 << 62, GilbertElliot.bernoulli(0.0))], s.seed, "rev")
    return _simulate(s.payload_len, s.messages, s.agg_scheme, link, rev, rate_hz=s.rate_hz, seed=s.seed)


def run_dynamic(
    schedule: Sequence[Segment],
    family: str,
    curves: Sequence[BoundaryCurve] = (),
    *,
    payload_len: int = 30,
    rate_hz: float = 10.0,
    seed: int = 0,
    initial: Optional[AggScheme] = None,
) -> MetricsReport:
    """Run over a channel schedule with the adaptation controller active.

    ``family="trad"`` is the static Trad baseline on the same channel.  The
    reverse direction (AggregationUpdates) uses the same schedule with its own
    random stream.
    """
    messages = sum(s.packets for s in schedule)
    fwd = ScheduledLink(schedule, seed, "fwd")
    rev = ScheduledLink(schedule, seed, "rev")
    if family.lower() == "trad":
        return _simulate(payload_len, messages, AggScheme.trad(), fwd, rev, rate_hz=rate_hz, seed=seed)
    curves = [cv for cv in curves if cv.family == family.lower()]
    if not curves:
        raise ValueError(f"no boundary curves for family {family!r}")
    start = initial or AggScheme.trad()
    ctl = SwitchController(curves, payload_len, start)
    drain = max(drain_messages(s) for s in family_schemes(family))
    return _simulate(payload_len, messages, start, fwd, rev, rate_hz=rate_hz, seed=seed,
                     controller=ctl, drain=drain)


def step_schedule(before: float, after: float, packets_before: int, packets_after: int) -> list[Segment]:
    """Two Bernoulli phases, e.g. PER 0.5% then 10%."""
    return [Segment(packets_before, GilbertElliot.bernoulli(before)),
            Segment(packets_after, GilbertElliot.bernoulli(after))]


# -- trace-stitched sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    payload_len: int
    scheme: str
    goodput: float
    gain_vs_trad: float
    realized_per: float
    energy_per_auth_bit: float

    def row(self) -> dict:
        return {"payload_len": self.payload_len, "scheme": self.scheme, "goodput": f"{self.goodput:.6f}",
                "gain_vs_trad": f"{self.gain_vs_trad:.6f}", "realized_per": f"{self.realized_per:.6f}",
                "energy_per_auth_bit_uj": f"{self.energy_per_auth_bit:.6f}"}


def sweep(preset: ChannelPreset, payloads: Sequence[int], schemes: Sequence[AggScheme],
          messages: int = 40_000, seed: int = 0) -> list[SweepRow]:
    """Payload x scheme grid on one shared channel trace (loss-only accounting).

    Every scheme sees the same channel states and loss draws; only its own
    frame lengths differ, which is how per-length traces are stitched.
    """
    from .accounting import frame_lengths, measured_window, security_bits
    from .channel import make_trace
    from .record import LINK_MTU, LINK_OVERHEAD

    trace = make_trace(preset.fresh(_sub_seed(seed, "sweep")), messages, preset.profile)
    energy_table = np.array([energy_of(L) for L in range(LINK_MTU + 1)])
    rows = []
    for p in payloads:
        found = {}
        for s in schemes:
            lengths = frame_lengths(s, p, messages)
            if lengths.max() > LINK_MTU - LINK_OVERHEAD:
                continue
            delivered = trace.delivered(lengths)
            m = measured_window(s, messages)
            ok = security_bits(s, delivered)[:m] >= TAG_BITS
            auth = int(ok.sum()) * p
            found[s] = (auth / lengths[:m].sum(), float(1 - delivered[:m].mean()),
                        float(energy_table[lengths[:m]].sum()) / (8 * auth) if auth else float("inf"))
        base = found.get(AggScheme.trad(), (float("nan"),))[0]
        for s, (gp, per, e) in found.items():
            rows.append(SweepRow(int(p), str(s), gp, gp / base - 1 if base else float("nan"), per, e))
    return rows
