"""TOML loaders for channel presets, scenarios, sweeps and dynamic schedules."""
from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adaptation import BoundaryCurve, read_curves
from .channel import ChannelPreset, GilbertElliot, LengthProfile
from .experiment import Scenario, Segment, STATIC_SCENARIOS

DATA = resources.files("macagg") / "data"


def _load(path: str | Path | None, default: str) -> dict[str, Any]:
    if path is None:
        return tomllib.loads((DATA / default).read_text())
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _model(spec: dict[str, Any], seed: int = 0) -> GilbertElliot:
    if "per" in spec:
        return GilbertElliot.bernoulli(float(spec["per"]), seed)
    if "p_gb" in spec:
        return GilbertElliot(float(spec["p_gb"]), float(spec["p_bg"]), float(spec["loss_good"]),
                             float(spec["loss_bad"]), seed)
    return GilbertElliot.from_stationary(float(spec["pi_bad"]), float(spec["mean_bad_run"]),
                                         float(spec["loss_good"]), float(spec["loss_bad"]), seed)


def _profile(spec: dict[str, Any]) -> Optional[LengthProfile]:
    anchors = spec.get("profile")
    return LengthProfile(tuple((int(l), float(p)) for l, p in anchors)) if anchors else None


def load_presets(path: str | Path | None = None) -> dict[str, ChannelPreset]:
    raw = _load(path, "channels.toml")
    return {name: ChannelPreset(name, _model(spec), _profile(spec)) for name, spec in raw.items()}


def load_scenario(path: str | Path) -> Scenario:
    raw = _load(path, "")
    name = raw.get("name", Path(path).stem)
    if name in STATIC_SCENARIOS:
        payload, rate, _ = STATIC_SCENARIOS[name]
        raw.setdefault("payload_len", payload)
        raw.setdefault("rate_hz", rate)
    fields = {k: raw[k] for k in ("payload_len", "rate_hz", "messages", "channel", "scheme", "seed") if k in raw}
    return Scenario(name=name, **fields)


def load_sweep(path: str | Path) -> dict[str, Any]:
    raw = _load(path, "")
    raw.setdefault("channel", "good")
    raw.setdefault("payloads", [1, 10, 20, 30, 50, 70, 91])
    raw.setdefault("schemes", ["Trad", "Agg(2)", "Agg(4)", "Agg(8)", "Agg(16)",
                               "R2D2(8,50)", "R2D2(8,100)", "R2D2(8,150)", "R2D2(8,200)"])
    raw.setdefault("messages", 40_000)
    raw.setdefault("seed", 0)
    return raw


def load_schedule(path: str | Path, presets: Optional[dict[str, ChannelPreset]] = None) -> dict[str, Any]:
    """``{"family", "payload_len", "rate_hz", "seed", "segments"}`` from a schedule file.

    Each ``[[segment]]`` gives ``packets`` and either ``per`` (Bernoulli),
    ``preset`` (a channel preset name) or explicit Gilbert-Elliot parameters.
    """
    raw = _load(path, "")
    presets = presets if presets is not None else load_presets()
    segs = []
    for spec in raw.get("segment", []):
        if "preset" in spec:
            p = presets[spec["preset"]]
            segs.append(Segment(int(spec["packets"]), p.model, p.profile))
        else:
            segs.append(Segment(int(spec["packets"]), _model(spec), _profile(spec),
                                spec.get("reference_len")))
    if not segs:
        raise ValueError("schedule has no [[segment]] entries")
    return {
        "family": raw.get("family", "agg"),
        "payload_len": int(raw.get("payload_len", 30)),
        "rate_hz": float(raw.get("rate_hz", 10.0)),
        "seed": int(raw.get("seed", 0)),
        "segments": segs,
    }


def default_curves(family: Optional[str] = None) -> list[BoundaryCurve]:
    with resources.as_file(DATA / "curves.csv") as p:
        return read_curves(p, family)
