import csv
import io
from contextlib import redirect_stdout

import pytest

from macagg import cli
from macagg.auth import AggScheme
from macagg.config import load_presets, load_scenario, load_schedule, load_sweep
from macagg.experiment import (
    Scenario,
    delay_profile,
    energy_of,
    fraction_within,
    run_dynamic,
    run_scenario,
    static_scenario,
    step_schedule,
    sweep,
)


def test_energy_endpoints():
    assert energy_of(4) == 0.6 and energy_of(110) == 2.6
    assert energy_of(1) == 0.6 and energy_of(500) == 2.6
    assert energy_of(57) == pytest.approx(1.6)


@pytest.mark.parametrize("scheme,extra", [("Trad", 16), ("Agg(2)", 8), ("Agg(16)", 1), ("R2D2(8,0)", 2),
                                          ("R2D2(8,100)", 4)])
def test_lossless_pipeline_closed_form(scheme, extra):
    r = run_scenario(Scenario("x", 20, messages=400, channel="lossless", scheme=scheme))
    assert r.authenticated_goodput == pytest.approx(20 / (20 + 3 + extra), abs=1e-9)
    assert r.frames_lost == 0 and r.realized_per == 0


def test_agg8_delay_pattern():
    r = run_scenario(Scenario("x", 10, messages=800, channel="lossless", scheme="Agg(8)", rate_hz=2))
    assert r.delay_histogram == {d: 100 for d in range(8)}
    assert fraction_within(r, 5) == pytest.approx(6 / 8)
    assert r.delay_seconds()[3.5] == 100
    cdf = delay_profile(r)
    assert cdf[-1][2] == pytest.approx(1.0) and cdf[0][:2] == (0, 0.0)


def test_trad_delay_is_immediate():
    r = run_scenario(Scenario("x", 10, messages=160, channel="lossless"))
    assert r.delay_histogram == {0: 160}


def test_losses_reduce_goodput_deterministically():
    sc = Scenario("x", 10, messages=2000, channel="bad", scheme="Agg(4)", seed=3)
    a, b = run_scenario(sc), run_scenario(sc)
    assert a.row() == b.row()
    assert 0 < a.authenticated_goodput < 10 / 17
    assert a.frames_lost > 0


def test_static_scenarios():
    s = static_scenario("static-30B", "Agg(16)", messages=500)
    assert (s.payload_len, s.rate_hz, s.scheme) == (30, 10.0, "Agg(16)")
    with pytest.raises(ValueError):
        Scenario("x", 92)
    with pytest.raises(ValueError):
        Scenario("x", 10, scheme="Agg(3)")


def test_sweep_matches_closed_form_when_lossless():
    rows = sweep(load_presets()["lossless"], [10, 91], [AggScheme.trad(), AggScheme.agg(4), AggScheme.r2d2(50)],
                 messages=2000)
    got = {(r.payload_len, r.scheme): r.goodput for r in rows}
    assert got[(10, "Agg(4)")] == pytest.approx(10 / 17)
    assert got[(91, "R2D2(8,50)")] == pytest.approx(91 / 97)
    assert all(r.realized_per == 0 for r in rows)


def test_dynamic_trad_baseline_has_no_switches():
    r = run_dynamic(step_schedule(0.0, 0.0, 200, 200), "trad")
    assert r.switch_log == [] or len(r.switch_log) == 1


def test_config_files_load():
    assert load_scenario("configs/static-10B.toml").payload_len == 10
    assert load_sweep("configs/sweep-bad.toml")["channel"] == "bad"
    sched = load_schedule("configs/step.toml")
    assert [s.packets for s in sched["segments"]] == [2000, 3000]
    assert load_schedule("configs/good-to-bad.toml")["family"] == "r2d2"


def _cli(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        cli.main(argv)
    return buf.getvalue()


def test_cli_run_is_deterministic(tmp_path):
    argv = ["run", "configs/static-10B.toml", "--scheme", "Agg(8)", "--messages", "320", "--seed", "4"]
    a, b = _cli(argv), _cli(argv)
    assert a == b
    row = next(csv.DictReader(io.StringIO(a)))
    assert row["scheme"] == "Agg(8)" and row["messages"] == "320"
    out = tmp_path / "sweep.csv"
    cli.main(["sweep", "configs/sweep-good.toml", "--messages", "500", "--out", str(out)])
    rows = list(csv.DictReader(out.open()))
    assert {r["scheme"] for r in rows} >= {"Trad", "Agg(16)"}
