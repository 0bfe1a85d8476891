"""CLI tests: each command end to end, reproducibility, error paths."""

import json
from pathlib import Path

import pytest

from crosskv.cli import main
from crosskv.report import (
    METRICS_COLUMNS,
    METRICS_HEADER,
    read_metrics_csv,
    summarize_by_rate,
)

DEMO_SCENARIO = Path(__file__).resolve().parents[1] / "src/crosskv/data/demo_scenario.json"


def run_config(tmp_path, profile_dir=None, rates=(0.05,), adapt=True, q_min=0.95):
    doc = {
        "version": 1,
        "pair": {
            "n_layers": 8,
            "d_model": 64,
            "n_heads": 4,
            "n_kv_heads": 2,
            "d_ff": 128,
            "vocab_size": 256,
            "max_seq": 128,
            "base_seed": 7,
            "receiver_eps": [0, 0, 0, 0, 1.0, 1.0, 0, 0],
            "noise_seed": 1000,
        },
        "dataset": {"kind": "synthetic", "seed": 5000, "size": 3, "length": 40},
        "profiler": {"granularity": 2, "horizon": 32, "delta": 0.05},
        "serve": {
            "profile": str(profile_dir / "profile.json") if profile_dir else "",
            "rates": list(rates),
            "duration": 120.0,
            "context_len": 40,
            "output_len": 8,
            "seed": 9,
            "replicas": 2,
            "decode_cost": 0.05,
            "slo": 20.0,
            "q_min": q_min,
            "adapt": adapt,
            "cost": {
                "link_bandwidth": 1.0,
                "kv_layer_bytes": 0.1,
                "e_layer_bytes": 0.1,
                "layer_compute_time": 1.0,
            },
        },
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture(scope="module")
def profiled(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("profiled")
    cfg = run_config(tmp)
    out = tmp / "out"
    assert main(["profile", "--config", str(cfg), "--out", str(out)]) == 0
    return tmp, out


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------


def test_profile_outputs(profiled):
    _, out = profiled
    assert (out / "profile.json").exists()
    assert (out / "profile.png").exists()
    rows = (out / "points.csv").read_text().splitlines()
    assert rows[0].startswith("# crosskv-points")
    assert rows[1] == "a,b,k,quality"
    assert len(rows) == 2 + 10  # L=8, g=2 enumerates 10 configs


def test_profile_floor_config_covers_perturbed_block(profiled):
    _, out = profiled
    doc = json.loads((out / "profile.json").read_text())
    threshold = (1 - doc["floor_delta"]) * doc["baseline_quality"]
    chosen = next(e for e in doc["frontier"] if e["quality"] >= threshold)
    assert chosen["a"] <= 4 and 5 <= chosen["b"]


def test_profile_rerun_is_byte_identical(profiled, tmp_path):
    tmp, out = profiled
    cfg = run_config(tmp_path)
    out2 = tmp_path / "out2"
    assert main(["profile", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out / "profile.json").read_bytes() == (out2 / "profile.json").read_bytes()
    assert (out / "points.csv").read_bytes() == (out2 / "points.csv").read_bytes()


def test_profile_rejects_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1}')
    assert main(["profile", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "pair" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "strategy,total", [("naive", "47"), ("reuse-only", "30"), ("pipelined", "17")]
)
def test_plan_prints_golden_totals(capsys, strategy, total):
    assert main(["plan", "--config", str(DEMO_SCENARIO), "--strategy", strategy]) == 0
    out = capsys.readouterr().out
    assert f"total_ttft {total}" in out


def test_plan_writes_timeline(tmp_path, capsys):
    out = tmp_path / "plan"
    assert main([
        "plan", "--config", str(DEMO_SCENARIO), "--strategy", "pipelined", "--out", str(out)
    ]) == 0
    lines = (out / "timeline.csv").read_text().splitlines()
    assert lines[0].startswith("# crosskv-timeline")
    assert lines[1] == "request,resource,label,start,end"
    assert any("E-transfer(3)" in line for line in lines)
    assert (out / "timeline.png").exists()


def test_plan_parse_error_diagnostics(tmp_path, capsys):
    bad = tmp_path / "scenario.json"
    bad.write_text('{"version": 1, "requests": [{"arrival": 0}]}')
    assert main(["plan", "--config", str(bad), "--strategy", "naive"]) == 2
    assert "requests[0]" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def test_serve_outputs_and_low_rate_closed_form(profiled, tmp_path, capsys):
    tmp, out = profiled
    cfg = run_config(tmp_path, profile_dir=out, rates=(0.01,), adapt=False, q_min=0.99)
    serve_out = tmp_path / "serve"
    assert main(["serve", "--config", str(cfg), "--out", str(serve_out)]) == 0
    rows = read_metrics_csv(serve_out / "metrics.csv")
    assert rows, "low-rate sweep produced no requests"
    # zero contention: every TTFT equals the solitary full-prefill estimate
    # (recompute 8 layers at unit compute)
    assert all(r["ttft"] == 8.0 for r in rows)
    summary = json.loads((serve_out / "summary.json").read_text())
    assert summary["per_rate"][0]["ttft"]["mean"] == 8.0


def test_serve_deterministic(profiled, tmp_path):
    tmp, out = profiled
    cfg = run_config(tmp_path, profile_dir=out, rates=(0.1,))
    s1, s2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["serve", "--config", str(cfg), "--out", str(s1)]) == 0
    assert main(["serve", "--config", str(cfg), "--out", str(s2)]) == 0
    assert (s1 / "metrics.csv").read_bytes() == (s2 / "metrics.csv").read_bytes()
    assert (s1 / "summary.json").read_bytes() == (s2 / "summary.json").read_bytes()


def test_serve_rejects_incompatible_profile(profiled, tmp_path, capsys):
    tmp, out = profiled
    cfg = run_config(tmp_path, profile_dir=out)
    doc = json.loads(cfg.read_text())
    doc["pair"]["base_seed"] = 8  # different pair than the profile
    cfg.write_text(json.dumps(doc))
    assert main(["serve", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "pair" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


FIXTURE_ROWS = [
    "0.1,r00000,1.0,2.0,0.05,3.0,4,0,0",
    "0.1,r00001,2.0,4.0,0.05,5.0,4,1,0",
    "0.1,r00002,3.0,9.0,0.05,10.0,8,0,0",
]


def write_fixture(path, rows):
    path.write_text("\n".join([METRICS_HEADER, ",".join(METRICS_COLUMNS), *rows]) + "\n")


def test_report_hand_computed_aggregates(tmp_path, capsys):
    csv = tmp_path / "metrics.csv"
    write_fixture(csv, FIXTURE_ROWS)
    out = tmp_path / "report"
    assert main(["report", str(csv), "--out", str(out)]) == 0
    summary = summarize_by_rate(read_metrics_csv(csv))[0]
    assert summary["ttft"] == {"mean": 5.0, "median": 4.0, "p90": 9.0}
    dat = (out / "ttft_vs_rate.dat").read_text().splitlines()
    assert dat[0].startswith("# crosskv-report")
    assert dat[2].split() == ["0.1", "5.0", "4.0", "9.0"]
    for metric in ("ttft", "tbt", "e2e"):
        assert (out / f"{metric}_vs_rate.png").exists()
        assert (out / f"{metric}_vs_rate.dat").exists()


def test_report_empty_csv_is_diagnosed(tmp_path, capsys):
    csv = tmp_path / "metrics.csv"
    write_fixture(csv, [])
    assert main(["report", str(csv), "--out", str(tmp_path / "r")]) == 2
    assert "no data" in capsys.readouterr().err


def test_report_rejects_wrong_schema(tmp_path, capsys):
    csv = tmp_path / "metrics.csv"
    csv.write_text("ttft,e2e\n1,2\n")
    assert main(["report", str(csv), "--out", str(tmp_path / "r")]) == 2


def test_report_monotone_p90_over_sweep(profiled, tmp_path):
    tmp, out = profiled
    cfg = run_config(tmp_path, profile_dir=out, rates=(0.02, 0.1, 0.25), adapt=False, q_min=0.99)
    serve_out = tmp_path / "serve"
    assert main(["serve", "--config", str(cfg), "--out", str(serve_out)]) == 0
    summary = summarize_by_rate(read_metrics_csv(serve_out / "metrics.csv"))
    p90 = [row["ttft"]["p90"] for row in summary]
    assert p90 == sorted(p90)
