import hashlib
import json

import pytest

from ionlens.cli import EXIT_CACHE, EXIT_CONFIG, main

from conftest import default_cache_path, mini_geometry


def write_cfg(path, **cfg):
    path.write_text(json.dumps({"schema_version": 1, **cfg}))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().err


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def output_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


@pytest.fixture
def cache_env(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("ION_OPTICS_CACHE_DIR", str(d))
    return d


@pytest.fixture
def default_cfg(tmp_path, default_basis, default_spec):
    def make(name="cfg.json", **cfg):
        return write_cfg(tmp_path / name, basis_cache=str(default_cache_path(default_spec)), **cfg)
    return make


def test_solve_writes_then_reuses_cache(tmp_path, cache_env, capsys):
    cfg = write_cfg(tmp_path / "c.json", geometry=mini_geometry(refined=False).to_dict(), tolerance=1e-6)
    out = tmp_path / "out"
    code, err = run(capsys, "solve", "--config", cfg, "--out", str(out))
    assert code == 0, err
    m = manifest(out)
    assert m["reused"] is False and m["command"] == "solve"
    cached = list(cache_env.glob("*.ionb"))
    assert len(cached) == 1 and cached[0].name.startswith(m["geometry_hash"][:16])
    stamp = cached[0].stat().st_mtime_ns
    code, err = run(capsys, "solve", "--config", cfg, "--out", str(out))
    assert code == 0 and manifest(out)["reused"] is True
    assert cached[0].stat().st_mtime_ns == stamp
    # a tighter tolerance than the cached one forces a re-solve
    code, err = run(capsys, "solve", "--config", cfg, "--out", str(out), "--tolerance", "1e-7")
    assert code == 0 and manifest(out)["reused"] is False


def test_missing_config_exits_2(tmp_path, capsys):
    code, err = run(capsys, "trace", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    assert json.loads(err)["error"] == "missing_file"


def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", trace={"species": "proton"})
    code, err = run(capsys, "trace", "--config", cfg, "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    e = json.loads(err)
    assert e["error"] == "invalid_config" and e["path"] == "trace/species"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "trace", "--config", str(bad))[0] == EXIT_CONFIG
    assert run(capsys, "trace", "--threads", "0")[0] == EXIT_CONFIG


def test_invalid_geometry_exits_2(tmp_path, capsys):
    g = mini_geometry().to_dict()
    g["electrodes"][1]["z_position"] = 0.5e-3  # overlaps the chip
    cfg = write_cfg(tmp_path / "c.json", geometry=g)
    code, err = run(capsys, "solve", "--config", cfg, "--out", str(tmp_path))
    assert code == EXIT_CONFIG


def test_missing_cache_exits_3(tmp_path, cache_env, capsys):
    code, err = run(capsys, "characterize", "straycomp", "--out", str(tmp_path))
    assert code == EXIT_CACHE
    e = json.loads(err)
    assert e["error"] == "missing_cache" and e["path"].startswith(str(cache_env))


@pytest.mark.slow
def test_characterize_writes_outputs_and_manifest(tmp_path, default_cfg, capsys):
    out = tmp_path / "out"
    code, err = run(capsys, "characterize", "straycomp", "--config", default_cfg(), "--out", str(out))
    assert code == 0, err
    m = manifest(out)
    assert m["command"] == "characterize straycomp"
    assert set(m["outputs"]) == {"straycomp.csv", "straycomp.json", "straycomp.svg"}
    for name, digest in m["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    s = json.loads((out / "straycomp.json").read_text())
    assert s["monopole_V_per_cm_per_V"] == pytest.approx(2.155, rel=5e-3)
    assert "threads" not in m["config"]


@pytest.mark.slow
def test_characterize_scan_parameters(tmp_path, default_cfg, capsys):
    cfg = default_cfg(scans={"deflection": {"ux_values": [-50, 0, 50], "uy_values": [0]}})
    out = tmp_path / "out"
    assert run(capsys, "characterize", "deflection", "--config", cfg, "--out", str(out))[0] == 0
    assert len((out / "deflection.csv").read_text().splitlines()) == 4
    cfg = default_cfg("bad.json", scans={"deflection": {"bogus": 1}})
    assert run(capsys, "characterize", "deflection", "--config", cfg, "--out", str(out))[0] == EXIT_CONFIG


@pytest.mark.slow
def test_trace_is_seeded_and_thread_invariant(tmp_path, default_cfg, capsys):
    cfg = default_cfg(trace={"n": 4, "temperature_K": 1e-4, "positions": [[0, 0, -1e-4]]}, seed=5)
    outs = []
    for threads in ("1", "4"):
        out = tmp_path / f"t{threads}"
        code, err = run(capsys, "trace", "--config", cfg, "--out", str(out), "--threads", threads)
        assert code == 0, err
        outs.append(out)
    a, b = (output_bytes(o) for o in outs)
    assert a == b and len(a) == 5
    assert (outs[0] / "manifest.json").read_bytes() == (outs[1] / "manifest.json").read_bytes()
    impacts = json.loads((outs[0] / "impacts.json").read_text())
    assert all(i["termination"] == "detector" for i in impacts)
    # another seed samples different velocities
    out = tmp_path / "s6"
    assert run(capsys, "trace", "--config", cfg, "--out", str(out), "--seed", "6")[0] == 0
    assert output_bytes(out)["trajectory_0000.csv"] != a["trajectory_0000.csv"]


@pytest.mark.slow
def test_coincidence_outputs(tmp_path, default_cfg, capsys):
    cfg = default_cfg(coincidence={
        "plan": {"tau_s": {"ext": 0.0, "con": 0.0, "dt": 0.0}},
        "births": [[2e-4, 2e-4, -1e-4], [-2e-4, 2e-4, -1e-4]],
        "eta": 0.6,
        "n_pairs": 2000,
    })
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"c{threads}"
        code, err = run(capsys, "coincidence", "--config", cfg, "--out", str(out), "--threads", threads)
        assert code == 0, err
        outs.append(out)
    assert output_bytes(outs[0]) == output_bytes(outs[1])
    m = manifest(outs[0])
    assert "events.csv" in m["outputs"]
    assert m["plan"]["tau_s"]["ext"] == 0.0
    rows = (outs[0] / "events.csv").read_text().splitlines()
    assert len(rows) == 3
