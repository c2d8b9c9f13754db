import json

import numpy as np

import vempb as vp
from vempb import cli


def run(args):
    return cli.main(args)


def write_config(path, **overrides):
    cfg = {
        "physics": {"eps_m": 1.0, "eps_s": 1.0, "kappa": 0.0, "charges": []},
        "mesh": {"family": "cubic", "n": 2},
        "load": {"mode": "manufactured", "solution": "sine3"},
    }
    for key, val in overrides.items():
        cfg[key] = val
    path.write_text(json.dumps(cfg))
    return path


def test_mesh_gen_writes_file(tmp_path, capsys):
    out = tmp_path / "m.vpm"
    assert run(["mesh", "gen", "--family", "cubic", "--n", "2", "-o", str(out)]) == 0
    m = vp.load_mesh(out)
    assert m.n_vertices == 27
    assert "27 vertices" in capsys.readouterr().out


def test_mesh_gen_rejects_bad_size(tmp_path, capsys):
    out = tmp_path / "m.vpm"
    assert run(["mesh", "gen", "--family", "tet", "--n", "0", "-o", str(out)]) == 2


def test_mesh_check_valid_file(tmp_path, capsys):
    out = tmp_path / "m.vpm"
    run(["mesh", "gen", "--family", "voronoi", "--n-seeds", "20", "--rng-seed", "3", "-o", str(out)])
    assert run(["mesh", "check", str(out)]) == 0
    text = capsys.readouterr().out
    assert "gamma estimate" in text
    assert "interface cells" in text


def test_mesh_check_corrupted_file(tmp_path, capsys):
    out = tmp_path / "m.vpm"
    run(["mesh", "gen", "--family", "cubic", "--n", "2", "-o", str(out)])
    text = out.read_text().splitlines()
    out.write_text("\n".join(text[: len(text) // 2]))  # truncate
    assert run(["mesh", "check", str(out)]) == 2
    assert "line" in capsys.readouterr().err


def test_solve_linear_single_newton_iteration(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "u.csv"
    assert run(["solve", "-c", str(cfg), "-o", str(out)]) == 0
    text = capsys.readouterr().out
    assert "newton iterations: 1" in text
    header = out.read_text().splitlines()[0]
    assert header == "id,x,y,z,u"


def test_solve_deterministic_output(tmp_path):
    cfg = write_config(tmp_path / "c.json", mesh={"family": "voronoi", "n_seeds": 30, "rng_seed": 5})
    out1, out2 = tmp_path / "u1.csv", tmp_path / "u2.csv"
    assert run(["solve", "-c", str(cfg), "-o", str(out1)]) == 0
    assert run(["solve", "-c", str(cfg), "-o", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_thread_count_does_not_change_artifacts(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out1, out2 = tmp_path / "u1.csv", tmp_path / "u2.csv"
    assert run(["--threads", "1", "solve", "-c", str(cfg), "-o", str(out1)]) == 0
    assert run(["--threads", "4", "solve", "-c", str(cfg), "-o", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_solve_reported_error_matches_recomputation(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "mesh": {"family": "cubic", "n": 8},
        "load": {"mode": "manufactured", "solution": "sine3"},
    }))
    out = tmp_path / "u.csv"
    assert run(["solve", "-c", str(cfg), "-o", str(out)]) == 0
    text = capsys.readouterr().out
    reported = float([l for l in text.splitlines() if l.startswith("e_l2:")][0].split()[1])

    rows = np.loadtxt(out, delimiter=",", skiprows=1)
    u = rows[np.argsort(rows[:, 0].astype(int)), 4]
    m = vp.generate_cube_mesh(8)
    load = vp.manufactured_sine()
    assert abs(vp.error_l2(m, u, load.u_exact) - reported) <= 1e-12


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mesh": {"family": "cubic", "n": 2}, "bogus": {}}))
    assert run(["solve", "-c", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_unknown_nested_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"solver": {"tol": 1.0}}))
    assert run(["solve", "-c", str(cfg)]) == 2
    assert "solver" in capsys.readouterr().err


def test_study_two_levels(tmp_path, capsys):
    cfg = write_config(
        tmp_path / "c.json",
        study={"levels": [{"n": 2}, {"n": 4}]},
        output={"report": str(tmp_path / "rep.csv"), "plot": str(tmp_path / "rep.plotdat")},
    )
    assert run(["study", "-c", str(cfg)]) == 0
    lines = (tmp_path / "rep.csv").read_text().splitlines()
    data = [l for l in lines if not l.startswith("#")]
    assert len(data) == 3  # header + 2 levels
    first, second = data[1].split(","), data[2].split(",")
    assert first[5] == "-" and first[7] == "-"
    float(second[5]); float(second[7])  # orders present on the refined level
    assert (tmp_path / "rep.plotdat").exists()
    assert "fitted orders" in capsys.readouterr().out


def test_study_single_level_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", study={"levels": [{"n": 2}]})
    assert run(["study", "-c", str(cfg)]) == 2
    assert "2 study levels" in capsys.readouterr().err


def test_study_deterministic_artifacts(tmp_path):
    rep1, rep2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    cfg = write_config(
        tmp_path / "c.json",
        mesh={"family": "voronoi", "rng_seed": 2},
        study={"levels": [{"n_seeds": 20}, {"n_seeds": 60}]},
    )
    assert run(["study", "-c", str(cfg), "-o", str(rep1)]) == 0
    assert run(["study", "-c", str(cfg), "-o", str(rep2)]) == 0
    assert rep1.read_bytes() == rep2.read_bytes()
    assert rep1.with_suffix(".plotdat").read_bytes() == rep2.with_suffix(".plotdat").read_bytes()


def test_config_roundtrip_reproduces_report(tmp_path):
    """The effective config echoed in the report reproduces the results."""
    cfg = write_config(tmp_path / "c.json", study={"levels": [{"n": 2}, {"n": 3}]})
    rep1 = tmp_path / "r1.csv"
    assert run(["study", "-c", str(cfg), "-o", str(rep1)]) == 0
    echoed = json.loads(rep1.read_text().splitlines()[0].removeprefix("# config "))
    cfg2 = tmp_path / "echo.json"
    cfg2.write_text(json.dumps(echoed))
    rep2 = tmp_path / "r2.csv"
    assert run(["study", "-c", str(cfg2), "-o", str(rep2)]) == 0
    body1 = [l for l in rep1.read_text().splitlines() if not l.startswith("#")]
    body2 = [l for l in rep2.read_text().splitlines() if not l.startswith("#")]
    assert body1 == body2


def test_solver_failure_exits_3_and_saves_partial_state(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "mesh": {"family": "cubic", "n": 2},
        "load": {"mode": "manufactured", "solution": "sine3"},
        "solver": {"max_iterations": 1, "rel_tol": 1e-14},
    }))
    out = tmp_path / "u.csv"
    assert run(["solve", "-c", str(cfg), "-o", str(out)]) == 3
    assert not out.exists()
    failed = tmp_path / "u.csv.failed"
    assert failed.exists()
    assert failed.read_text().startswith("id,x,y,z,u")
    assert "solver failure" in capsys.readouterr().err


def test_regularized_solve_runs(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "mesh": {"family": "cubic", "n": 4},
        "load": {"mode": "regularized"},
    }))
    out = tmp_path / "u.csv"
    assert run(["solve", "-c", str(cfg), "-o", str(out)]) == 0
    rows = np.loadtxt(out, delimiter=",", skiprows=1)
    assert np.isfinite(rows[:, 4]).all()
    assert np.abs(rows[:, 4]).max() > 0.0
