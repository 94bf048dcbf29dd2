import json

import pytest

from zsvd import cli, store, toynet


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_compress_heterogeneous_ranks(tmp_path, capsys):
    out, rep = tmp_path / "m.zst", tmp_path / "r.json"
    assert run("compress", "--spec", "32,64,48,10", "--ratio", "0.6", "--mode", "standard",
               "--seed", 7, "--out", out, "--report", rep) == 0
    report = store.read_report(rep)
    ranks = [layer["rank"] for layer in report["layers"]]
    assert len(set(ranks)) > 1
    assert report["seeds"] == {"model": 7, "teacher": 7, "calib": 8, "fuzz": 9}
    assert "loss" in capsys.readouterr().out


def test_compress_deterministic(tmp_path):
    paths = []
    for tag in "ab":
        out, rep = tmp_path / f"{tag}.zst", tmp_path / f"{tag}.json"
        assert run("compress", "--ratio", "0.5", "--correct", "proj-grad", "--iters", 2,
                   "--seed", 3, "--out", out, "--report", rep) == 0
        paths.append((out, rep))
    assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
    assert paths[0][1].read_bytes() == paths[1][1].read_bytes()


def test_ratio_one_noop(tmp_path):
    rep = tmp_path / "r.json"
    assert run("compress", "--ratio", "1.0", "--out", tmp_path / "m", "--report", rep) == 0
    r = json.loads(rep.read_text())
    assert r["loss"]["before"] == r["loss"]["after"] and r["budget"]["trace"] == []


def test_hq_mode_recorded(tmp_path):
    rep = tmp_path / "r.json"
    assert run("compress", "--mode", "hq", "--ratio", "0.4", "--out", tmp_path / "m", "--report", rep) == 0
    r = json.loads(rep.read_text())
    assert r["selection_ratio"] == 0.8 and r["quantize_bits"] == 8 and r["mode"] == "hq"


def test_remap_flagged_simulated(tmp_path):
    rep = tmp_path / "r.json"
    assert run("compress", "--mode", "remap", "--ratio", "0.5", "--out", tmp_path / "m", "--report", rep) == 0
    assert json.loads(rep.read_text())["footprint"]["simulated"] is True


@pytest.mark.parametrize("argv", [
    ["--ratio", "0"],
    ["--ratio", "1.2"],
    ["--ratio", "abc"],
    ["--ratio", "0.5", "--spec", "4,5"],
    ["--ratio", "0.5", "--mode", "fancy"],
    ["--ratio", "0.5", "--iters", "-1"],
    ["--ratio", "0.5", "--spec", "4,4,4", "--model", "x"],
])
def test_malformed_flags_exit_2(tmp_path, argv):
    with pytest.raises(SystemExit) as exc:
        run("compress", *argv, "--out", tmp_path / "m", "--report", tmp_path / "r")
    assert exc.value.code == 2


@pytest.mark.parametrize("argv", [
    ["--strategy", "zerosum", "--unsorted"],
    ["--iters", "3"],
    ["--baseline", "--mode", "hq"],
    ["--correct", "alpha", "--alpha", "2"],
])
def test_config_conflicts_exit_2(tmp_path, argv):
    assert run("compress", "--ratio", "0.5", *argv, "--out", tmp_path / "m", "--report", tmp_path / "r") == 2


def test_missing_and_corrupt_files_exit_3(tmp_path):
    assert run("evaluate", "--model", tmp_path / "missing.zst") == 3
    bad = tmp_path / "bad.zst"
    bad.write_bytes(b"ZSTN\x01\x00")
    assert run("evaluate", "--model", bad) == 3


def test_evaluate_matches_forward(tmp_path, capsys):
    out = tmp_path / "m.zst"
    run("compress", "--ratio", "0.6", "--out", out, "--report", tmp_path / "r")
    capsys.readouterr()
    assert run("evaluate", "--compressed", out, "--compare", "0.6") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["model", "loss", "perplexity"]
    names = [line.split()[0] for line in lines[1:]]
    assert names == ["original", str(out), "homogeneous@0.6", "zero-sum@0.6"]
    from zsvd.model import ModelSpec

    spec = ModelSpec((32, 64, 48, 10))
    calib = toynet.gen_calibration(spec, 0, 512, input_seed=1)
    loss = toynet.evaluate(toynet.build_model(spec), calib)[0]
    assert float(lines[1].split()[1]) == pytest.approx(loss, abs=1e-6)
    assert lines[2].split()[1:] == lines[4].split()[1:]


def test_model_and_calib_files(tmp_path, capsys):
    from zsvd.model import ModelSpec

    spec = ModelSpec((8, 6, 4), "tanh", 2)
    store.save_model(tmp_path / "m.zst", toynet.build_model(spec))
    store.save_calib(tmp_path / "c.zst", toynet.gen_calibration(spec, 2, 40))
    assert run("compress", "--model", tmp_path / "m.zst", "--calib", tmp_path / "c.zst",
               "--ratio", "0.5", "--out", tmp_path / "o", "--report", tmp_path / "r") == 0


def test_analyze_columns(tmp_path):
    out = tmp_path / "a.txt"
    assert run("analyze", "--ratio", "0.6", "--tau", "1.0", "--out", out) == 0
    text = out.read_text()
    assert "# spectra" in text and "# drift" in text and "# rank_energy tau=1.0" in text
    drift = text.split("# drift\n")[1].split("\n\n")[0].splitlines()[1:]
    rep = tmp_path / "r.json"
    run("compress", "--ratio", "0.6", "--out", tmp_path / "m", "--report", rep)
    r = json.loads(rep.read_text())
    assert float(drift[-1].split("\t")[4]) == r["drift"]
    energy = text.split("# rank_energy")[1].splitlines()[2:]
    ranks = {layer["layer"]: layer["rank"] for layer in r["layers"]}
    for row in energy:
        layer, kw = (int(v) for v in row.split("\t")[:2])
        assert kw == ranks[layer]


def test_verify(capsys):
    assert run("verify", "--checks", "selector_trace,rank_bound") == 0
    assert "checks passed" in capsys.readouterr().out
    assert run("verify", "--checks", "") == 2
    assert run("verify", "--checks", "nope") == 2


def test_verify_negative_control():
    assert run("verify", "--checks", "truncation_energy", "--ridge-floor", "1e3") == 1
