import json
import subprocess
import sys

import pytest

from ggmcert.bitimage import BitImage
from ggmcert.cli import main
from ggmcert.experiments import ConfigError, RunReport, ScenarioConfig

TINY = {
    "kind": "certify",
    "target": "slow_vehicle",
    "camera": {"f": 53.333, "W": 64, "H": 48},
    "box": {"lower": [-0.002, 0, 1.0, 0.05, 0.05, 0.05], "upper": [0.002, 0, 1.0, 0.05, 0.05, 0.05]},
    "seed": 3,
    "train": {"lr": 0.001, "lam": 0.001, "epochs": 1, "n_train": 300},
    "lipschitz": {"samples": 200, "neighbor_step": 0.0025},
    "random_poses": 200,
    "noise": {"nbar": [1], "trials": 20},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_validate_target_exit_codes(tmp_path, capsys):
    good = write(tmp_path, "good.xml", '<target><point id="1" x="0" y="0"/><point id="2" x="1" y="0"/>'
                 '<point id="3" x="0" y="1"/><polygon>1 2 3</polygon></target>')
    assert main(["validate-target", good]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True
    nonconvex = write(tmp_path, "bad.xml", '<target><point id="1" x="0" y="0"/><point id="2" x="2" y="0"/>'
                      '<point id="3" x="1" y="1"/><point id="4" x="2" y="2"/><point id="5" x="0" y="2"/>'
                      '<polygon>1 2 3 4 5</polygon></target>')
    assert main(["validate-target", nonconvex]) == 2
    broken = write(tmp_path, "broken.xml", "<target><polygon>1 2</target>")
    assert main(["validate-target", broken]) == 3
    assert main(["validate-target", str(tmp_path / "missing.xml")]) == 3


def test_render_writes_pbm(tmp_path):
    out = str(tmp_path / "img.pbm")
    assert main(["render", "--target", "slow_vehicle", "--pose", "0", "0", "1", "0.05", "0.05", "0.05", "--out", out]) == 0
    img = BitImage.from_pbm(open(out, "rb").read())
    assert img.shape == (48, 64) and img.count() > 0
    assert main(["render", "--pose", "0.5", "0", "1", "0", "0", "0", "--out", out]) == 2
    assert main(["render", "--pose", "0.5", "0", "1", "0", "0", "0", "--clip", "--out", out]) == 0


def test_reach_and_mask(tmp_path, capsys):
    box = ["0", "0", "1", "0.05", "0.05", "0.05", "0.002", "0", "1", "0.05", "0.05", "0.05"]
    out = str(tmp_path / "reach")
    assert main(["reach", "--box", *box, "--step", "0.0005", "--out", out]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["grid_poses"] == 5
    # a step that is not below 1/L_D is refused with a config error
    assert main(["reach", "--box", *box, "--step", "0.001", "--lipschitz", "1000", "--out", out]) == 3
    m = str(tmp_path / "mask.pbm")
    assert main(["mask", "--box", *box, "--step", "0.0005", "--out", m]) == 0
    assert BitImage.from_pbm(open(m, "rb").read()).count() > 0


def test_config_errors(tmp_path):
    bad_key = write(tmp_path, "k.json", json.dumps({**TINY, "colour": "red"}))
    assert main(["experiment", "certify", "--config", bad_key]) == 3
    bad_weights = write(tmp_path, "w.json", json.dumps({**TINY, "pose_weights": [1, 1, 1]}))
    assert main(["experiment", "certify", "--config", bad_weights]) == 3
    assert main(["experiment", "certify", "--config", write(tmp_path, "j.json", "{")]) == 3
    assert main(["experiment", "certify", "--config", str(tmp_path / "none.json")]) == 3
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({**TINY, "target": "no_such_target"})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({**TINY, "nbar": -1})


def test_shipped_configs_load():
    from ggmcert.cli import SHIPPED_CONFIGS, _shipped_config_path

    for name in SHIPPED_CONFIGS:
        ScenarioConfig.load(_shipped_config_path(name))


def test_train_certify_detect_chain(tmp_path, tiny_config, capsys):
    enc = str(tmp_path / "enc.bin")
    assert main(["train", "--config", tiny_config, "--out", enc]) == 0
    capsys.readouterr()
    cert = str(tmp_path / "cert.json")
    assert main(["certify", "--config", tiny_config, "--encoder", enc, "--out", cert]) == 0
    doc = json.load(open(cert))
    assert doc["certificate"]["bound"] > 0 and doc["certificate"]["conditional"] is True
    img = str(tmp_path / "img.pbm")
    assert main(["render", "--config", tiny_config, "--pose", "0.001", "0", "1", "0.05", "0.05", "0.05", "--out", img]) == 0
    empty = str(tmp_path / "empty.pbm")
    open(empty, "wb").write(BitImage.zeros(64, 48).to_pbm())
    out = str(tmp_path / "det.json")
    assert main(["detect", "--config", tiny_config, "--encoder", enc, "--certificate", cert, img, empty, "--out", out]) == 0
    res = json.load(open(out))
    assert [r["flag"] for r in res] == [True, False]


def test_experiment_certify_tiny(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "run")
    assert main(["experiment", "certify", "--config", tiny_config, "--out", out]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] is True
    report = json.load(open(tmp_path / "run" / "report.json"))
    assert report["config"]["seed"] == 3
    assert report["metrics"]["grid"]["max_error"] <= report["certificate"]["bound"]
    assert (tmp_path / "run" / "error_histogram.csv").exists()


def test_report_exit_codes():
    ok = RunReport("certify", "h", {}, {}, None, {}, True, [])
    bad = RunReport("certify", "h", {}, {}, None, {}, False, ["bound violated"])
    assert (ok.exit_code, bad.exit_code) == (0, 2)


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "ggmcert.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("validate-target", "render", "train", "certify", "reach", "mask", "detect", "pipeline", "experiment"):
        assert cmd in r.stdout
