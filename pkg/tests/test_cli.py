import numpy as np
import pytest

from gvd.cli import main
from gvd.io import read_image, write_image
from gvd.predictor import init_params, save_params
from gvd.config import ModelConfig


def test_decompose_constant_image(tmp_path):
    write_image(tmp_path / "flat.gvd", np.full((8, 8), 0.4))
    assert main(["decompose", "--input", str(tmp_path / "flat.gvd"), "--out", str(tmp_path / "o")]) == 0
    assert not np.any(read_image(tmp_path / "o" / "flat_texture.gvd"))
    assert np.all(read_image(tmp_path / "o" / "flat_cartoon.gvd") == 0.4)
    for suffix in ("_cartoon.pgm", "_texture.pgm", "_trace.csv"):
        assert (tmp_path / "o" / f"flat{suffix}").exists()


def test_eval_on_labels(tmp_path):
    data = tmp_path / "d"
    assert main(["generate", "--count", "2", "--size", "8x8", "--seed", "1", "--out", str(data)]) == 0
    pred = tmp_path / "p"
    pred.mkdir()
    for i in range(2):
        write_image(pred / f"img_{i:04d}_f_cartoon.gvd", read_image(data / f"img_{i:04d}_c.gvd"))
        write_image(pred / f"img_{i:04d}_f_texture.gvd", read_image(data / f"img_{i:04d}_t.gvd"))
    assert main(["eval", "--manifest", str(data / "manifest.txt"), "--pred", str(pred),
                 "--out", str(tmp_path / "e.csv")]) == 0
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "# gvd-eval v1" and len(rows) == 4
    for row in rows[2:]:
        name, cp, cr, cs, tp, tr, ts = row.split(",")
        assert cp == tp == "exact" and float(cr) == float(tr) == 0.0 and float(cs) == float(ts) == 1.0


def test_learned_mode_and_train(tmp_path):
    data = tmp_path / "d"
    main(["generate", "--count", "2", "--size", "8x8", "--seed", "2", "--out", str(data)])
    params = tmp_path / "p.gvdp"
    assert main(["train", "--manifest", str(data / "manifest.txt"), "--steps", "2", "--out", str(params)]) == 0
    hist = (tmp_path / "p.gvdp.loss.csv").read_text().splitlines()
    assert hist[:2] == ["# gvd-loss v1", "step,loss"] and len(hist) == 5
    assert main(["decompose", "--mode", "learned", "--params", str(params), "--input",
                 str(data / "img_0000_f.gvd"), "--out", str(tmp_path / "o")]) == 0


def test_learned_mode_requires_params(tmp_path, capsys):
    write_image(tmp_path / "a.gvd", np.zeros((4, 4)))
    assert main(["decompose", "--mode", "learned", "--input", str(tmp_path / "a.gvd"),
                 "--out", str(tmp_path)]) == 1


def test_theory_check(tmp_path):
    write_image(tmp_path / "a.gvd", np.random.default_rng(0).random((8, 8)))
    cfg = ModelConfig()
    save_params(tmp_path / "p.gvdp", init_params(cfg))
    assert main(["theory-check", "--input", str(tmp_path / "a.gvd"), "--params", str(tmp_path / "p.gvdp"),
                 "--trials", "5", "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("# gvd-theory v1")


def test_config_file(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("lambda1 = 2.0  # stronger cartoon penalty\nK = 3\n")
    assert main(["show-config", "--config", str(tmp_path / "c.cfg")]) == 0
    out = capsys.readouterr().out
    assert "lambda1 = 2.0" in out and "K = 3" in out
    (tmp_path / "bad.cfg").write_text("lambda3 = 1\n")
    assert main(["show-config", "--config", str(tmp_path / "bad.cfg")]) == 1


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["generate", "--count", "1", "--size", "4x4", "--out", str(tmp_path), "--bogus"])
    assert e.value.code == 2


def test_missing_input_exit_1(tmp_path):
    assert main(["decompose", "--input", str(tmp_path / "nope.gvd"), "--out", str(tmp_path)]) == 1
