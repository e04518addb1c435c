import json

import pytest

from lbi.cli import main


def test_costmodel_output(capsys, tmp_path):
    main(["costmodel", "--csv", str(tmp_path / "c.csv")])
    out = capsys.readouterr().out
    assert "ssm" in out and "lbi_scan" in out and "4.194e+06" in out
    assert (tmp_path / "c.csv").read_text().startswith("arch,c=1,c=16,c=64,min_c")
    main(["costmodel", "--K", "7", "--r", "64"])
    assert "57344 bytes" in capsys.readouterr().out


def test_scan_bench(capsys):
    main(["scan-bench", "--K", "1", "5", "--r", "4"])
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and out[2].split()[4] == "3"


def test_parity(capsys, tmp_path):
    main(["parity", "--backend", "hybrid", "--D", "16", "--L", "8", "--r", "4", "--K", "3",
          "--inits", "1", "--batches", "2", "--schedule", "streaming", "--csv", str(tmp_path / "p.csv")])
    assert "trials=2" in capsys.readouterr().out
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 3


def _tiny_config(tmp_path, corpus_path):
    cfg = {"model": {"D": 16, "L": 16, "r": 4, "K": 2, "X": 32}, "steps": 3, "batch_size": 2,
           "eval_tokens": 64, "spectra_every": 1, "data": corpus_path, "out_dir": str(tmp_path / "run")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_train_and_spectra(capsys, tmp_path, corpus_path):
    cfg = _tiny_config(tmp_path, corpus_path)
    main(["train", "--config", cfg, "--chunk", "2", "--schedule", "streaming"])
    assert "seed 0:" in capsys.readouterr().out
    ckpt = tmp_path / "run" / "seed0" / "model.ckpt"
    assert ckpt.exists()
    main(["spectra", str(ckpt), "--data", corpus_path, "--csv", str(tmp_path / "s.csv")])
    assert "region=1" in capsys.readouterr().out
    assert (tmp_path / "s.csv").read_text().startswith("step,seed,region,")


def test_sweep_and_compare_dense(capsys, tmp_path, corpus_path):
    cfg = _tiny_config(tmp_path, corpus_path)
    main(["sweep", "--config", cfg, "--axis", "rank", "--values", "2", "4", "--csv", str(tmp_path / "sw.csv")])
    assert "rank=2" in capsys.readouterr().out
    main(["compare-dense", "--config", cfg, "--steps", "2"])
    assert "mean_gap" in capsys.readouterr().out


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
