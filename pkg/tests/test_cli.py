import csv
import json
import time

import numpy as np
import pytest
import yaml

from dura.cli import RunConfig, load_config, main, parse_config
from dura.data import GenConfig, generate
from dura.exceptions import ConfigError
from dura.trainer import Adam, EncoderParams, TrainConfig, TrainState, evaluate_params, save_checkpoint

SMOKE = """\
run_id: smoke
data:
  n_identities: 8
  images_per_identity: 4
  captions_per_image: 2
  n_test_identities: 10
  noise_rate: 0.2
train:
  epochs: 2
  warmup_epochs: 1
  batch_size: 8
  split_warmup_epochs: 1
"""


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def smoke(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text(SMOKE)
    return path


def test_generate_manifest(tmp_path):
    cfg = tmp_path / "g.yaml"
    cfg.write_text("data:\n  n_identities: 50\n  images_per_identity: 5\n  noise_rate: 0.2\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["n_pairs"] == 500 and man["n_flagged"] == 100
    assert man["requested_rho"] == 0.2 and man["realized_rho"] == 0.2
    assert len(man["config_hash"]) == 16
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("train.ds", "test.ds", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_smoke(smoke, tmp_path):
    t0 = time.perf_counter()
    assert main(["train", "--config", str(smoke), "--out", str(tmp_path / "t1")]) == 0
    assert time.perf_counter() - t0 < 30
    rows = _read(tmp_path / "t1" / "epochs.csv")
    assert len(rows) == 2
    assert all(r["run_id"] == "smoke" and r["rank1"] != "" for r in rows)
    assert (tmp_path / "t1" / "last.ckpt").exists() and (tmp_path / "t1" / "best.ckpt").exists()
    main(["train", "--config", str(smoke), "--out", str(tmp_path / "t2")])
    assert (tmp_path / "t1" / "epochs.csv").read_bytes() == (tmp_path / "t2" / "epochs.csv").read_bytes()

    # eval of the same checkpoint twice
    ck = str(tmp_path / "t1" / "last.ckpt")
    for out in ("e1", "e2"):
        assert main(["eval", "--config", str(smoke), "--checkpoint", ck, "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "e1" / "eval.csv").read_bytes() == (tmp_path / "e2" / "eval.csv").read_bytes()
    (row,) = _read(tmp_path / "e1" / "eval.csv")
    assert row["epoch"] == "2" and float(row["r1"]) >= 0


def test_train_from_generated_data(smoke, tmp_path):
    main(["generate", "--config", str(smoke), "--out", str(tmp_path / "d")])
    assert main(["train", "--config", str(smoke), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "t")]) == 0
    assert main(["train", "--config", str(smoke), "--out", str(tmp_path / "u")]) == 0
    assert (tmp_path / "t" / "epochs.csv").read_bytes() == (tmp_path / "u" / "epochs.csv").read_bytes()


def test_random_init_near_chance(tmp_path):
    cfg = TrainConfig(method="triplet")
    te = generate(GenConfig(), "test")
    assert len(np.unique(te.image_identity)) == 100
    params = EncoderParams.init(te.img_global.shape[1], cfg)
    state = TrainState(params, Adam(params.arrays()), noisy=np.zeros(1, bool), scores=np.zeros(1))
    ck = save_checkpoint(tmp_path / "init.ckpt", state, cfg)
    assert main(["eval", "--checkpoint", str(ck), "--out", str(tmp_path)]) == 0
    (row,) = _read(tmp_path / "eval.csv")
    chance = 100.0 * 5 / te.gallery().size
    assert chance / 5 <= float(row["r1"]) <= chance * 5


def test_oracle_embeddings_rank1_perfect():
    cfg = GenConfig(n_identities=4, n_test_identities=6, feature_dim=32, nuisance_dims=0,
                    inter_identity_margin=0.8, sigma_within=0.05, sigma_global=0.05, sigma_token=0.05)
    te = generate(cfg, "test")
    d = te.img_global.shape[1]
    assert evaluate_params(EncoderParams(np.eye(d), np.eye(d)), te).rank1 == 100.0


def test_sweep_single_cell(smoke, tmp_path):
    out = tmp_path / "s"
    assert main(["sweep", "--config", str(smoke), "--noise", "0", "--methods", "dura", "--out", str(out)]) == 0
    rows = _read(out / "summary.csv")
    assert [r["row"] for r in rows] == ["Best", "Last"]
    assert all(r["status"] == "ok" and r["method"] == "dura" for r in rows)
    assert len(_read(out / "rank1_vs_epoch.csv")) == 2
    assert list(out.glob("*.png"))


def test_sweep_ablation_rows(smoke, tmp_path):
    out = tmp_path / "s"
    rc = main(["sweep", "--config", str(smoke), "--noise", "0.2", "--methods", "ablation", "--out", str(out),
               "--no-plots"])
    assert rc == 0
    rows = _read(out / "summary.csv")
    labels = [r["label"] for r in rows if r["row"] == "Last"]
    assert labels == [
        "No.0 Baseline", "No.1 +TAL", "No.2 +TAL+L_h", "No.3 +TAL+L_e",
        "No.4 +TAL+KFS", "No.5 +TAL+KFS+L_e", "No.6 +TAL+KFS+L_h", "No.7 +TAL+KFS+L_e+L_h",
    ]
    assert not list(out.glob("*.png"))


def test_sweep_is_byte_identical(smoke, tmp_path):
    for name in ("a", "b"):
        main(["sweep", "--config", str(smoke), "--noise", "0,0.2", "--methods", "dura,triplet",
              "--out", str(tmp_path / name)])
    for f in ("summary.csv", "rank1_vs_epoch.csv", "evidence_hist.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    pngs = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert pngs
    for p in pngs:
        assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()


def test_exit_codes(smoke, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("run_id: x\ntrain:\n  epochz: 3\n")
    assert main(["print-config", "--config", str(bad)]) == 2
    assert "bad.yaml:3" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk)]) == 3
    assert main(["train", "--config", str(smoke), "--methods", "bogus"]) == 2


def test_divergence_exit(smoke, tmp_path, monkeypatch, capsys):
    import dura.trainer as trainer_mod

    real = trainer_mod.loss_total
    calls = {"n": 0}

    def flaky(*a, **kw):
        rep = real(*a, **kw)
        calls["n"] += 1
        if calls["n"] > 10:
            rep.value = float("nan")
        return rep

    monkeypatch.setattr(trainer_mod, "loss_total", flaky)
    assert main(["train", "--config", str(smoke), "--out", str(tmp_path / "t")]) == 4
    assert "last.ckpt" in capsys.readouterr().err


def test_print_config_roundtrip(smoke, capsys):
    assert main(["print-config", "--config", str(smoke), "--seed", "4"]) == 0
    text = capsys.readouterr().out
    cfg = parse_config(text)
    assert cfg == parse_config(cfg.dump())
    assert cfg.data.seed == cfg.train.seed == 4 and cfg.sweep.seeds == (4,)
    assert yaml.safe_load(text)["train"]["epochs"] == 2


def test_parse_errors():
    with pytest.raises(ConfigError, match=r":2"):
        parse_config("data:\n  bogus: 1\n", "x.yaml")
    with pytest.raises(ConfigError):
        parse_config("- a list\n")
    assert parse_config("") == RunConfig()


def test_config_hash_ignores_out():
    a = parse_config("out: a\n")
    b = parse_config("out: b\n")
    c = parse_config("run_id: other\n")
    assert a.config_hash() == b.config_hash() != c.config_hash()
