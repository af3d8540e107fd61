import csv

import numpy as np
import pytest

from cvseg import checkpoint, train as train_mod
from cvseg.cli import cell_name, main, parse_grid
from cvseg.config import ExperimentConfig
from cvseg.errors import ConfigError, ContractError, DivergenceError

TINY = ["dataset.n_train=4", "dataset.n_val=2", "optim.epochs=2", "optim.batch_size=4",
        "cvlr.d=16", "cvlr.d_model=16", "loss.warmup_epochs=1"]


def tiny_args(*extra):
    args = []
    for item in TINY + list(extra):
        args += ["--set", item]
    return args


class TestConfig:
    def test_text_roundtrip(self):
        cfg = ExperimentConfig().with_overrides({"views.scales": "0.5, 1.0, 0.75", "cvlr.tau": "0.5",
                                                 "mvmc.refine": "false", "out": "x/y"})
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    def test_file_with_comments(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("# toy run\nseed = 7\n\noptim.lr = 0.01  # faster\n")
        cfg = ExperimentConfig.load(path)
        assert cfg.seed == 7 and cfg.optim.lr == 0.01

    @pytest.mark.parametrize("key,value,field", [
        ("nope", "1", "nope"),
        ("optim.nope", "1", "optim.nope"),
        ("optim.lr", "fast", "optim.lr"),
        ("mvmc.refine", "maybe", "mvmc.refine"),
    ])
    def test_bad_keys_and_values(self, key, value, field):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig().with_overrides({key: value})
        assert info.value.field == field

    @pytest.mark.parametrize("key,value,field", [
        ("mvmc.gamma", "1.5", "mvmc.gamma"),
        ("views.crop", "64", "views.crop"),
        ("views.crop", "42", "views.crop"),
        ("cvlr.tau", "0", "cvlr.tau"),
        ("mvmc.kernel_size", "4", "mvmc.kernel_size"),
        ("optim.optimizer", "lbfgs", "optim.optimizer"),
        ("dataset.regime", "full", "dataset.regime"),
        ("loss.mask_space", "codes", "loss.mask_space"),
    ])
    def test_validation(self, key, value, field):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig().with_overrides({key: value}).validate()
        assert info.value.field == field

    def test_defaults_validate(self):
        ExperimentConfig().validate()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.weight": rng.normal(size=(3, 2, 1, 4)), "b": rng.normal(size=5), "scalar": np.array(2.5)}
        checkpoint.save(tmp_path / "c.bin", params)
        back = checkpoint.load(tmp_path / "c.bin")
        assert list(back) == list(params)
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])

    def test_header(self, tmp_path):
        checkpoint.save(tmp_path / "c.bin", {"w": np.zeros(2)})
        assert (tmp_path / "c.bin").read_bytes()[:8] == b"CVSGCKPT"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"garbage!" + bytes(16))
        with pytest.raises(ContractError):
            checkpoint.load(tmp_path / "c.bin")

    def test_truncated(self, tmp_path):
        checkpoint.save(tmp_path / "c.bin", {"w": np.ones(4)})
        blob = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(blob[:-8])
        with pytest.raises(ContractError):
            checkpoint.load(tmp_path / "c.bin")

    def test_restore_checks_names_and_shapes(self):
        from cvseg.autograd import Tensor
        params = {"w": Tensor(np.zeros(3))}
        with pytest.raises(ContractError):
            checkpoint.restore(params, {"v": np.zeros(3)})
        with pytest.raises(ContractError):
            checkpoint.restore(params, {"w": np.zeros(4)})
        checkpoint.restore(params, {"w": np.arange(3.0)})
        np.testing.assert_array_equal(params["w"].data, [0, 1, 2])


class TestGrid:
    def test_cartesian_product(self):
        cells = parse_grid(["loss.reg=0,4", "views.flip=true,false"])
        assert len(cells) == 4 and cells[0] == {"loss.reg": "0", "views.flip": "true"}
        assert cell_name(cells[-1]) == "loss.reg=4__views.flip=false"

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_grid(["loss.reg"])
        with pytest.raises(ConfigError):
            parse_grid(["loss.reg="])


class TestCommands:
    def test_config_error_exit_code(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path), "--set", "optim.lr=-1"])
        assert code == 2
        assert "config error: optim" in capsys.readouterr().err

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_train_artifacts_and_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--out", str(a), "--seed", "3"] + tiny_args()) == 0
        assert main(["train", "--out", str(b), "--seed", "3"] + tiny_args()) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        resolved = ExperimentConfig.load(a / "config.resolved")
        assert resolved.seed == 3 and resolved.dataset.n_train == 4
        assert (a / "checkpoints" / "final.bin").exists()
        with open(a / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == list(train_mod.CSV_COLUMNS)
        assert [r["epoch"] for r in rows] == ["0", "1"] and rows[0]["schema"] == train_mod.CSV_SCHEMA

    def test_different_seed_differs(self, tmp_path):
        main(["train", "--out", str(tmp_path / "a"), "--seed", "0"] + tiny_args())
        main(["train", "--out", str(tmp_path / "b"), "--seed", "1"] + tiny_args())
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_eval_and_export(self, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert main(["train", "--out", out] + tiny_args()) == 0
        capsys.readouterr()
        assert main(["eval", "--out", out] + tiny_args()) == 0
        printed = capsys.readouterr().out
        with open(tmp_path / "run" / "metrics.csv") as fh:
            last = list(csv.DictReader(fh))[-1]
        assert f"mIoU {float(last['miou']):.6f}" in printed
        assert main(["export-masks", "--out", out, "--limit", "2", "--split", "train"] + tiny_args()) == 0
        for kind in ("pred", "pseudo", "gt"):
            files = sorted((tmp_path / "run" / "masks" / "train" / kind).glob("*.png"))
            assert [f.name for f in files] == ["0000.png", "0001.png"]

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path / "none")] + tiny_args()) == 1

    def test_ablate_lambda_sweep(self, tmp_path):
        out = tmp_path / "sweep"
        args = ["ablate", "--out", str(out), "--grid", "loss.reg=0,1,4,16,64"] + tiny_args("optim.epochs=1")
        assert main(args) == 0
        csvs = sorted(out.glob("*/metrics.csv"))
        assert [p.parent.name for p in csvs] == [f"loss.reg={v}" for v in ("0", "1", "16", "4", "64")]
        for p in csvs:
            assert ExperimentConfig.load(p.parent / "config.resolved").loss.reg == float(p.parent.name.split("=")[1])
        with open(out / "summary.csv") as fh:
            assert [r["status"] for r in csv.DictReader(fh)] == ["ok"] * 5

    def test_ablate_rejects_bad_cell_before_training(self, tmp_path):
        assert main(["ablate", "--out", str(tmp_path), "--grid", "mvmc.gamma=0.5,2"] + tiny_args()) == 2
        assert not any(tmp_path.iterdir())

    def test_divergence(self, tmp_path, monkeypatch, capsys):
        def exploding(net, split, batch, cfg, weights, rng):
            return None, dict.fromkeys(train_mod.LOSS_KEYS, float("nan"))

        monkeypatch.setattr(train_mod, "train_step", exploding)
        with pytest.raises(DivergenceError):
            train_mod.train(ExperimentConfig().with_overrides(dict(s.split("=") for s in TINY)), tmp_path / "d")
        assert (tmp_path / "d" / "divergence.json").exists()
        assert main(["train", "--out", str(tmp_path / "e")] + tiny_args()) == 3
        assert "diverged" in capsys.readouterr().err

    def test_selftest_quick(self, capsys):
        assert main(["selftest", "--quick"]) == 0
        assert "8/8 checks passed" in capsys.readouterr().out
