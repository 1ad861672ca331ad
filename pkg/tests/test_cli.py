"""End-to-end command line behavior."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from megt.cli import main
from megt.data import Bag, read_bag, write_bag
from megt.model import load_model
from megt.numerics import Tensor


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def synth_args(out, bags=20, seed=3, task="cross-scale", d=6):
    return ["synth", "--task", task, "--bags", str(bags), "--out", str(out),
            "--seed", str(seed), "--d", str(d),
            "--n-low-min", "3", "--n-low-max", "5"]


TINY = ["--set", "d_model=16", "--set", "n_heads=2", "--set", "m_landmarks=4",
        "--set", "pinv_iters=6", "--set", "k_keep=3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(synth_args(out))
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, corpus):
    path = tmp_path_factory.mktemp("ckpt") / "model.megm"
    code = main(["train", "--data", str(corpus / "manifest.tsv"), "--out", str(path),
                 "--max-epochs", "2", "--seed", "0"] + TINY)
    assert code == 0
    return path


def dir_bytes(root):
    out = {}
    for name in sorted(os.listdir(root)):
        with open(os.path.join(root, name), "rb") as fh:
            out[name] = fh.read()
    return out


class TestSynth:
    def test_deterministic_output(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(synth_args(a)) == 0
        assert main(synth_args(b)) == 0
        capsys.readouterr()
        assert dir_bytes(a) == dir_bytes(b)

    def test_seed_changes_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(synth_args(a, seed=1)) == 0
        assert main(synth_args(b, seed=2)) == 0
        capsys.readouterr()
        assert dir_bytes(a) != dir_bytes(b)

    def test_zero_bags_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, *synth_args(tmp_path / "x", bags=0))
        assert code == 2
        assert "no bags" in err

    def test_manifest_has_one_line_per_bag_plus_comment(self, corpus):
        lines = (corpus / "manifest.tsv").read_text().splitlines()
        assert len(lines) == 21
        assert lines[0].startswith("#")

    def test_split_sizes(self, corpus):
        lines = (corpus / "manifest.tsv").read_text().splitlines()[1:]
        splits = [ln.split("\t")[2] for ln in lines]
        assert splits.count("train") == 14  # int(0.7 * 20)
        assert splits.count("val") == 2     # int(0.1 * 20)
        assert splits.count("test") == 4

    def test_env_seed_used_when_flag_absent(self, tmp_path, capsys, monkeypatch):
        a, b = tmp_path / "a", tmp_path / "b"
        monkeypatch.setenv("MEGT_SEED", "9")
        args = synth_args(a)
        seed_at = args.index("--seed")
        del args[seed_at:seed_at + 2]
        args[args.index(str(a))] = str(a)
        assert main(args) == 0
        monkeypatch.delenv("MEGT_SEED")
        assert main(synth_args(b, seed=9)) == 0
        capsys.readouterr()
        assert dir_bytes(a) == dir_bytes(b)


class TestTrainEval:
    def test_round_trip(self, corpus, checkpoint, capsys):
        code, out, _ = run(capsys, "eval", "--data", str(corpus / "manifest.tsv"),
                           "--model", str(checkpoint))
        assert code == 0
        report = json.loads(out)
        assert list(report) == ["accuracy", "recall_macro", "f1_macro", "auc", "n"]
        assert report["n"] == 4
        assert isinstance(report["auc"], float)

    def test_checkpoint_loadable(self, checkpoint):
        model = load_model(str(checkpoint))
        assert model.config.d_model == 16
        assert model.config.arch == "megt"

    def test_history_file(self, corpus, tmp_path, capsys):
        hist_path = tmp_path / "hist.json"
        code, out, _ = run(
            capsys, "train", "--data", str(corpus / "manifest.tsv"),
            "--out", str(tmp_path / "m.megm"), "--max-epochs", "1",
            "--seed", "0", "--history", str(hist_path), *TINY,
        )
        assert code == 0
        history = json.loads(hist_path.read_text())
        assert len(history) == 1
        assert set(history[0]) == {"epoch", "train_loss", "val_loss"}
        summary = json.loads(out)
        assert summary["epochs"] == 1

    def test_ablation_flags(self, corpus, tmp_path, capsys):
        path = tmp_path / "ablated.megm"
        code, _, _ = run(
            capsys, "train", "--data", str(corpus / "manifest.tsv"),
            "--out", str(path), "--max-epochs", "1", "--seed", "0",
            "--no-tpm", "--no-gtl", *TINY,
        )
        assert code == 0
        model = load_model(str(path))
        assert model.config.enable_tpm is False
        assert model.config.enable_gtl is False

    def test_eval_twice_is_byte_identical(self, corpus, checkpoint, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for target in (a, b):
            code, _, _ = run(capsys, "eval", "--data", str(corpus / "manifest.tsv"),
                             "--model", str(checkpoint), "--out", str(target))
            assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_set_key(self, corpus, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", str(corpus / "manifest.tsv"),
                           "--out", str(tmp_path / "m.megm"),
                           "--set", "dropout=0.5")
        assert code == 2
        assert "dropout" in err

    def test_width_mismatch_names_both(self, checkpoint, tmp_path, capsys):
        other = tmp_path / "wide"
        assert main(synth_args(other, d=9)) == 0
        capsys.readouterr()
        code, _, err = run(capsys, "eval", "--data", str(other / "manifest.tsv"),
                           "--model", str(checkpoint))
        assert code == 2
        assert "6" in err and "9" in err

    def test_three_class_eval_has_null_auc(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        lines = []
        for i in range(12):
            low = rng.normal(size=(3, 5))
            label = i % 3
            low[:, label] += 4.0
            bag = Bag(Tensor(low), Tensor(rng.normal(size=(6, 5))), label, f"b{i}")
            write_bag(bag, str(tmp_path / f"b{i}.megb"))
            split = "train" if i < 8 else ("val" if i < 10 else "test")
            lines.append(f"b{i}.megb\t{label}\t{split}")
        man = tmp_path / "m.tsv"
        man.write_text("\n".join(lines) + "\n")
        ckpt = tmp_path / "m3.megm"
        code, _, _ = run(capsys, "train", "--data", str(man), "--out", str(ckpt),
                         "--max-epochs", "1", "--seed", "0", *TINY)
        assert code == 0
        assert load_model(str(ckpt)).config.n_classes == 3
        code, out, _ = run(capsys, "eval", "--data", str(man), "--model", str(ckpt))
        assert code == 0
        assert json.loads(out)["auc"] is None


class TestGradcheckCommand:
    def test_scope_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--scope", "attention")
        assert code == 0
        assert "PASS" in out

    def test_corrupt_negative_control(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--scope", "model",
                           "--corrupt-grad", "head.w2")
        assert code == 1
        assert "head.w2" in out

    def test_corrupt_unknown_target(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--scope", "gtl",
                           "--corrupt-grad", "nonesuch")
        assert code == 2
        assert "nonesuch" in err


class TestAttend:
    def test_csv_contracts(self, corpus, checkpoint, tmp_path, capsys):
        out_dir = tmp_path / "maps"
        code, _, _ = run(capsys, "attend", "--data", str(corpus / "manifest.tsv"),
                         "--model", str(checkpoint), "--index", "1",
                         "--out", str(out_dir))
        assert code == 0
        names = sorted(os.listdir(out_dir))
        assert names == ["attend_block0_high.csv", "attend_block0_low.csv",
                         "attend_block1_high.csv", "attend_block1_low.csv"]

        manifest = (corpus / "manifest.tsv").read_text().splitlines()[1:]
        test_files = [ln.split("\t")[0] for ln in manifest if ln.endswith("test")]
        bag = read_bag(str(corpus / test_files[1]))
        k = 3  # k_keep baked into the shared checkpoint
        def tokens(n):
            return 1 + min(k, n) + (1 if k < n else 0)

        expected_rows = {
            "low": 1 + (tokens(bag.high.rows) - 1),
            "high": 1 + (tokens(bag.low.rows) - 1),
        }
        for name in names:
            lines = (out_dir / name).read_text().splitlines()
            assert lines[0] == "token_index,resolution,raw_weight,minmax_normalized_weight"
            direction = name.split("_")[2].split(".")[0]
            rows = [ln.split(",") for ln in lines[1:]]
            assert len(rows) == expected_rows[direction]
            own = rows[0][1]
            assert own == direction
            assert all(r[1] != direction for r in rows[1:])
            raw = np.array([float(r[2]) for r in rows])
            norm = np.array([float(r[3]) for r in rows])
            np.testing.assert_allclose(raw.sum(), 1.0, rtol=0, atol=1e-9)
            assert norm.min() == 0.0 and norm.max() == 1.0

    def test_requires_dual_branch_model(self, corpus, tmp_path, capsys):
        ckpt = tmp_path / "single.megm"
        code, _, _ = run(capsys, "train", "--data", str(corpus / "manifest.tsv"),
                         "--out", str(ckpt), "--max-epochs", "1", "--seed", "0",
                         "--arch", "egt", "--resolution", "high", *TINY)
        assert code == 0
        code, _, err = run(capsys, "attend", "--data", str(corpus / "manifest.tsv"),
                           "--model", str(ckpt), "--out", str(tmp_path / "m"))
        assert code == 2
        assert "dual-branch" in err


class TestProcessLevel:
    def test_module_invocation_exit_codes(self, tmp_path):
        env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
        ok = subprocess.run(
            [sys.executable, "-m", "megt.cli", "synth", "--task", "witness",
             "--bags", "3", "--out", str(tmp_path / "d"), "--d", "4"],
            capture_output=True, text=True, env=env,
        )
        assert ok.returncode == 0
        bad = subprocess.run(
            [sys.executable, "-m", "megt.cli", "synth", "--task", "witness",
             "--bags", "0", "--out", str(tmp_path / "e")],
            capture_output=True, text=True, env=env,
        )
        assert bad.returncode == 2
