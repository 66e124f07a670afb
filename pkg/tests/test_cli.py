import json

import pytest

from qpi import autodiff as ad
from qpi.cli import main
from qpi.data_io import save_pairs_tsv
from qpi.config import tiny_config
from qpi.encoder import encoder_param_shapes
from qpi.heads import head_param_shapes
from qpi.synthetic import paraphrase_corpus, separable_pairs

TINY_INI = """
[model]
preset = tiny

[pipeline]
setup = {setup}
head = cnn

[train]
epochs = 2
batch = 8
lr = 0.001
seed = 5
"""


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    save_pairs_tsv(paraphrase_corpus(40, seed=0), d / "train.tsv")
    save_pairs_tsv(paraphrase_corpus(12, seed=1), d / "dev.tsv")
    save_pairs_tsv(paraphrase_corpus(10, seed=2), d / "test.tsv")
    return d


def ini(tmp_path, setup="ma", extra=""):
    path = tmp_path / f"{setup}.ini"
    path.write_text(TINY_INI.format(setup=setup) + extra)
    return str(path)


def run_train(tmp_path, data_dir, out, setup="ma"):
    return main(["train", "--config", ini(tmp_path, setup), "--data-dir", str(data_dir), "--out", str(out)])


class TestTrainCommand:
    def test_outputs_and_determinism(self, tmp_path, data_dir, capsys):
        assert run_train(tmp_path, data_dir, tmp_path / "o1") == 0
        assert run_train(tmp_path, data_dir, tmp_path / "o2") == 0
        h1 = (tmp_path / "o1" / "history.jsonl").read_text()
        assert h1 == (tmp_path / "o2" / "history.jsonl").read_text()
        records = [json.loads(line) for line in h1.splitlines()]
        assert [r["epoch"] for r in records] == [1, 2]
        summary = json.loads((tmp_path / "o1" / "summary.json").read_text())
        assert summary["seed"] == 5 and len(summary["epoch_wall_times"]) == 2
        assert (tmp_path / "o1" / "model.ckpt").is_file()
        assert "test accuracy" in capsys.readouterr().out

    def test_missing_split(self, tmp_path, data_dir):
        (data_dir / "dev.tsv").unlink()
        assert run_train(tmp_path, data_dir, tmp_path / "o") == 2

    def test_no_data_dir(self, tmp_path):
        assert main(["train", "--config", ini(tmp_path)]) == 1

    def test_bad_setup_names_field(self, tmp_path, data_dir, capsys):
        path = tmp_path / "bad.ini"
        path.write_text(TINY_INI.format(setup="triplet"))
        assert main(["train", "--config", str(path), "--data-dir", str(data_dir)]) == 1
        assert "setup" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, data_dir, capsys):
        assert main(["train", "--config", ini(tmp_path, extra="colour = red\n"), "--data-dir", str(data_dir)]) == 1
        assert "colour" in capsys.readouterr().err

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--setup", "bogus"])
        assert exc.value.code == 1


class TestOverfitRun:
    """32 separable pairs: the history reaches train accuracy 1.0 and eval then reports 1.0000."""

    @pytest.fixture
    def run_dir(self, tmp_path):
        d = tmp_path / "sep"
        d.mkdir()
        pairs = separable_pairs(32, seed=0)
        for name in ("train.tsv", "dev.tsv", "test.tsv"):
            save_pairs_tsv(pairs, d / name)
        cfg = tmp_path / "sep.ini"
        cfg.write_text(TINY_INI.format(setup="siamese").replace("epochs = 2", "epochs = 200")
                       + "stop_at_train_accuracy = 1.0\n")
        assert main(["train", "--config", str(cfg), "--data-dir", str(d), "--out", str(tmp_path / "o")]) == 0
        return d, tmp_path / "o"

    def test_history_and_eval(self, run_dir, capsys):
        data, out = run_dir
        records = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
        assert records[-1]["train_accuracy"] == 1.0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--data", str(data / "test.tsv"),
                     "--out", str(out)]) == 0
        assert "accuracy 1.0000" in capsys.readouterr().out

    def test_predict_same_and_empty(self, run_dir, capsys):
        _, out = run_dir
        ckpt = str(out / "model.ckpt")
        assert main(["predict", "--checkpoint", ckpt, "red blue ?", "red blue ?"]) == 0
        # an empty question is shorter than the widest filter
        assert main(["predict", "--checkpoint", ckpt, "", "red blue ?"]) == 2
        assert "filter" in capsys.readouterr().err


class TestEvalPredict:
    @pytest.fixture
    def ckpt(self, tmp_path, data_dir):
        assert run_train(tmp_path, data_dir, tmp_path / "o", setup="siamese") == 0
        return tmp_path / "o" / "model.ckpt"

    def test_eval(self, tmp_path, data_dir, ckpt, capsys):
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir / "test.tsv"),
                     "--out", str(tmp_path / "ev")]) == 0
        out = capsys.readouterr().out
        assert out.startswith("accuracy ") and "f1 " in out
        rows = (tmp_path / "ev" / "predictions.jsonl").read_text().splitlines()
        assert len(rows) == 10
        assert set(json.loads(rows[0])) == {"index", "label", "prediction", "p_duplicate"}

    def test_eval_empty_file(self, tmp_path, ckpt):
        (tmp_path / "empty.tsv").write_text("question1\tquestion2\tis_duplicate\n")
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "empty.tsv")]) == 1

    def test_eval_bad_checkpoint(self, tmp_path, data_dir):
        (tmp_path / "junk.ckpt").write_bytes(b"junk")
        assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--data", str(data_dir / "test.tsv")]) == 2

    def test_predict(self, ckpt, capsys):
        capsys.readouterr()
        assert main(["predict", "--checkpoint", str(ckpt), "how do i learn python ?", "how can i learn python ?"]) == 0
        label, prob = capsys.readouterr().out.strip().split("\t")
        assert label in ("0", "1") and 0.5 <= float(prob) <= 1.0

    def test_overlap(self, tmp_path, data_dir, ckpt, capsys):
        test = str(data_dir / "test.tsv")
        main(["eval", "--checkpoint", str(ckpt), "--data", test, "--out", str(tmp_path / "a")])
        main(["eval", "--checkpoint", str(ckpt), "--data", test, "--out", str(tmp_path / "b")])
        capsys.readouterr()
        assert main(["overlap", "--preds-a", str(tmp_path / "a" / "predictions.jsonl"),
                     "--preds-b", str(tmp_path / "b" / "predictions.jsonl")]) == 0
        out = capsys.readouterr().out
        # a system never fixes its own errors
        assert out.startswith("0.0000") or out.startswith("n/a")


class TestParams:
    def test_base_table(self, tmp_path, capsys):
        path = tmp_path / "p.ini"
        path.write_text("[model]\npreset = base\n")
        assert main(["params", "--config", str(path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        table = {int(l.split("\t")[0]): int(l.split("\t")[1]) for l in lines[2:]}
        assert sorted(table) == list(range(13))
        assert table[4] == 30_018_482 and table[12] == 110_558_642


SMALL_GRADCHECK_INI = "[model]\npreset = tiny\nlayers = 1\nd = 8\nheads = 2\nffn_dim = 16\n"


class TestGradcheck:
    """A one-layer, d=8 model keeps these fast; the full tiny check is in the acceptance suite."""

    @pytest.fixture
    def small(self, tmp_path):
        path = tmp_path / "g.ini"
        path.write_text(SMALL_GRADCHECK_INI)
        return str(path)

    def test_passes(self, small, capsys):
        assert main(["gradcheck", "--config", small, "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "## matched_aggregation" in out and "## siamese" in out
        assert "FAIL" not in out and "gradient check passed" in out
        for setup in ("ma", "siamese"):
            cfg = tiny_config(setup, "cnn", num_layers=1, embed_dim=8, num_heads=2, ffn_dim=16)
            for name in list(encoder_param_shapes(cfg.encoder)) + list(head_param_shapes(cfg)):
                assert f" {name}\n" in out, name

    def test_corrupted_backward_fails(self, small, capsys):
        assert main(["gradcheck", "--config", small, "--corrupt-backward", "gelu"]) == 3
        assert "FAIL" in capsys.readouterr().out
        assert not ad._GRAD_FAULTS

    def test_rejects_base_size(self):
        assert main(["gradcheck", "--preset", "base"]) == 1
