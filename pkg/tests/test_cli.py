import hashlib
import json
import os

import numpy as np
import pytest

from softbeam.cli import main, read_tokens
from softbeam.data import gen_longrange, load_tsv, write_tsv
from softbeam.hard_beam import beam_search
from softbeam.model import load_checkpoint, save_checkpoint, vocab_hash

TASK = {"generator": "longrange", "params": {"n": 60, "T_range": [4, 6], "n_inputs": 12, "n_labels": 10}}
MODEL = {"hidden": 8, "label_dim": 4, "input_dim": 6}


def write_config(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def ce_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("ce")
    cfg = write_config(root / "cfg.json", {"task": TASK, "model": MODEL,
                                           "train": {"epochs": 2, "lr": 0.01, "batch_size": 4}})
    assert main(["train", "--config", cfg, "--out", str(root / "run")]) == 0
    return root


@pytest.fixture(scope="module")
def dev_tsv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "dev.tsv"
    corpus = gen_longrange(n=15, T_range=(4, 6), n_inputs=12, n_labels=10, seed=9)
    write_tsv(path, corpus.sentences)
    return path


class TestTrain:
    def test_writes_artifacts(self, ce_run):
        run = ce_run / "run"
        for name in ("checkpoint.json", "metrics.csv", "timings.csv", "manifest.json"):
            assert (run / name).exists()
        man = json.loads((run / "manifest.json").read_text())
        assert {"config_hash", "seed", "version"} <= set(man)
        header = (run / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,alpha,objective,dev_greedy_accuracy")

    def test_rerun_identical_metrics(self, ce_run, tmp_path):
        cfg = str(ce_run / "cfg.json")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
        assert digest(tmp_path / "again" / "metrics.csv") == digest(ce_run / "run" / "metrics.csv")
        assert digest(tmp_path / "again" / "checkpoint.json") == digest(ce_run / "run" / "checkpoint.json")

    def test_soft_without_warm_start_runs_ce_first(self, tmp_path):
        cfg = write_config(tmp_path / "soft.json", {
            "task": TASK, "model": MODEL,
            "train": {"objective": "soft_direct", "epochs": 1, "lr": 0.001, "batch_size": 4,
                      "alpha": {"kind": "geometric", "alpha0": 1.0, "ratio": 2.0, "alpha_max": 8.0}},
            "ce": {"epochs": 1, "lr": 0.01, "batch_size": 4},
        })
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        man = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert [s["objective"] for s in man["stages"]] == ["ce", "soft_direct"]
        assert man["warm_start"].endswith("ce/checkpoint.json")

    def test_config_error_names_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", {"task": TASK, "train": {"epochs": 2, "learning_rate": 1}})
        assert main(["train", "--config", cfg]) != 0
        err = capsys.readouterr().err.strip()
        assert err.startswith("error[config]:") and "config.train.learning_rate" in err
        assert "\n" not in err

    def test_config_type_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", {"train": {"epochs": "many"}})
        assert main(["train", "--config", cfg]) == 2
        assert "config.train.epochs" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "none.json")]) != 0
        assert capsys.readouterr().err.startswith("error[config]")


class TestDecode:
    def test_greedy_equals_k1_beam(self, ce_run, dev_tsv, tmp_path):
        ckpt = str(ce_run / "run" / "checkpoint.json")
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        assert main(["decode", "--checkpoint", ckpt, "--input", str(dev_tsv), "--decoder", "greedy",
                     "--out", str(a)]) == 0
        assert main(["decode", "--checkpoint", ckpt, "--input", str(dev_tsv), "--decoder", "hard_beam",
                     "--k", "1", "--out", str(b)]) == 0
        assert a.read_text() == b.read_text()
        assert len(a.read_text().splitlines()) == len(dev_tsv.read_text().splitlines())

    def test_soft_matches_hard_at_large_alpha(self, ce_run, dev_tsv, tmp_path):
        # sharpen the output layer so the scores are well separated
        model = load_checkpoint(ce_run / "run" / "checkpoint.json")
        for name in ("out_Wh", "out_Wc", "out_b"):
            model[name].data *= 30.0
        ckpt = str(tmp_path / "sharp.json")
        save_checkpoint(model, ckpt)
        a, b = tmp_path / "soft.tsv", tmp_path / "hard.tsv"
        assert main(["decode", "--checkpoint", ckpt, "--input", str(dev_tsv), "--decoder", "soft_beam",
                     "--alpha", "1e4", "--out", str(a)]) == 0
        assert main(["decode", "--checkpoint", ckpt, "--input", str(dev_tsv), "--decoder", "hard_beam",
                     "--out", str(b)]) == 0
        soft, hard = load_tsv(a).sentences, load_tsv(b).sentences
        vocab = {t: i for i, t in enumerate(model.input_vocab)}
        clear = 0
        for (tokens, _), s, h in zip(load_tsv(dev_tsv).sentences, soft, hard):
            trace = beam_search(np.array([vocab.get(t, 0) for t in tokens]), model, 3).trace
            if min(g[0] for g in trace.gaps) >= 0.05:  # no near-ties on this sentence
                clear += 1
                assert s == h
        assert clear >= 5

    def test_checkpoint_untouched(self, ce_run, dev_tsv, tmp_path):
        ckpt = ce_run / "run" / "checkpoint.json"
        before, mtime = digest(ckpt), os.stat(ckpt).st_mtime_ns
        main(["decode", "--checkpoint", str(ckpt), "--input", str(dev_tsv), "--out", str(tmp_path / "p.tsv")])
        assert digest(ckpt) == before and os.stat(ckpt).st_mtime_ns == mtime

    def test_vocab_mismatch(self, ce_run, tmp_path, capsys):
        ckpt = ce_run / "run" / "checkpoint.json"
        payload = json.loads(ckpt.read_text())
        payload["input_vocab"] = [t for t in payload["input_vocab"] if t != "<unk>"]
        payload["sizes"]["n_inputs"] -= 1
        payload["params"]["emb_in"]["shape"][0] -= 1
        dim = payload["params"]["emb_in"]["shape"][1]
        payload["params"]["emb_in"]["values"] = payload["params"]["emb_in"]["values"][dim:]
        payload["input_vocab_hash"] = vocab_hash(payload["input_vocab"])
        bad = tmp_path / "nounk.json"
        bad.write_text(json.dumps(payload))
        inp = tmp_path / "in.tsv"
        inp.write_text("never_seen\tL0\n", encoding="utf-8")
        assert main(["decode", "--checkpoint", str(bad), "--input", str(inp), "--out", str(tmp_path / "o")]) == 4
        assert capsys.readouterr().err.startswith("error[checkpoint]")

    def test_token_only_input(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("a\nb\n\nc\n", encoding="utf-8")
        assert read_tokens(path) == [["a", "b"], ["c"]]


class TestEval:
    def test_perfect_and_report(self, dev_tsv, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["eval", "--pred", str(dev_tsv), "--gold", str(dev_tsv), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["accuracy"] == 1.0 and report["macro_f1"] == 1.0
        assert "accuracy 1.0000" in capsys.readouterr().out

    def test_one_error(self, tmp_path):
        gold, pred = tmp_path / "g.tsv", tmp_path / "p.tsv"
        write_tsv(gold, [(["a", "b", "c", "d"], ["O", "PER", "LOC", "LOC"])])
        write_tsv(pred, [(["a", "b", "c", "d"], ["O", "PER", "O", "LOC"])])
        out = tmp_path / "r.json"
        assert main(["eval", "--pred", str(pred), "--gold", str(gold), "--out", str(out)]) == 0
        assert json.loads(out.read_text())["accuracy"] == 0.75

    def test_misaligned_reports_line(self, tmp_path, capsys):
        gold, pred = tmp_path / "g.tsv", tmp_path / "p.tsv"
        write_tsv(gold, [(["a", "b"], ["O", "O"]), (["c"], ["O"])])
        write_tsv(pred, [(["a", "x"], ["O", "O"]), (["c"], ["O"])])
        assert main(["eval", "--pred", str(pred), "--gold", str(gold)]) == 3
        err = capsys.readouterr().err
        assert err.startswith("error[input]: line 2")


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--alpha", "1.0"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3 and "FAIL" not in out

    def test_corrupted_rule_fails(self, monkeypatch, capsys):
        from softbeam import autodiff as ad

        real = ad.lstm_cell

        def broken(gates, c_prev):
            out = real(gates, c_prev)
            inner = out._backward

            def backward(g):
                dg, dc = inner(g)
                return 1.1 * dg, dc  # wrong by 10%

            out._backward = backward
            return out

        monkeypatch.setattr(ad, "lstm_cell", broken)
        assert main(["gradcheck", "--alpha", "1.0"]) == 6
        captured = capsys.readouterr()
        assert "FAIL" in captured.out
        assert captured.err.startswith("error[check]")


class TestExperiment:
    def test_single_cell_grid(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "exp.json", {
            "task": TASK, "model": MODEL, "objectives": ["ce"], "decoders": ["greedy"], "restarts": 1,
            "ce": {"epochs": 1, "lr": 0.01, "batch_size": 4},
        })
        assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "exp")]) == 0
        table = (tmp_path / "exp" / "table.csv").read_text().splitlines()
        assert len(table) == 2
        assert (tmp_path / "exp" / "ce" / "restart0" / "manifest.json").exists()

    def test_full_grid_structure(self, tmp_path):
        cfg = write_config(tmp_path / "exp.json", {
            "task": TASK, "model": MODEL, "restarts": 1,
            "ce": {"epochs": 1, "lr": 0.01, "batch_size": 4},
            "soft": {"epochs": 1, "lr": 0.001, "batch_size": 4},
        })
        assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "exp")]) == 0
        summary = json.loads((tmp_path / "exp" / "summary.json").read_text())
        assert len(summary["table"]) == 5
        assert {"greedy_dev", "hard_beam_dev", "soft_beam_dev"} <= set(summary["table"][0])
        assert summary["ce_decoder_gap"] is not None
        md = (tmp_path / "exp" / "table.md").read_text()
        assert md.count("\n| ") == 6
        # every soft cell started from the shared warm start
        for row in ("soft_direct_anneal", "soft_hinge_const"):
            man = json.loads((tmp_path / "exp" / row / "restart0" / "manifest.json").read_text())
            assert man["warm_start"] == summary["warm_start"]

    def test_unknown_objective(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "exp.json", {"objectives": ["mle"]})
        assert main(["experiment", "--config", cfg]) == 2
        assert "mle" in capsys.readouterr().err


class TestShippedConfigs:
    @pytest.mark.parametrize("name", ["longrange_grid.json", "skewed_grid.json"])
    def test_grid_configs_parse(self, name):
        from softbeam.experiment import ExperimentConfig

        path = os.path.join(os.path.dirname(__file__), os.pardir, "configs", name)
        cfg = ExperimentConfig.from_dict(json.load(open(path, encoding="utf-8")))
        assert cfg.restarts == 3 and cfg.soft.k == 3

    def test_train_config_parses(self):
        from softbeam.cli import TrainRunConfig

        path = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "longrange_train.json")
        cfg = TrainRunConfig.from_dict(json.load(open(path, encoding="utf-8")))
        assert cfg.train.objective == "soft_direct" and cfg.ce.objective == "ce"
