import hashlib

import numpy as np
import pytest

from manetsec import esom
from manetsec.cli import main

SCENARIO = """\
node_count = 16
area_width = 600
area_height = 400
range = 250
duration = 40
root = 0
seed = 21
generators = 6
destinations = 3
attack_start = 10
attack_end = 40
droppers = 3,7
eavesdroppers = 5
som_rows = 8
som_cols = 10
som_epochs = 6
coverage_window = 10
global_rekey_at = 25
"""


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scenario.cfg"
    path.write_text(SCENARIO)
    return path


def file_hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(path, n_per, sep, seed):
    rng = np.random.default_rng(seed)
    data = np.vstack([rng.normal(0, 1, (n_per, 7)), rng.normal(sep, 1, (n_per, 7))])
    labels = np.array([0] * n_per + [1] * n_per)
    order = rng.permutation(len(data))
    esom.write_dataset_csv(path, data[order], labels[order])


class TestSimulate:
    def test_writes_outputs_and_exit_zero(self, scenario_file, tmp_path):
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(scenario_file), "--out", str(out)]) == 0
        assert (out / "metrics.csv").exists()
        assert (out / "events.log").exists()

    def test_byte_identical_reruns(self, scenario_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--config", str(scenario_file), "--out", str(a)])
        main(["simulate", "--config", str(scenario_file), "--out", str(b)])
        assert file_hash(a / "metrics.csv") == file_hash(b / "metrics.csv")
        assert file_hash(a / "events.log") == file_hash(b / "events.log")

    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.cfg"),
                     "--out", str(tmp_path / "o")]) == 1

    def test_config_error_is_input_error(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("node_count = 1\nseed = 2\n")
        assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1

    def test_seed_required(self, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("node_count = 8\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_seed_flag_overrides(self, scenario_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--config", str(scenario_file), "--out", str(a)])
        main(["simulate", "--config", str(scenario_file), "--seed", "99",
              "--out", str(b)])
        assert file_hash(a / "metrics.csv") != file_hash(b / "metrics.csv")


class TestAttackSuite:
    def test_all_goals_pass(self, scenario_file, capsys):
        code = main(["attack-suite", "--config", str(scenario_file),
                     "--cycles", "8", "--replay-trials", "30"])
        out = capsys.readouterr().out
        assert code == 0
        assert out.count("PASS") == 4 and "FAIL" not in out

    def test_weakened_build_fails_with_exit_2(self, scenario_file, capsys):
        code = main(["attack-suite", "--config", str(scenario_file),
                     "--cycles", "3", "--replay-trials", "30",
                     "--weaken-nonce-check"])
        out = capsys.readouterr().out
        assert code == 2
        assert "replay resistance     FAIL" in out

    def test_verdicts_written(self, scenario_file, tmp_path):
        out = tmp_path / "suite"
        main(["attack-suite", "--config", str(scenario_file),
              "--cycles", "3", "--replay-trials", "10", "--out", str(out)])
        assert (out / "attack_suite.txt").exists()


class TestDetectorPipeline:
    def test_train_classify_evaluate(self, tmp_path, capsys):
        train_csv = tmp_path / "train.csv"
        test_csv = tmp_path / "test.csv"
        write_dataset(train_csv, 300, 4.0, 1)
        write_dataset(test_csv, 100, 4.0, 2)
        model = tmp_path / "model.bin"
        assert main(["train", "--data", str(train_csv), "--model", str(model),
                     "--seed", "5", "--rows", "10", "--cols", "12",
                     "--epochs", "8"]) == 0
        verdicts = tmp_path / "verdicts.csv"
        assert main(["classify", "--model", str(model), "--data", str(test_csv),
                     "--out", str(verdicts)]) == 0
        metrics = tmp_path / "metrics.csv"
        assert main(["evaluate", "--verdicts", str(verdicts), "--truth", str(test_csv),
                     "--out", str(metrics)]) == 0
        header, values = metrics.read_text().strip().split("\n")
        assert header == "detection_rate,false_alarm_rate,unclassified_fraction"
        det = float(values.split(",")[0])
        assert det >= 0.9

    def test_train_deterministic_models(self, tmp_path):
        train_csv = tmp_path / "train.csv"
        write_dataset(train_csv, 200, 3.0, 3)
        m1, m2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
        for m in (m1, m2):
            main(["train", "--data", str(train_csv), "--model", str(m),
                  "--seed", "7", "--rows", "8", "--cols", "10", "--epochs", "6"])
        assert file_hash(m1) == file_hash(m2)

    def test_train_requires_seed(self, tmp_path):
        train_csv = tmp_path / "train.csv"
        write_dataset(train_csv, 50, 2.0, 4)
        assert main(["train", "--data", str(train_csv),
                     "--model", str(tmp_path / "m.bin")]) == 1

    def test_train_on_empty_file(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        assert main(["train", "--data", str(empty), "--model", str(tmp_path / "m.bin"),
                     "--seed", "1"]) == 1

    def test_malformed_csv_reports_row(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("nav,tx_rate,rx_rate,rts_retx_rate,data_retx_rate,"
                       "active_neighbors,forwarding_nodes,label\n"
                       "1,2,3,4,5,6,7,nonsense\n")
        assert main(["train", "--data", str(bad), "--model", str(tmp_path / "m.bin"),
                     "--seed", "1"]) == 1
        assert "row 2" in capsys.readouterr().err

    def test_evaluate_perfect_verdicts(self, tmp_path, capsys):
        truth = tmp_path / "truth.csv"
        write_dataset(truth, 20, 2.0, 5)
        _, labels = esom.read_dataset_csv(truth)
        verdicts = tmp_path / "v.csv"
        results = [esom.Classification(
            esom.VERDICT_ATTACK if l else esom.VERDICT_NORMAL, 0, 0.0) for l in labels]
        esom.write_verdicts_csv(verdicts, results)
        assert main(["evaluate", "--verdicts", str(verdicts), "--truth", str(truth)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[1].startswith("1,0,")

    def test_evaluate_length_mismatch(self, tmp_path):
        truth = tmp_path / "truth.csv"
        write_dataset(truth, 10, 2.0, 6)
        verdicts = tmp_path / "v.csv"
        esom.write_verdicts_csv(verdicts, [esom.Classification("normal", 0, 0.0)])
        assert main(["evaluate", "--verdicts", str(verdicts), "--truth", str(truth)]) == 1
