import json

import pytest

from conftest import lastfm_path, needs_lastfm
from drcsd.cli import main
from helpers import planted_blocks, write_tsv


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "toy.tsv"
    write_tsv(planted_blocks(14, 18, 2, seed=0, p_in=0.5, p_out=0.05), path)
    return path


TRAIN_FLAGS = ["--d", "4", "--order-count", "2", "--batch-size", "64",
               "--max-epochs", "2", "--seed", "3"]


def run(argv):
    return main([str(a) for a in argv])


class TestPrepare:
    def test_writes_split_and_manifest(self, dataset, tmp_path):
        out = tmp_path / "split"
        assert run(["prepare", "--input", dataset, "--outdir", out,
                    "--noise-ratio", "0.1", "--seed", "1"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        total = sum(manifest["counts"].values()) - len(manifest["noise_pairs"])
        assert manifest["counts"]["validation"] == int(0.1 * total)
        assert manifest["counts"]["test"] == int(0.2 * total)
        assert len(manifest["noise_pairs"]) == int(
            0.1 * (manifest["counts"]["train"] - len(manifest["noise_pairs"])))
        assert (out / "config.txt").exists()

    def test_refuses_existing_without_force(self, dataset, tmp_path, capsys):
        out = tmp_path / "split"
        assert run(["prepare", "--input", dataset, "--outdir", out]) == 0
        assert run(["prepare", "--input", dataset, "--outdir", out]) == 1
        assert "--force" in capsys.readouterr().err

    def test_force_rerun_is_byte_identical(self, dataset, tmp_path):
        out = tmp_path / "split"
        run(["prepare", "--input", dataset, "--outdir", out, "--seed", "2"])
        first = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
        run(["prepare", "--input", dataset, "--outdir", out, "--seed", "2",
             "--force"])
        second = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
        assert first == second

    def test_missing_input_fails(self, tmp_path, capsys):
        assert run(["prepare", "--input", tmp_path / "absent.tsv",
                    "--outdir", tmp_path / "s"]) == 1
        assert "error" in capsys.readouterr().err

    @needs_lastfm
    def test_lastfm_split_counts(self, tmp_path):
        out = tmp_path / "split"
        assert run(["prepare", "--input", lastfm_path(), "--outdir", out,
                    "--seed", "1"]) == 0
        counts = json.loads((out / "manifest.json").read_text())["counts"]
        assert abs(counts["train"] - 64984) <= 2
        assert abs(counts["validation"] - 9283) <= 1
        assert abs(counts["test"] - 18567) <= 1
        assert sum(counts.values()) == 92834


class TestTrainEvaluate:
    def test_train_then_evaluate(self, dataset, tmp_path):
        split_dir = tmp_path / "split"
        run_dir = tmp_path / "run"
        assert run(["prepare", "--input", dataset, "--outdir", split_dir]) == 0
        assert run(["train", "--split-dir", split_dir, "--outdir", run_dir,
                    *TRAIN_FLAGS]) == 0
        assert (run_dir / "checkpoint.json").exists()
        assert (run_dir / "checkpoint.bin").exists()
        log = (run_dir / "training_log.csv").read_text().splitlines()
        assert log[0] == ("epoch,loss_total,loss_bpr,loss_ld,loss_reg,"
                          "val_recall@20,seconds")
        assert len(log) == 3
        assert (run_dir / "config.txt").exists()

        eval_dir = tmp_path / "eval"
        assert run(["evaluate", "--checkpoint", run_dir / "checkpoint",
                    "--split-dir", split_dir, "--outdir", eval_dir]) == 0
        payload = json.loads((eval_dir / "report_test.json").read_text())
        assert payload["k"] == 20  # the default cutoff
        csv = (eval_dir / "report_test.csv").read_text().splitlines()
        assert csv[0] == "dataset,mode,seed,k,recall,ndcg,precision"

    def test_evaluate_same_checkpoint_twice_identical(self, dataset, tmp_path):
        split_dir, run_dir = tmp_path / "split", tmp_path / "run"
        run(["prepare", "--input", dataset, "--outdir", split_dir])
        run(["train", "--split-dir", split_dir, "--outdir", run_dir, *TRAIN_FLAGS])
        outs = []
        for name in ("e1", "e2"):
            assert run(["evaluate", "--checkpoint", run_dir / "checkpoint",
                        "--split-dir", split_dir,
                        "--outdir", tmp_path / name]) == 0
            outs.append((tmp_path / name / "report_test.json").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_clear_error(self, dataset, tmp_path, capsys):
        split_dir = tmp_path / "split"
        run(["prepare", "--input", dataset, "--outdir", split_dir])
        assert run(["evaluate", "--checkpoint", tmp_path / "nope",
                    "--split-dir", split_dir,
                    "--outdir", tmp_path / "eval"]) == 1
        assert "error" in capsys.readouterr().err

    def test_dump_stack_writes_matrices(self, dataset, tmp_path):
        split_dir, run_dir = tmp_path / "split", tmp_path / "run"
        run(["prepare", "--input", dataset, "--outdir", split_dir])
        dump = tmp_path / "stack"
        assert run(["train", "--split-dir", split_dir, "--outdir", run_dir,
                    "--dump-stack", dump, *TRAIN_FLAGS]) == 0
        dumped = sorted(p.name for p in dump.iterdir())
        assert dumped == ["order_01.txt", "order_02.txt"]
        header = (dump / "order_01.txt").read_text().splitlines()[0]
        assert len(header.split()) == 2

    def test_config_file_with_flag_override(self, dataset, tmp_path):
        split_dir = tmp_path / "split"
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("d = 4\norder_count = 1\nbatch_size = 64\n"
                            "max_epochs = 1\nseed = 9\n")
        run(["prepare", "--input", dataset, "--outdir", split_dir])
        run_dir = tmp_path / "run"
        assert run(["train", "--split-dir", split_dir, "--outdir", run_dir,
                    "--config", cfg_file, "--max-epochs", "2"]) == 0
        resolved = (run_dir / "config.txt").read_text()
        assert "max_epochs = 2" in resolved  # flag wins over file
        assert "d = 4" in resolved


class TestAblateAndSweep:
    def test_ablate_rows(self, dataset, tmp_path):
        split_dir = tmp_path / "split"
        run(["prepare", "--input", dataset, "--outdir", split_dir])
        out = tmp_path / "ablate"
        assert run(["ablate", "--split-dir", split_dir, "--outdir", out,
                    *TRAIN_FLAGS]) == 0
        lines = (out / "ablate.csv").read_text().splitlines()
        assert lines[0] == "mode,seed,recall,ndcg,precision,status"
        modes = [line.split(",")[0] for line in lines[1:]]
        assert modes == ["full", "no_denoise", "no_decouple"]
        assert all(line.endswith("ok") for line in lines[1:])

    def test_sweep_noise_axis(self, dataset, tmp_path):
        out = tmp_path / "sweep"
        assert run(["sweep", "--input", dataset, "--outdir", out,
                    "--axis", "noise", "--values", "0,0.1",
                    "--seeds", "1,2", *TRAIN_FLAGS]) == 0
        lines = (out / "sweep_noise.csv").read_text().splitlines()
        assert lines[0] == "axis_value,seed,recall,ndcg,precision,status"
        assert len(lines) == 5
        values = [line.split(",")[0] for line in lines[1:]]
        assert values == ["0.0", "0.0", "0.1", "0.1"]

    def test_sweep_continues_after_failure(self, dataset, tmp_path, capsys):
        # a negative beta fails config validation inside that grid point;
        # the other point still runs and the command exits nonzero
        out = tmp_path / "sweep"
        code = run(["sweep", "--input", dataset, "--outdir", out,
                    "--axis", "beta", "--values", "0.3,-1", "--seeds", "1",
                    *TRAIN_FLAGS])
        assert code == 1
        lines = (out / "sweep_beta.csv").read_text().splitlines()
        assert len(lines) == 3
        by_value = {line.split(",")[0]: line for line in lines[1:]}
        assert by_value["0.3"].endswith("ok")
        assert "error" in by_value["-1.0"]

    def test_unknown_axis(self, dataset, tmp_path):
        with pytest.raises(SystemExit):
            run(["sweep", "--input", dataset, "--outdir", tmp_path / "s",
                 "--axis", "nope"])


class TestSweepWorkers:
    def test_parallel_workers_match_sequential(self, dataset, tmp_path):
        args = ["sweep", "--input", dataset, "--axis", "noise",
                "--values", "0,0.1", "--seeds", "1", *TRAIN_FLAGS]
        out_seq = tmp_path / "seq"
        out_par = tmp_path / "par"
        assert run([*args, "--outdir", out_seq, "--workers", "1"]) == 0
        assert run([*args, "--outdir", out_par, "--workers", "2"]) == 0
        seq = (out_seq / "sweep_noise.csv").read_text()
        par = (out_par / "sweep_noise.csv").read_text()
        assert seq == par


class TestMemoryBudget:
    def test_budget_failure_surfaces_cleanly(self, dataset, tmp_path, capsys):
        split_dir = tmp_path / "split"
        run(["prepare", "--input", dataset, "--outdir", split_dir])
        code = run(["train", "--split-dir", split_dir,
                    "--outdir", tmp_path / "run", "--memory-budget", "8",
                    *TRAIN_FLAGS])
        assert code == 1
        assert "budget" in capsys.readouterr().err


class TestDegenerateArm:
    def test_mf_mode_end_to_end(self, dataset, tmp_path):
        # matrix-factorization baseline arm: no propagation at all
        split_dir, run_dir = tmp_path / "split", tmp_path / "run"
        run(["prepare", "--input", dataset, "--outdir", split_dir])
        assert run(["train", "--split-dir", split_dir, "--outdir", run_dir,
                    "--mode", "mf", *TRAIN_FLAGS]) == 0
        assert run(["evaluate", "--checkpoint", run_dir / "checkpoint",
                    "--split-dir", split_dir,
                    "--outdir", tmp_path / "eval"]) == 0
        payload = json.loads((tmp_path / "eval" / "report_test.json").read_text())
        assert payload["mode"] == "mf"


class TestSweepDefaults:
    def test_axis_value_grids(self):
        from drcsd.cli import SWEEP_AXES
        assert SWEEP_AXES["noise"] == (0.0, 0.05, 0.10, 0.15, 0.20)
        assert SWEEP_AXES["beta"] == (0.3, 0.4, 0.5)
        assert SWEEP_AXES["layers"] == (2, 3)
