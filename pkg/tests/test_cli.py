import pytest

from microbnn import deserialize, validate
from microbnn.cli import main
from test_codegen import CC, needs_cc

TRAIN = ["train", "--arch", "mlp-1", "--data", "synth:120", "--epochs", "2",
         "--lr", "3e-3"]


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestExitCodes:
    def test_help_is_success(self, capsys):
        assert main(["--help"]) == 0

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["mem", "--arch", "mlp-1", "--bogus"]) == 2

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert main(["train", "--data", "synth"]) == 2

    def test_missing_model_file_is_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, ["eval", "--model",
                                    str(tmp_path / "nope.ebnn"),
                                    "--data", "synth"])
        assert code == 1
        assert "error:" in err

    def test_budget_reject_is_runtime_error(self, capsys, tmp_path):
        code, _, err = run(capsys, [*TRAIN, "--budget", "64",
                                    "--out", str(tmp_path / "m.ebnn")])
        assert code == 1
        assert "64" in err


class TestMem:
    def test_preset_records(self, capsys):
        code, out, _ = run(capsys, ["mem", "--arch", "convpool-2",
                                    "--format", "records",
                                    "--budget", "15360"])
        assert code == 0
        lines = dict(kv.split("=") for kv in out.split() if "=" in kv)
        assert lines["M"] == "13310"
        assert lines["fits"] == "true"

    def test_model_file_table(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, ["mem", "--model", str(model),
                                    "--budget", "15360"])
        assert code == 0
        assert "fits budget 15360" in out


class TestTrainEval:
    def test_train_writes_valid_model(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        code, out, _ = run(capsys, [*TRAIN, "--out", str(model)])
        assert code == 0
        assert "epoch 0:" in out and "wrote" in out
        assert validate(deserialize(model.read_bytes())) == []

    def test_same_seed_same_bytes(self, capsys, tmp_path):
        a, b = tmp_path / "a.ebnn", tmp_path / "b.ebnn"
        assert main([*TRAIN, "--seed", "3", "--out", str(a)]) == 0
        assert main([*TRAIN, "--seed", "3", "--out", str(b)]) == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()

    def test_checkpoint_flag_writes_sidecar(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--checkpoint", "--out", str(model)]) == 0
        capsys.readouterr()
        assert model.exists()
        assert model.with_suffix(".ebnn.latent").exists()

    def test_eval_records(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, ["eval", "--model", str(model),
                                    "--data", "synth",
                                    "--format", "records"])
        assert code == 0
        acc = [l for l in out.splitlines() if l.startswith("accuracy=")]
        assert len(acc) == 1
        assert 0.0 <= float(acc[0].split("=")[1]) <= 1.0


SCREEN = ["screen", "--family", "mlp-1", "--budget", "1500",
          "--data", "synth:120", "--epochs", "2", "--top-k", "2"]


class TestScreen:
    def test_table_and_best_model(self, capsys, tmp_path):
        best = tmp_path / "best.ebnn"
        code, out, _ = run(capsys, [*SCREEN, "--best-out", str(best)])
        assert code == 0
        assert "rank" in out and "mlp-1" in out
        assert validate(deserialize(best.read_bytes())) == []

    def test_table_deterministic(self, capsys):
        code_a, out_a, _ = run(capsys, SCREEN)
        code_b, out_b, _ = run(capsys, SCREEN)
        assert code_a == code_b == 0
        assert out_a == out_b

    def test_records_carry_measurements(self, capsys):
        # Records include host-measured time and energy, so they are the
        # one screen output not compared byte-for-byte across runs.
        code, out, _ = run(capsys, [*SCREEN, "--format", "records"])
        assert code == 0
        trained = [l for l in out.splitlines() if "accuracy=" in l]
        assert trained and all("eg=" in l and "eval_ms=" in l for l in trained)

    def test_jobs_flag_changes_nothing(self, capsys):
        _, out_serial, _ = run(capsys, SCREEN)
        _, out_parallel, _ = run(capsys, [*SCREEN, "--jobs", "3"])
        assert out_serial == out_parallel


class TestBench:
    def test_records_fields(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, ["bench", "--model", str(model),
                                    "--runs", "5", "--format", "records"])
        assert code == 0
        lines = dict(l.split("=") for l in out.splitlines())
        assert lines["runs"] == "5"
        assert float(lines["mean_ms"]) > 0.0

    def test_dataset_samples_real_input(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, ["bench", "--model", str(model),
                                    "--data", "synth:20", "--runs", "7"])
        assert code == 0
        assert "ms/sample" in out

    def test_dataset_samples_binary_input(self, capsys, tmp_path):
        # Thresholds each dataset sample at zero before packing.
        from microbnn.model import FusedFC, InputSpec, Network, serialize
        from test_model import _bits, _bn
        net = Network(InputSpec("binary", 1, 28, 28),
                      [FusedFC(10, 784, _bits(1, 10, 784), _bn(10))])
        model = tmp_path / "b.ebnn"
        model.write_bytes(serialize(net))
        code, out, _ = run(capsys, ["bench", "--model", str(model),
                                    "--data", "synth:20", "--runs", "7"])
        assert code == 0
        assert "ms/sample" in out


class TestCodegenCommand:
    def test_writes_pair(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, ["codegen", "--model", str(model),
                                    "--out-dir", str(tmp_path / "c"),
                                    "--prefix", "net"])
        assert code == 0
        assert (tmp_path / "c" / "net.h").exists()
        assert (tmp_path / "c" / "net.c").exists()

    def test_check_without_vectors_is_runtime_error(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        code, _, err = run(capsys, ["codegen", "--model", str(model),
                                    "--out-dir", str(tmp_path / "c"),
                                    "--check"])
        assert code == 1
        assert "--vectors" in err

    @needs_cc
    def test_check_compiles_and_passes(self, capsys, tmp_path):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        code, out, _ = run(capsys, ["codegen", "--model", str(model),
                                    "--out-dir", str(tmp_path / "c"),
                                    "--vectors", "4", "--check"])
        assert code == 0
        assert "self-test passed (4 vectors)" in out

    def test_check_fails_cleanly_without_compiler(self, capsys, tmp_path,
                                                  monkeypatch):
        model = tmp_path / "m.ebnn"
        assert main([*TRAIN, "--out", str(model)]) == 0
        capsys.readouterr()
        monkeypatch.setenv("MICROBNN_CC", "no-such-compiler-2b9d")
        code, _, err = run(capsys, ["codegen", "--model", str(model),
                                    "--out-dir", str(tmp_path / "c"),
                                    "--vectors", "2", "--check"])
        assert code == 1
        assert "compiler" in err
