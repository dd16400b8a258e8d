import contextlib
import io
import os
import tempfile
import unittest

from errors import EXIT_MODEL_MISMATCH, EXIT_OK, EXIT_USAGE
from main import main

TINY_RUN = """\
grid_size=6
total_days=14
train_days=10
heldout_fraction=0.2
forecast_first_day=2
history_len=8
e_day=2
e_time=2
e_dow=2
e_weekend=2
e_loc=4
hidden=8
layers=1
heads=2
ffn_dim=16
expert_dim=16
num_experts=2
top_k=1
batch_size=8
prefetch=0
"""


def run_cli(*argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(list(argv))
    return code, out.getvalue()


class CliTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.cfg = self._path("tiny.cfg")
        with open(self.cfg, "w", encoding="utf-8") as f:
            f.write(TINY_RUN)
        self.data = self._path("city.csv")

    def tearDown(self):
        self.tmp.cleanup()

    def _path(self, name):
        return os.path.join(self.tmp.name, name)

    def _generate(self, path, seed="3"):
        return run_cli("generate", "--out", path, "--users", "3", "--grid", "6", "--days", "14", "--seed", seed)

    def _read(self, name):
        with open(self._path(name), "rb") as f:
            return f.read()

    def test_generate_is_deterministic(self):
        code, out = self._generate(self.data)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("users=3", out)
        self._generate(self._path("again.csv"))
        self.assertEqual(self._read("city.csv"), self._read("again.csv"))
        self.assertTrue(os.path.exists(self.data + ".meta"))

    def test_usage_errors_exit_64(self):
        with self.assertRaises(SystemExit) as ctx:
            main(["generate", "--out", self.data, "--users", "0"])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)
        with self.assertRaises(SystemExit) as ctx:
            main(["finetune", "--data", self.data, "--out", self._path("f")])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)
        self._generate(self.data)
        code, _ = run_cli("train-scratch", "--data", self.data, "--out", self._path("s"), "--set", "no_such_key=1")
        self.assertEqual(code, EXIT_USAGE)

    def test_missing_data_file_exits_2(self):
        code, _ = run_cli("evaluate", "--baseline", "hf", "--data", self._path("nope.csv"), "--report", self._path("r.csv"), "--config", self.cfg)
        self.assertEqual(code, 2)

    def test_hf_evaluation_writes_report(self):
        self._generate(self.data)
        report = self._path("hf.csv")
        code, out = run_cli("evaluate", "--baseline", "hf", "--data", self.data, "--report", report, "--config", self.cfg)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith("city=city windows="))
        self.assertTrue(os.path.exists(report))

    def test_report_summary_written_next_to_csv(self):
        self._generate(self.data)
        report = self._path("hf.csv")
        code, out = run_cli("evaluate", "--baseline", "hf", "--data", self.data, "--report", report, "--config", self.cfg)
        self.assertEqual(code, EXIT_OK)
        with open(report + ".summary", encoding="utf-8") as f:
            self.assertEqual(f.read(), out)

    def test_seed_runs_are_averaged(self):
        self._generate(self.data)
        out_dir = self._path("runs")
        code, out = run_cli("train-scratch", "--data", self.data, "--out", out_dir, "--config", self.cfg, "--epochs", "1", "--seeds", "1,2")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(out.count("phase=scratch epoch=1"), 2)
        for seed in (1, 2):
            self.assertTrue(os.path.exists(os.path.join(out_dir, f"seed_{seed}", "best.stmb")))
        report = self._path("m.csv")
        model = os.path.join(out_dir, "seed_{seed}", "best.stmb")
        code, out = run_cli("evaluate", "--model", model, "--seeds", "1,2", "--data", self.data, "--report", report, "--config", self.cfg)
        self.assertEqual(code, EXIT_OK)
        lines = out.strip().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[0].startswith("seed=1 city=city"))
        self.assertIn("mean-of-2-seeds", lines[-1])
        accuracies = [float(line.split("accuracy=")[1].split()[0]) for line in lines]
        self.assertAlmostEqual(accuracies[2], (accuracies[0] + accuracies[1]) / 2, places=5)
        self.assertTrue(os.path.exists(self._path("m.seed1.csv")))
        with open(report + ".summary", encoding="utf-8") as f:
            self.assertEqual(f.read().strip(), lines[-1])

    def test_seeds_need_model_placeholder(self):
        self._generate(self.data)
        code, _ = run_cli("evaluate", "--model", self._path("best.stmb"), "--seeds", "1,2", "--data", self.data, "--report", self._path("r.csv"))
        self.assertEqual(code, EXIT_USAGE)
        with self.assertRaises(SystemExit) as ctx:
            main(["evaluate", "--baseline", "hf", "--seeds", "1,1", "--data", self.data, "--report", self._path("r.csv")])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)

    def test_unwritable_generate_target_exits_2(self):
        code, _ = self._generate(self._path(os.path.join("no_such_dir", "city.csv")))
        self.assertEqual(code, 2)

    def test_train_then_evaluate_model(self):
        self._generate(self.data)
        out_dir = self._path("run")
        code, out = run_cli("train-scratch", "--data", self.data, "--out", out_dir, "--config", self.cfg, "--epochs", "1")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("phase=scratch epoch=1", out)
        best = os.path.join(out_dir, "best.stmb")
        code, _ = run_cli(
            "evaluate", "--model", best, "--data", self.data, "--report", self._path("m.csv"),
            "--predictions", self._path("p.csv"), "--config", self.cfg,
        )
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.exists(self._path("p.csv")))
        code, _ = run_cli(
            "evaluate", "--model", best, "--data", self.data, "--report", self._path("m2.csv"),
            "--config", self.cfg, "--set", "num_experts=4",
        )
        self.assertEqual(code, EXIT_MODEL_MISMATCH)

    def test_resume_needs_matching_phase(self):
        self._generate(self.data)
        out_dir = self._path("pre")
        run_cli("pretrain", "--data", self.data, "--out", out_dir, "--config", self.cfg, "--epochs", "0")
        code, _ = run_cli(
            "train-scratch", "--data", self.data, "--out", out_dir, "--config", self.cfg,
            "--resume", os.path.join(out_dir, "init.stmb"),
        )
        self.assertEqual(code, EXIT_USAGE)

    def test_gradcheck_passes(self):
        code, out = run_cli("gradcheck", "--seed", "3", "--quick")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("gradcheck passed=1", out)


if __name__ == "__main__":
    unittest.main()
