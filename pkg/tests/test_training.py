import math
import os
import struct
import tempfile
import threading
import time
import unittest

import numpy as np
import pandas as pd

from autograd import ops
from autograd.tensor import Tensor, backward
from errors import ArchitectureMismatchError, CheckpointFormatError, ConfigError, EmptyLossError, NumericError
from mobility.windows import build_forecast_windows
from models.mobility import collate, pad_id
from network.model import ModelConfig, build_model
from services.batch_prefetch import BatchPrefetcher
from services.checkpoint_service import (
    Checkpoint,
    capture,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from services.optimizer import build_optimizer, clip_grad_norm, global_grad_norm
from services.trainer import (
    INIT_FILE,
    LOG_COLUMNS,
    LOG_FILE,
    ROUTING_FILE,
    TrainConfig,
    heldout_loss,
    loss_forecast,
    prepare_phase_data,
    pretrain,
    finetune,
    resume,
    train_scratch,
    train_step,
)

from fixtures import TINY_GRID, make_user, tiny_city, tiny_config


def _read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class OptimizerTests(unittest.TestCase):
    def _single(self, lr, weight_decay=0.0, warmup_steps=0):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = build_optimizer({"all": [("w", w)]}, {"all": lr}, weight_decay=weight_decay, warmup_steps=warmup_steps)
        backward(ops.sum(ops.mul(w, w)))
        return w, opt

    def test_first_step_matches_hand_computation(self):
        w, opt = self._single(0.1)
        opt.apply()
        # m_hat = 2, v_hat = 4: 1 - 0.1 * 2 / (2 + 1e-8)
        self.assertAlmostEqual(w.data[0], 0.9000000005, places=12)
        self.assertEqual(opt.step, 1)

    def test_weight_decay_is_decoupled(self):
        w, opt = self._single(0.1, weight_decay=0.01)
        opt.apply()
        expected = (1.0 - 0.1 * 0.01) - 0.1 * 2.0 / (2.0 + 1e-8)
        self.assertAlmostEqual(w.data[0], expected, places=12)

    def test_zero_learning_rate_is_identity(self):
        w, opt = self._single(0.0, weight_decay=0.5)
        opt.apply()
        self.assertEqual(w.data[0], 1.0)

    def test_linear_warmup(self):
        _, opt = self._single(0.1, warmup_steps=4)
        self.assertAlmostEqual(opt.scheduled_lr(0.1, 1), 0.025)
        self.assertAlmostEqual(opt.scheduled_lr(0.1, 10), 0.1)

    def test_parameter_in_two_groups_rejected(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with self.assertRaises(ConfigError):
            build_optimizer({"a": [("w", w)], "b": [("w", w)]}, {"a": 0.1, "b": 0.1}, weight_decay=0.0)
        with self.assertRaises(ConfigError):
            build_optimizer({"a": [("w", w)]}, {}, weight_decay=0.0)

    def test_clip_scales_to_max_norm(self):
        a = Tensor(np.zeros(1), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        a.grad[:] = 3.0
        b.grad[:] = 4.0
        self.assertAlmostEqual(clip_grad_norm([a, b], 1.0), 5.0)
        self.assertAlmostEqual(global_grad_norm([a, b]), 1.0)
        self.assertAlmostEqual(clip_grad_norm([a, b], 2.0), 1.0)
        self.assertAlmostEqual(a.grad[0], 0.6)

    def test_clip_rejects_non_finite_norm(self):
        a = Tensor(np.zeros(1), requires_grad=True)
        a.grad[:] = np.inf
        with self.assertRaises(NumericError):
            clip_grad_norm([a], 1.0)

    def test_finetune_location_rate_defaults_to_ten_times_base(self):
        lrs = TrainConfig.from_run_config(tiny_config(), "finetune").group_lrs()
        self.assertEqual(set(lrs), {"location", "base"})
        self.assertAlmostEqual(lrs["location"] / lrs["base"], 10.0)
        self.assertEqual(set(TrainConfig.from_run_config(tiny_config(), "scratch").group_lrs()), {"all"})


class StepTests(unittest.TestCase):
    def setUp(self):
        self.cfg = tiny_config(history_len=4, dropout=0.0, base_lr=0.01)
        user = make_user(0, [(0, 3, 5), (0, 4, 5), (1, 7, 9), (2, 10, 11), (2, 12, 11)])
        self.windows = build_forecast_windows(user, first_day=1, last_day=3, history_len=4, horizon=48)
        self.batch = collate(self.windows)

    def test_loss_forecast_uniform_logits(self):
        window = self.windows[1]
        loss = loss_forecast(Tensor(np.zeros((len(window), TINY_GRID * TINY_GRID))), window)
        self.assertAlmostEqual(loss.item(), math.log(TINY_GRID * TINY_GRID), places=12)
        window.loss_mask[:] = 0
        with self.assertRaises(EmptyLossError):
            loss_forecast(Tensor(np.zeros((len(window), TINY_GRID * TINY_GRID))), window)

    def test_repeated_steps_lower_the_loss_and_keep_pad_zero(self):
        model = build_model(ModelConfig.from_run_config(self.cfg), seed=0)
        tcfg = TrainConfig.from_run_config(self.cfg, "scratch")
        opt = build_optimizer(model.parameter_groups("scratch"), tcfg.group_lrs(), weight_decay=0.0)
        losses = [train_step(self.batch, model, opt, tcfg) for _ in range(25)]
        self.assertLess(losses[-1], losses[0])
        self.assertEqual(opt.step, 25)
        np.testing.assert_array_equal(model.embedding.location.data[pad_id(TINY_GRID)], 0.0)

    def test_heldout_loss_weights_positions(self):
        model = build_model(ModelConfig.from_run_config(self.cfg), seed=0)
        self.assertIsNone(heldout_loss(model, [], 4))
        whole = heldout_loss(model, self.windows, 8)
        split = heldout_loss(model, self.windows, 1)
        self.assertAlmostEqual(whole, split, places=10)


class CheckpointTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = ModelConfig.from_run_config(tiny_config())

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_load_save_is_byte_identical(self):
        model = build_model(self.config, seed=1)
        w = model.embedding.location
        opt = build_optimizer(model.parameter_groups("finetune"), {"location": 1e-3, "base": 1e-4}, weight_decay=1e-3)
        a = os.path.join(self.tmp.name, "a.stmb")
        b = os.path.join(self.tmp.name, "b.stmb")
        save_checkpoint(a, capture(model, phase="finetune", epoch=3, seed=7, optimizer=opt))
        loaded = load_checkpoint(a)
        save_checkpoint(b, loaded)
        self.assertEqual(_read_bytes(a), _read_bytes(b))
        self.assertEqual(loaded.epoch, 3)
        self.assertTrue(loaded.has_optimizer)
        restored = restore_model(loaded, self.config)
        np.testing.assert_array_equal(restored.embedding.location.data, w.data)

    def test_records_follow_metadata_directly(self):
        path = os.path.join(self.tmp.name, "layout.stmb")
        ckpt = Checkpoint(
            metadata={"phase": "scratch", "epoch": "1"},
            tensors={"b": np.array([1.5]), "a": np.arange(6, dtype=np.float64).reshape(2, 3)},
        )
        save_checkpoint(path, ckpt)
        data = _read_bytes(path)
        self.assertEqual(data[:4], b"STMB")
        self.assertEqual(struct.unpack("<I", data[4:8])[0], 1)
        meta_len = struct.unpack("<I", data[8:12])[0]
        self.assertEqual(data[12:12 + meta_len], b"epoch=1\nphase=scratch\n")
        pos = 12 + meta_len
        self.assertEqual(struct.unpack("<I", data[pos:pos + 4])[0], 1)
        self.assertEqual(data[pos + 4:pos + 5], b"a")
        self.assertEqual(struct.unpack("<3I", data[pos + 5:pos + 17]), (2, 2, 3))
        first = 4 + 1 + 4 + 8 + 6 * 8
        second = 4 + 1 + 4 + 4 + 8
        self.assertEqual(len(data), pos + first + second)
        loaded = load_checkpoint(path)
        self.assertEqual(list(loaded.tensors), ["a", "b"])
        np.testing.assert_array_equal(loaded.tensors["a"], ckpt.tensors["a"])

    def test_bad_magic_and_truncation(self):
        path = os.path.join(self.tmp.name, "bad.stmb")
        with open(path, "wb") as f:
            f.write(b"NOPE\x01\x00\x00\x00")
        with self.assertRaisesRegex(CheckpointFormatError, "magic"):
            load_checkpoint(path)
        good = os.path.join(self.tmp.name, "good.stmb")
        save_checkpoint(good, capture(build_model(self.config, 0), phase="scratch", epoch=0, seed=7))
        with open(path, "wb") as f:
            f.write(_read_bytes(good)[:-3])
        with self.assertRaisesRegex(CheckpointFormatError, "truncated"):
            load_checkpoint(path)

    def test_architecture_mismatch(self):
        ckpt = capture(build_model(self.config, 0), phase="pretrain", epoch=0, seed=7)
        other = ModelConfig.from_run_config(tiny_config(hidden=12, heads=2))
        with self.assertRaises(ArchitectureMismatchError) as ctx:
            restore_model(ckpt, other)
        self.assertIn("hidden", ctx.exception.differences)
        # Train-time knobs may differ.
        restore_model(ckpt, ModelConfig.from_run_config(tiny_config(dropout=0.0)))

    def test_missing_parameter_is_mismatch(self):
        ckpt = capture(build_model(self.config, 0), phase="pretrain", epoch=0, seed=7)
        del ckpt.tensors["moe.head.bias"]
        with self.assertRaises(ArchitectureMismatchError):
            restore_model(ckpt)


class TrainingRunTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.city = tiny_city(n_users=3)

    def tearDown(self):
        self.tmp.cleanup()

    def _dir(self, name):
        return os.path.join(self.tmp.name, name)

    def test_heldout_days_never_feed_training(self):
        data = prepare_phase_data(self.city, tiny_config(), "scratch")
        self.assertEqual(data.cutoff, 8)
        self.assertTrue(all(2 <= w.target_day < 8 for w in data.fit_examples))
        self.assertTrue(all(8 <= w.target_day < 10 for w in data.heldout_examples))
        for user in data.fit.users.values():
            self.assertLess(int(user.day.max()), 8)

    def test_scratch_run_writes_checkpoints_and_logs(self):
        out = self._dir("scratch")
        result = train_scratch(self.city, tiny_config(epochs=2), out)
        self.assertEqual(result.epoch, 2)
        for name in (INIT_FILE, "epoch_001.stmb", "epoch_002.stmb", "best.stmb", LOG_FILE, ROUTING_FILE):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        log = pd.read_csv(os.path.join(out, LOG_FILE))
        self.assertEqual(list(log.columns), LOG_COLUMNS)
        self.assertEqual(log["epoch"].tolist(), [1, 2])
        routing = pd.read_csv(os.path.join(out, ROUTING_FILE))
        self.assertEqual(len(routing), 2 * 2)
        steps = log["step"].tolist()
        self.assertEqual(routing.groupby("epoch")["top1_count"].sum().gt(0).tolist(), [True, True])
        self.assertGreater(steps[1], steps[0])

    def test_zero_epochs_writes_init_only(self):
        out = self._dir("zero")
        result = pretrain(self.city, tiny_config(epochs=0), out)
        self.assertEqual(result.epoch, 0)
        self.assertFalse(os.path.exists(os.path.join(out, "epoch_001.stmb")))
        self.assertEqual(_read_bytes(os.path.join(out, "best.stmb")), _read_bytes(os.path.join(out, INIT_FILE)))
        self.assertEqual(len(pd.read_csv(os.path.join(out, LOG_FILE))), 0)

    def test_finetune_without_epochs_keeps_pretrained_weights(self):
        pre = pretrain(self.city, tiny_config(epochs=1), self._dir("pre"))
        fine = finetune(load_checkpoint(os.path.join(self._dir("pre"), "best.stmb")), self.city, tiny_config(epochs=0), self._dir("fine"))
        self.assertEqual(fine.phase, "finetune")
        for name, array in pre.parameters().items():
            np.testing.assert_array_equal(fine.tensors[name], array)

    def test_finetune_run_uses_two_rate_groups(self):
        pre = pretrain(self.city, tiny_config(epochs=0), self._dir("pre"))
        fine = finetune(pre, self.city, tiny_config(epochs=1), self._dir("fine"))
        self.assertEqual(set(fine.metadata["opt.groups"].split(",")), {"location", "base"})
        ratio = float(fine.metadata["opt.lr.location"]) / float(fine.metadata["opt.lr.base"])
        self.assertAlmostEqual(ratio, 10.0)
        moments = {name[len("opt.m."):] for name in fine.tensors if name.startswith("opt.m.")}
        self.assertEqual(moments, set(fine.parameters()))
        log = pd.read_csv(os.path.join(self._dir("fine"), LOG_FILE))
        np.testing.assert_allclose(log["lr_loc"], 10.0 * log["lr_base"])
        train_scratch(self.city, tiny_config(epochs=0), self._dir("scratch"))
        scratch_log = pd.read_csv(os.path.join(self._dir("scratch"), LOG_FILE))
        self.assertEqual(list(log.columns), list(scratch_log.columns))

    def test_first_pretrain_epoch_beats_uniform_guess(self):
        pretrain(self.city, tiny_config(epochs=1, base_lr=5e-3, dropout=0.0), self._dir("pre"))
        log = pd.read_csv(os.path.join(self._dir("pre"), LOG_FILE))
        self.assertEqual(log["phase"].tolist(), ["pretrain"])
        self.assertLess(float(log["loss"].iloc[0]), math.log(TINY_GRID * TINY_GRID))

    def test_finetune_can_reset_location_table(self):
        pre = pretrain(self.city, tiny_config(epochs=0), self._dir("pre"))
        fine = finetune(pre, self.city, tiny_config(epochs=0, reset_loc_emb=True), self._dir("fine"))
        self.assertFalse(np.array_equal(fine.tensors["embedding.location"], pre.tensors["embedding.location"]))
        np.testing.assert_array_equal(fine.tensors["embedding.location"][pad_id(TINY_GRID)], 0.0)
        np.testing.assert_array_equal(fine.tensors["moe.head.weight"], pre.tensors["moe.head.weight"])

    def test_resume_is_bit_exact(self):
        straight = self._dir("straight")
        train_scratch(self.city, tiny_config(epochs=2), straight)
        split = self._dir("split")
        train_scratch(self.city, tiny_config(epochs=1), split)
        resume(load_checkpoint(os.path.join(split, "epoch_001.stmb")), self.city, tiny_config(epochs=2), split)
        for name in ("epoch_002.stmb", LOG_FILE, ROUTING_FILE):
            self.assertEqual(_read_bytes(os.path.join(straight, name)), _read_bytes(os.path.join(split, name)), name)

    def test_resume_needs_optimizer_state(self):
        ckpt = capture(build_model(ModelConfig.from_run_config(tiny_config()), 0), phase="scratch", epoch=0, seed=7)
        with self.assertRaises(CheckpointFormatError):
            resume(ckpt, self.city, tiny_config(), self._dir("r"))
        finished = Checkpoint(metadata={**ckpt.metadata, "epoch": "5"}, tensors=dict(ckpt.tensors, **{"opt.m.x": np.zeros(1)}))
        self.assertIs(resume(finished, self.city, tiny_config(epochs=2), self._dir("r")), finished)


class PrefetchTests(unittest.TestCase):
    def test_results_come_back_in_order(self):
        seen = []
        lock = threading.Lock()

        def build(i):
            time.sleep(0.01 * (5 - i))
            with lock:
                seen.append(i)
            return i * i

        out = list(BatchPrefetcher(max_ahead=3, max_workers=3).map(build, range(5)))
        self.assertEqual(out, [0, 1, 4, 9, 16])
        self.assertEqual(sorted(seen), list(range(5)))

    def test_inline_mode(self):
        self.assertEqual(list(BatchPrefetcher(max_ahead=0).map(str, [1, 2])), ["1", "2"])


if __name__ == "__main__":
    unittest.main()
