"""Optimizer oracles, EMA, clipping, loop determinism, checkpoint resume."""

import numpy as np
import pytest

from dualdit import data as D
from dualdit import trainer as TR
from dualdit.errors import NumericError
from dualdit.model import DualLevelModel, toy_config
from dualdit.tensor import Tensor


def tiny_setup(total_steps=8, align=0.0, seed=0, **train_kw):
    spec = D.ToyDatasetSpec(kind="solid_color", num_classes=2, resolution=(4, 4),
                            samples_per_class=16, noise_std=0.05, seed=seed)
    dataset = D.make_dataset(spec)
    cfg = TR.TrainConfig(lr=1e-3, batch_size=8, total_steps=total_steps,
                         align_weight=align, seed=seed, **train_kw)
    model = DualLevelModel(
        toy_config(resolution=(4, 4), num_classes=2, patch_dim=16, pixel_dim=4,
                   patch_depth=1, pixel_depth=1), seed=seed)
    return model, dataset, cfg


class TestAdamW:
    def params_of(self, value):
        return {"p": Tensor(np.array([value], dtype=np.float64), requires_grad=True)}

    def test_zero_grads_zero_decay_params_unchanged(self):
        params = self.params_of(1.5)
        m = {"p": np.zeros(1)}
        v = {"p": np.zeros(1)}
        TR.adamw_step(params, {"p": np.zeros(1)}, m, v, 1, lr=0.1)
        np.testing.assert_array_equal(params["p"].data, [1.5])

    def test_scalar_first_step_closed_form(self):
        # bias-corrected first step with g=1: update = g / (|g| + eps)
        params = self.params_of(2.0)
        m = {"p": np.zeros(1)}
        v = {"p": np.zeros(1)}
        eps = 1e-8
        TR.adamw_step(params, {"p": np.ones(1)}, m, v, 1, lr=0.1, eps=eps)
        expected = 2.0 - 0.1 * (1.0 / (1.0 + eps))
        np.testing.assert_allclose(params["p"].data, [expected], rtol=1e-12)

    def test_decay_only_multiplicative_shrink(self):
        params = self.params_of(3.0)
        m = {"p": np.zeros(1)}
        v = {"p": np.zeros(1)}
        TR.adamw_step(params, {"p": np.zeros(1)}, m, v, 1, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(params["p"].data, [3.0 * (1 - 0.1 * 0.5)], rtol=1e-12)

    def test_moments_decay_with_zero_grads(self):
        params = self.params_of(1.0)
        m = {"p": np.ones(1)}
        v = {"p": np.ones(1)}
        TR.adamw_step(params, {"p": np.zeros(1)}, m, v, 5, lr=0.0)
        np.testing.assert_allclose(m["p"], [0.9])
        np.testing.assert_allclose(v["p"], [0.999])


class TestClipping:
    def test_identity_below_max(self):
        grads = {"a": np.array([0.3, 0.4])}
        norm = TR.clip_gradients(grads, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])

    def test_scales_to_max_norm(self):
        grads = {"a": np.array([6.0]), "b": np.array([8.0])}
        norm = TR.clip_gradients(grads, 1.0)
        assert norm == pytest.approx(10.0)
        assert TR.global_grad_norm(grads) == pytest.approx(1.0, abs=1e-9)

    def test_equals_flattened_concatenation_oracle(self):
        rng = np.random.default_rng(0)
        grads = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=7)}
        flat = np.concatenate([grads["a"].ravel(), grads["b"].ravel()])
        max_norm = 0.5
        expected = flat * (max_norm / np.linalg.norm(flat))
        TR.clip_gradients(grads, max_norm)
        np.testing.assert_allclose(
            np.concatenate([grads["a"].ravel(), grads["b"].ravel()]), expected, rtol=1e-12)


class TestEma:
    def test_fixed_point(self):
        params = {"p": Tensor(np.array([2.0]))}
        ema = {"p": np.array([2.0])}
        TR.ema_update(ema, params, 0.999)
        np.testing.assert_array_equal(ema["p"], [2.0])

    def test_geometric_convergence(self):
        params = {"p": Tensor(np.array([1.0]))}
        ema = {"p": np.array([0.0])}
        decay = 0.9999
        for _ in range(10):
            TR.ema_update(ema, params, decay)
        np.testing.assert_allclose(1.0 - ema["p"][0], decay**10, rtol=1e-9)

    def test_decay_zero_copies_params(self):
        params = {"p": Tensor(np.array([5.0]))}
        ema = {"p": np.array([0.0])}
        TR.ema_update(ema, params, 0.0)
        np.testing.assert_array_equal(ema["p"], [5.0])


class TestTrainLoop:
    def test_zero_steps_no_metrics(self):
        model, dataset, cfg = tiny_setup(total_steps=0)
        before = {k: t.data.copy() for k, t in model.params.items()}
        state = TR.train(model, dataset, cfg)
        assert state.metrics == []
        for k, t in model.params.items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_fixed_seed_identical_metric_streams(self):
        runs = []
        for _ in range(2):
            model, dataset, cfg = tiny_setup(total_steps=6)
            state = TR.train(model, dataset, cfg)
            runs.append(TR.metrics_to_csv(state.metrics))
        assert runs[0] == runs[1]

    def test_loss_decreases_on_tiny_task(self):
        model, dataset, cfg = tiny_setup(total_steps=60)
        state = TR.train(model, dataset, cfg)
        first = np.mean([m["loss"] for m in state.metrics[:10]])
        last = np.mean([m["loss"] for m in state.metrics[-10:]])
        assert last < first

    def test_grad_norm_never_exceeds_clip(self):
        model, dataset, cfg = tiny_setup(total_steps=12, clip_norm=0.05)
        state = TR.train(model, dataset, cfg)
        for m in state.metrics:
            post = min(m["grad_norm"], cfg.clip_norm)
            assert post <= cfg.clip_norm + 1e-6

    def test_lr_and_clip_switch(self):
        model, dataset, cfg = tiny_setup(total_steps=6, switch_step=3,
                                         lr_after_switch=1e-5, clip_after_switch=0.5)
        state = TR.train(model, dataset, cfg)
        assert [m["lr"] for m in state.metrics] == [1e-3] * 3 + [1e-5] * 3

    def test_alignment_term_logged(self):
        model, dataset, cfg = tiny_setup(total_steps=3, align=0.5)
        state = TR.train(model, dataset, cfg)
        for m in state.metrics:
            assert m["loss_repa"] >= 0.0
            assert m["loss"] == pytest.approx(m["loss_diff"] + 0.5 * m["loss_repa"], rel=1e-5)

    def test_abort_after_ten_bad_steps(self):
        model, dataset, cfg = tiny_setup(total_steps=30)
        model.params["pixel_head.w"].data[...] = np.nan
        with pytest.raises(NumericError, match="10 consecutive"):
            TR.train(model, dataset, cfg)


class TestCheckpointing:
    def test_save_load_save_byte_identical(self, tmp_path):
        model, dataset, cfg = tiny_setup(total_steps=4)
        state = TR.train(model, dataset, cfg)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        TR.save_checkpoint(p1, model, state)
        model2, _, cfg2 = tiny_setup(total_steps=4)
        state2 = TR.init_state(model2, cfg2)
        TR.restore_state(model2, state2, p1)
        TR.save_checkpoint(p2, model2, state2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_reproduces_metric_stream(self, tmp_path):
        # uninterrupted run
        model_a, dataset, cfg_a = tiny_setup(total_steps=10)
        full = TR.train(model_a, dataset, cfg_a)

        # interrupted at step 5, then resumed
        model_b, _, cfg_b = tiny_setup(total_steps=5)
        half = TR.train(model_b, dataset, cfg_b)
        ck = tmp_path / "mid.ckpt"
        TR.save_checkpoint(ck, model_b, half)

        model_c, _, cfg_c = tiny_setup(total_steps=10)
        state_c = TR.init_state(model_c, cfg_c)
        TR.restore_state(model_c, state_c, ck)
        resumed = TR.train(model_c, dataset, cfg_c, state=state_c)

        tail_full = TR.metrics_to_csv(full.metrics[5:])
        tail_resumed = TR.metrics_to_csv(resumed.metrics)
        assert tail_full == tail_resumed
        for k, t in model_a.params.items():
            np.testing.assert_array_equal(t.data, model_c.params[k].data)

    def test_resume_with_alignment_projector(self, tmp_path):
        # the projector's parameters are part of the optimizer state and must
        # survive the checkpoint round trip
        model_a, dataset, cfg_a = tiny_setup(total_steps=8, align=0.5)
        full = TR.train(model_a, dataset, cfg_a)
        assert any(k.startswith("repa.") for k in full.params)

        model_b, _, cfg_b = tiny_setup(total_steps=4, align=0.5)
        half = TR.train(model_b, dataset, cfg_b)
        ck = tmp_path / "align.ckpt"
        TR.save_checkpoint(ck, model_b, half)

        model_c, _, cfg_c = tiny_setup(total_steps=8, align=0.5)
        resumed = TR.train(model_c, dataset, cfg_c, resume_from=ck)
        assert TR.metrics_to_csv(full.metrics[4:]) == TR.metrics_to_csv(resumed.metrics)

    def test_load_model_uses_ema(self, tmp_path):
        model, dataset, cfg = tiny_setup(total_steps=5)
        state = TR.train(model, dataset, cfg)
        ck = tmp_path / "m.ckpt"
        TR.save_checkpoint(ck, model, state)
        ema_model = TR.load_model(ck, use_ema=True)
        np.testing.assert_allclose(
            ema_model.params["pixel_head.w"].data,
            state.ema["pixel_head.w"].astype(np.float32), rtol=1e-6)
        raw_model = TR.load_model(ck, use_ema=False)
        np.testing.assert_array_equal(
            raw_model.params["pixel_head.w"].data, model.params["pixel_head.w"].data)

    def test_metrics_csv_header(self, tmp_path):
        model, dataset, cfg = tiny_setup(total_steps=2)
        path = tmp_path / "metrics.csv"
        TR.train(model, dataset, cfg, metrics_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss,loss_diff,loss_repa,grad_norm,lr"
        assert len(lines) == 3
