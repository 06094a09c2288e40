"""Two-stage training: loss contracts, determinism, freezing, memorization."""

import numpy as np
import pytest
from conftest import synth_samples

from tsnet.model import (BranchConfig, build_model, load_checkpoint,
                         read_checkpoint_raw, save_checkpoint, CheckpointError)
from tsnet.tensor import Tensor, backward
from tsnet.trainer import (NumericalError, StageReport, TrainConfig,
                           assemble_two_stream, evaluate_model, fine_tune,
                           mtl_loss, predict_series, run_experiment,
                           train_branch)

BRANCH = BranchConfig(blocks=((8, 3, 2, 1), (32, 3, 2, 1)))
HW = (8, 32)


@pytest.fixture(scope="module")
def samples(tmp_path_factory):
    return synth_samples(tmp_path_factory.mktemp("train_data"), n_frames=33)


def quick_cfg(**kw):
    base = dict(stage=1, lr=3e-3, batch_size=8, epochs=3, shuffle_seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_stage1_defaults(self):
        cfg = TrainConfig()
        assert cfg.stage == 1
        assert cfg.lr == 1e-4
        assert cfg.batch_size == 64
        assert cfg.epochs == 30
        assert cfg.mtl_lambda == 1.0
        assert cfg.freeze_branches is True

    def test_stage2_defaults(self):
        cfg = TrainConfig.stage2_defaults()
        assert cfg.stage == 2
        assert cfg.lr == 0.5e-4
        assert cfg.batch_size == 8
        assert cfg.epochs == 1

    @pytest.mark.parametrize("kw", [dict(stage=3), dict(lr=0.0),
                                    dict(batch_size=0), dict(epochs=0),
                                    dict(mtl_lambda=-0.1)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestMtlLoss:
    def test_hand_value(self):
        loss = mtl_loss(Tensor([1.0]), Tensor([1.0]),
                        Tensor([0.0]), Tensor([0.0]), 1.0)
        assert float(loss.data) == 2.0

    def test_lambda_zero_is_single_task(self):
        w = Tensor([2.0], requires_grad=True)
        y_aux = Tensor(w.data * 3.0, _parents=(w,),
                       _grad_fn=lambda g: (3.0 * g,))
        loss = mtl_loss(Tensor([1.0]), y_aux, Tensor([0.0]), Tensor([5.0]), 0.0)
        assert float(loss.data) == 1.0
        backward(loss)
        assert w.grad is None  # aux path not in the graph at all

    def test_lambda_scales_aux_term(self):
        loss = mtl_loss(Tensor([1.0]), Tensor([2.0]),
                        Tensor([0.0]), Tensor([0.0]), 0.5)
        assert float(loss.data) == 1.0 + 0.5 * 4.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError, match="lambda"):
            mtl_loss(Tensor([1.0]), Tensor([1.0]),
                     Tensor([0.0]), Tensor([0.0]), -1.0)


class TestTrainBranch:
    def test_loss_decreases(self, samples):
        _, rep = train_branch(samples, BRANCH, HW, 0.0, "spatial",
                              quick_cfg(epochs=5))
        assert rep.epoch_losses[-1] < rep.epoch_losses[0]
        assert rep.stage == 1
        assert rep.n_samples == 32

    def test_memorizes_32_samples(self, tmp_path):
        # Overfitting contract: 32 samples to train MSE < 1e-2 within 500
        # epochs. Labels are position-only (k2=0) so the target is fully
        # determined by the frame; a velocity term is invisible to a static
        # frame and sets an MSE floor no optimizer can cross. The narrow
        # canvas keeps the band coupled to the borders, which is what makes
        # position visible through global average pooling at all.
        mem = synth_samples(tmp_path / "mem", n_frames=33, width=16, height=8,
                            band_width=5.0, max_amplitude=4.0,
                            n_motion_components=2, k2=0.0)
        assert len(mem) == 32
        wide = BranchConfig(blocks=((16, 3, 2, 1), (64, 3, 2, 1)))
        model, rep = train_branch(mem, wide, (8, 16), 0.0, "spatial",
                                  quick_cfg(lr=1e-2, epochs=200))
        assert rep.epochs <= 500
        assert rep.final_loss < 1e-2

    def test_rerun_bit_identical(self, samples, tmp_path):
        cfg = quick_cfg(epochs=2)
        m1, r1 = train_branch(samples, BRANCH, HW, 0.2, "temporal", cfg)
        m2, r2 = train_branch(samples, BRANCH, HW, 0.2, "temporal", cfg)
        save_checkpoint(m1, tmp_path / "a.ckpt", stage="stage1:temporal")
        save_checkpoint(m2, tmp_path / "b.ckpt", stage="stage1:temporal")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert r1.epoch_losses == r2.epoch_losses

    def test_shuffle_seed_changes_run(self, samples):
        _, r1 = train_branch(samples, BRANCH, HW, 0.0, "spatial", quick_cfg())
        _, r2 = train_branch(samples, BRANCH, HW, 0.0, "spatial",
                             quick_cfg(shuffle_seed=1))
        assert r1.epoch_losses != r2.epoch_losses

    def test_augmented_run_deterministic(self, samples):
        cfg = quick_cfg(epochs=2, augment=True)
        _, r1 = train_branch(samples, BRANCH, HW, 0.0, "spatial", cfg)
        _, r2 = train_branch(samples, BRANCH, HW, 0.0, "spatial", cfg)
        assert r1.epoch_losses == r2.epoch_losses

    def test_non_finite_loss_aborts(self, samples):
        bad = list(samples)
        bad[0] = type(bad[0])(index=bad[0].index, frame=bad[0].frame,
                              flow=bad[0].flow, flow_enc=bad[0].flow_enc,
                              target_main=float("nan"), target_aux=0.0,
                              flow_max_magnitude=bad[0].flow_max_magnitude)
        with pytest.raises(NumericalError, match="non-finite"):
            train_branch(bad, BRANCH, HW, 0.0, "spatial", quick_cfg(epochs=1))

    def test_stage2_config_rejected(self, samples):
        with pytest.raises(ValueError, match="stage-1"):
            train_branch(samples, BRANCH, HW, 0.0, "spatial",
                         TrainConfig.stage2_defaults())


@pytest.fixture(scope="module")
def stage1_ckpts(samples, tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpts")
    cfg = quick_cfg(epochs=3)
    s, _ = train_branch(samples, BRANCH, HW, 0.0, "spatial", cfg)
    t, _ = train_branch(samples, BRANCH, HW, 0.0, "temporal", cfg,
                        init_seed=1)
    save_checkpoint(s, d / "s.ckpt", stage="stage1:spatial")
    save_checkpoint(t, d / "t.ckpt", stage="stage1:temporal")
    return d / "s.ckpt", d / "t.ckpt"


class TestFineTune:
    def test_frozen_branches_stay_bit_identical(self, samples, stage1_ckpts):
        sp, tp = stage1_ckpts
        model = assemble_two_stream(sp, tp, mlp_hidden=(16,), dropout_p=0.0)
        cfg = TrainConfig.stage2_defaults(lr=1e-3, epochs=3)
        model, rep = fine_tune(model, samples, cfg)
        _, arrays_s = read_checkpoint_raw(sp)
        _, arrays_t = read_checkpoint_raw(tp)
        for i in range(2):
            for leaf in ("weight", "bias"):
                key = "conv%d.%s" % (i, leaf)
                assert np.array_equal(model.params["spatial." + key].data,
                                      arrays_s["branch." + key])
                assert np.array_equal(model.params["temporal." + key].data,
                                      arrays_t["branch." + key])
        assert rep.model == "two_stream_mtl"

    def test_unfrozen_branches_move(self, samples, stage1_ckpts):
        sp, tp = stage1_ckpts
        model = assemble_two_stream(sp, tp, mlp_hidden=(16,), dropout_p=0.0)
        cfg = TrainConfig.stage2_defaults(lr=1e-3, epochs=3,
                                          freeze_branches=False)
        model, _ = fine_tune(model, samples, cfg)
        _, arrays_s = read_checkpoint_raw(sp)
        assert not np.array_equal(model.params["spatial.conv0.weight"].data,
                                  arrays_s["branch.conv0.weight"])

    def test_loss_decreases(self, samples, stage1_ckpts):
        sp, tp = stage1_ckpts
        model = assemble_two_stream(sp, tp, mlp_hidden=(16,), dropout_p=0.0)
        cfg = TrainConfig.stage2_defaults(lr=1e-3, epochs=5)
        _, rep = fine_tune(model, samples, cfg)
        assert rep.epoch_losses[-1] < rep.epoch_losses[0]

    def test_aux_error_reaches_trunk(self, samples, stage1_ckpts):
        # Gradient-flow invariant: with zero main error, the aux term alone
        # must still produce gradients in the shared trunk.
        sp, tp = stage1_ckpts
        model = assemble_two_stream(sp, tp, mlp_hidden=(16,), dropout_p=0.0)
        frames = np.stack([s.frame for s in samples[:4]])
        flows = np.stack([s.flow_enc for s in samples[:4]])
        fx = Tensor(frames.transpose(0, 3, 1, 2) / 255.0)
        gx = Tensor(flows.transpose(0, 3, 1, 2) / 255.0)
        y_main, y_aux = model.forward(fx, gx, training=False)
        t_main = Tensor(y_main.data.copy())  # exact: main term contributes 0
        t_aux = Tensor(y_aux.data + 1.0)
        loss = mtl_loss(y_main, y_aux, t_main, t_aux, 1.0)
        for p in model.params.values():
            p.grad = None
        backward(loss)
        hidden = model.params["mlp.hidden0.weight"].grad
        out_main = model.params["mlp.out.weight"].grad
        assert hidden is not None and np.abs(hidden).max() > 0
        assert np.abs(out_main[1]).max() > 0
        assert np.abs(out_main[0]).max() == 0

    def test_mismatched_branch_configs_rejected(self, samples, tmp_path,
                                                stage1_ckpts):
        sp, _ = stage1_ckpts
        other = BranchConfig(blocks=((8, 3, 2, 1), (16, 3, 2, 1)))
        t, _ = train_branch(samples, other, HW, 0.0, "temporal",
                            quick_cfg(epochs=1))
        tp = tmp_path / "t16.ckpt"
        save_checkpoint(t, tp, stage="stage1:temporal")
        with pytest.raises(CheckpointError, match="config incompatibility"):
            assemble_two_stream(sp, tp)

    def test_swapped_streams_rejected(self, stage1_ckpts):
        sp, tp = stage1_ckpts
        with pytest.raises(CheckpointError, match="expected a stage-1 spatial"):
            assemble_two_stream(tp, sp)

    def test_stage1_config_rejected(self, samples, stage1_ckpts):
        sp, tp = stage1_ckpts
        model = assemble_two_stream(sp, tp)
        with pytest.raises(ValueError, match="stage-2"):
            fine_tune(model, samples, quick_cfg())


class TestEvaluation:
    def test_predict_series_chunking_bitwise(self, samples):
        model = build_model(
            __import__("tsnet.model", fromlist=["TwoStreamConfig"])
            .TwoStreamConfig(branch=BRANCH, mlp_hidden=(16,), dropout_p=0.0,
                             input_hw=HW), seed=0)
        a = predict_series(model, samples, chunk=64)
        b = predict_series(model, samples, chunk=3)
        assert np.array_equal(a, b)

    def test_evaluate_model_report(self, samples):
        cfg = quick_cfg(epochs=1)
        model, _ = train_branch(samples, BRANCH, HW, 0.0, "spatial", cfg)
        rep, preds = evaluate_model("spatial_only", model, samples, 0.1)
        assert rep.n_samples == len(samples)
        assert preds.shape == (len(samples),)
        assert rep.rmse_deg >= 0

    def test_run_experiment_rows(self, samples, tmp_path):
        s1 = quick_cfg(epochs=2)
        s2 = TrainConfig.stage2_defaults(lr=1e-3, epochs=2)
        reports, models, stage_reports = run_experiment(
            samples, samples, BRANCH, HW, dt=0.1, mlp_hidden=(16,),
            dropout_p=0.0, seed=0, stage1_cfg=s1, stage2_cfg=s2,
            workdir=tmp_path)
        assert [r.model for r in reports] == ["spatial_only", "temporal_only",
                                              "two_stream_mtl"]
        assert set(models) == {"spatial_only", "temporal_only", "two_stream_mtl"}
        assert (tmp_path / "stage1_spatial.ckpt").exists()
        assert stage_reports["two_stream_mtl"].final_loss >= 0

    def test_stage_report_json_excludes_wall_time(self):
        rep = StageReport(stage=1, model="spatial_only", n_samples=4, epochs=1,
                          epoch_losses=[0.5], config={}, wall_time_s=12.0)
        assert "wall_time_s" not in rep.to_dict()
        assert rep.to_dict()["final_loss"] == 0.5
