"""Two-stage training procedure.

Stage 1 trains each branch separately with a temporary linear head on the
single-task angle target. Stage 2 assembles the two-stream model from the two
stage-1 checkpoints, freezes the branches by default, and fine-tunes the
fusion MLP with the multitask loss mse(main) + lambda * mse(aux), where the
auxiliary target is the previous-step angle.

All randomness (shuffling, dropout masks, augmentation draws) derives from
TrainConfig.shuffle_seed through SeedSequence children, so identical configs
give bit-identical runs.
"""

from dataclasses import dataclass, field
from pathlib import Path
import tempfile
import time

import numpy as np

from .dataset import AugmentConfig, augment
from .metrics import evaluate
from .model import (SingleStreamModel, TwoStreamConfig, TwoStreamModel,
                    build_branch_model, build_model, load_branch_weights,
                    load_checkpoint, normalize_image, save_checkpoint,
                    CheckpointError)
from .tensor import Adam, Tensor, add, backward, mse, scale

__all__ = [
    "TrainConfig", "StageReport", "NumericalError", "mtl_loss",
    "train_branch", "fine_tune", "predict_series", "evaluate_model",
    "run_experiment",
]


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    mtl_lambda: float = 1.0
    shuffle_seed: int = 0
    freeze_branches: bool = True
    augment: bool = False
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2, got %r" % (self.stage,))
        if self.lr <= 0:
            raise ValueError("lr must be positive, got %r" % (self.lr,))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1, got %r" % (self.batch_size,))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1, got %r" % (self.epochs,))
        if self.mtl_lambda < 0:
            raise ValueError("mtl_lambda must be >= 0, got %r" % (self.mtl_lambda,))

    @classmethod
    def stage2_defaults(cls, **overrides):
        base = {"stage": 2, "lr": 0.5e-4, "batch_size": 8, "epochs": 1}
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return {"stage": self.stage, "lr": self.lr,
                "batch_size": self.batch_size, "epochs": self.epochs,
                "mtl_lambda": self.mtl_lambda,
                "shuffle_seed": self.shuffle_seed,
                "freeze_branches": self.freeze_branches,
                "augment": self.augment}


@dataclass
class StageReport:
    """Summary of one training stage.

    wall_time_s stays in memory for logging only; to_dict omits it so that
    serialized reports from identical runs are bit-identical.
    """

    stage: int
    model: str
    n_samples: int
    epochs: int
    epoch_losses: list
    config: dict
    wall_time_s: float = 0.0

    @property
    def final_loss(self):
        return self.epoch_losses[-1]

    def to_dict(self):
        return {"stage": self.stage, "model": self.model,
                "n_samples": self.n_samples, "epochs": self.epochs,
                "final_loss": self.final_loss,
                "epoch_losses": list(self.epoch_losses),
                "config": dict(self.config)}


def mtl_loss(y_main, y_aux, t_main, t_aux, lam):
    """Multitask objective: mse(main) + lam * mse(aux)."""
    if lam < 0:
        raise ValueError("mtl lambda must be >= 0, got %r" % (lam,))
    main = mse(y_main, t_main)
    if lam == 0.0:
        return main
    return add(main, scale(mse(y_aux, t_aux), lam))


def _child_seed(*entropy):
    return int(np.random.SeedSequence(tuple(int(e) for e in entropy))
               .generate_state(1)[0])


def _epoch_order(n, shuffle_seed, epoch):
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((int(shuffle_seed), 5, int(epoch)))))
    return rng.permutation(n)


def _augment_epoch(samples, cfg, epoch):
    seeds = np.random.SeedSequence(
        (int(cfg.shuffle_seed), 9, int(epoch))).generate_state(len(samples))
    return [augment(s, int(seed), cfg.augment_cfg)
            for s, seed in zip(samples, seeds)]


def _stack_inputs(samples, which):
    if which == "spatial":
        return np.stack([normalize_image(s.frame) for s in samples])
    if which == "temporal":
        return np.stack([normalize_image(s.flow_enc) for s in samples])
    raise ValueError("unknown input selector %r" % (which,))


def _targets(samples):
    t_main = np.array([s.target_main for s in samples], dtype=np.float64)
    t_aux = np.array([s.target_aux for s in samples], dtype=np.float64)
    return t_main, t_aux


def _check_finite(loss, stage, epoch, step):
    if not np.isfinite(loss.data):
        raise NumericalError("non-finite loss %r at stage %d epoch %d step %d; "
                             "reduce lr or check inputs"
                             % (float(loss.data), stage, epoch, step))


def train_branch(samples, branch, input_hw, dropout_p, stream, cfg,
                 init_seed=0, log=None):
    """Stage 1: one branch plus temporary head on the single-task target.

    stream selects the input: "spatial" trains on raw frames, "temporal" on
    flow encodings. Returns (model, StageReport).
    """
    if cfg.stage != 1:
        raise ValueError("train_branch expects a stage-1 config, got stage %d"
                         % cfg.stage)
    if not samples:
        raise ValueError("train_branch needs a non-empty sample list")
    model = build_branch_model(branch, input_hw, dropout_p, stream, seed=init_seed)
    opt = Adam([model.params[k] for k in sorted(model.params)], lr=cfg.lr)
    n = len(samples)
    started = time.monotonic()
    epoch_losses = []
    x_all = None
    if not cfg.augment:
        x_all = _stack_inputs(samples, stream)
        t_all, _ = _targets(samples)
    for epoch in range(cfg.epochs):
        if cfg.augment:
            epoch_samples = _augment_epoch(samples, cfg, epoch)
            x_all = _stack_inputs(epoch_samples, stream)
            t_all, _ = _targets(epoch_samples)
        order = _epoch_order(n, cfg.shuffle_seed, epoch)
        sq_sum = 0.0
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            y = model.forward(Tensor(x_all[idx]), training=True,
                              dropout_seed=_child_seed(cfg.shuffle_seed, 7, epoch, step))
            loss = mse(y, Tensor(t_all[idx]))
            _check_finite(loss, 1, epoch, step)
            opt.zero_grad()
            backward(loss)
            opt.step()
            sq_sum += float(loss.data) * idx.size
        epoch_losses.append(sq_sum / n)
        if log:
            log("stage1 %s epoch %d/%d loss %.6f"
                % (stream, epoch + 1, cfg.epochs, epoch_losses[-1]))
    report = StageReport(stage=1, model="%s_only" % stream, n_samples=n,
                         epochs=cfg.epochs, epoch_losses=epoch_losses,
                         config=cfg.to_dict(),
                         wall_time_s=time.monotonic() - started)
    return model, report


def assemble_two_stream(spatial_ckpt, temporal_ckpt, mlp_hidden=(64,),
                        dropout_p=0.2, init_seed=0):
    """Build a two-stream model from two stage-1 checkpoints.

    Branch configs and input sizes must agree; stream tags must be one
    spatial and one temporal checkpoint, in that order.
    """
    s = load_checkpoint(spatial_ckpt)
    t = load_checkpoint(temporal_ckpt)
    for m, want in ((s, "spatial"), (t, "temporal")):
        if not isinstance(m, SingleStreamModel) or m.stream != want:
            raise CheckpointError("config incompatibility: expected a stage-1 %s "
                                  "checkpoint, got %r" % (want, getattr(m, "stream", None)))
    if s.branch != t.branch or s.input_hw != t.input_hw:
        raise CheckpointError("config incompatibility: stage-1 branch configs "
                              "differ between %s and %s" % (spatial_ckpt, temporal_ckpt))
    cfg = TwoStreamConfig(branch=s.branch, mlp_hidden=mlp_hidden,
                          dropout_p=dropout_p, input_hw=s.input_hw)
    model = build_model(cfg, seed=init_seed)
    load_branch_weights(model, spatial_ckpt, "spatial")
    load_branch_weights(model, temporal_ckpt, "temporal")
    return model


def fine_tune(model, samples, cfg, log=None):
    """Stage 2: multitask fine-tuning of an assembled two-stream model.

    With cfg.freeze_branches the optimizer sees only mlp.* parameters, so
    branch tensors stay bit-identical. Returns (model, StageReport).
    """
    if cfg.stage != 2:
        raise ValueError("fine_tune expects a stage-2 config, got stage %d"
                         % cfg.stage)
    if not isinstance(model, TwoStreamModel):
        raise ValueError("fine_tune needs a TwoStreamModel")
    if not samples:
        raise ValueError("fine_tune needs a non-empty sample list")
    if cfg.freeze_branches:
        names = sorted(k for k in model.params if k.startswith("mlp."))
    else:
        names = sorted(model.params)
    opt = Adam([model.params[k] for k in names], lr=cfg.lr)
    n = len(samples)
    started = time.monotonic()
    epoch_losses = []
    frames = flows = t_main = t_aux = None
    if not cfg.augment:
        frames = _stack_inputs(samples, "spatial")
        flows = _stack_inputs(samples, "temporal")
        t_main, t_aux = _targets(samples)
    for epoch in range(cfg.epochs):
        if cfg.augment:
            epoch_samples = _augment_epoch(samples, cfg, epoch)
            frames = _stack_inputs(epoch_samples, "spatial")
            flows = _stack_inputs(epoch_samples, "temporal")
            t_main, t_aux = _targets(epoch_samples)
        order = _epoch_order(n, cfg.shuffle_seed, epoch)
        sq_sum = 0.0
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            y_main, y_aux = model.forward(
                Tensor(frames[idx]), Tensor(flows[idx]), training=True,
                dropout_seed=_child_seed(cfg.shuffle_seed, 7, epoch, step))
            loss = mtl_loss(y_main, y_aux, Tensor(t_main[idx]),
                            Tensor(t_aux[idx]), cfg.mtl_lambda)
            _check_finite(loss, 2, epoch, step)
            opt.zero_grad()
            backward(loss)
            opt.step()
            sq_sum += float(loss.data) * idx.size
        epoch_losses.append(sq_sum / n)
        if log:
            log("stage2 epoch %d/%d loss %.6f"
                % (epoch + 1, cfg.epochs, epoch_losses[-1]))
    report = StageReport(stage=2, model="two_stream_mtl", n_samples=n,
                         epochs=cfg.epochs, epoch_losses=epoch_losses,
                         config=cfg.to_dict(),
                         wall_time_s=time.monotonic() - started)
    return model, report


def predict_series(model, samples, chunk=64):
    """Eval-mode predictions over a sample list; chunking cannot change bits."""
    preds = np.empty(len(samples), dtype=np.float64)
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        if isinstance(model, TwoStreamModel):
            y, _ = model.forward(Tensor(_stack_inputs(part, "spatial")),
                                 Tensor(_stack_inputs(part, "temporal")),
                                 training=False)
        else:
            y = model.forward(Tensor(_stack_inputs(part, model.stream)),
                              training=False)
        preds[lo:lo + len(part)] = y.data
    return preds


def evaluate_model(name, model, samples, dt):
    preds = predict_series(model, samples)
    trues = np.array([s.target_main for s in samples], dtype=np.float64)
    return evaluate(name, preds, trues, dt), preds


def run_experiment(train_samples, test_samples, branch, input_hw, dt,
                   mlp_hidden=(64,), dropout_p=0.2, seed=0,
                   stage1_cfg=None, stage2_cfg=None, workdir=None, log=None):
    """Train all three rows of the comparison table and evaluate each.

    Rows: spatial_only and temporal_only (stage-1 branches with their
    temporary heads) and two_stream_mtl (stage-2 fine-tuned fusion). Returns
    (reports, models, stage_reports) with reports ordered as above. When
    workdir is given the stage-1 checkpoints are written there and stage 2
    loads them back through the persistence path.
    """
    stage1_cfg = stage1_cfg or TrainConfig()
    stage2_cfg = stage2_cfg or TrainConfig.stage2_defaults()
    models, stage_reports = {}, {}

    spatial, rep_s = train_branch(train_samples, branch, input_hw, dropout_p,
                                  "spatial", stage1_cfg, init_seed=seed, log=log)
    temporal, rep_t = train_branch(train_samples, branch, input_hw, dropout_p,
                                   "temporal", stage1_cfg,
                                   init_seed=seed + 1, log=log)
    stage_reports["spatial_only"] = rep_s
    stage_reports["temporal_only"] = rep_t

    if workdir is not None:
        workdir = Path(workdir)
        sp = workdir / "stage1_spatial.ckpt"
        tp = workdir / "stage1_temporal.ckpt"
        save_checkpoint(spatial, sp, stage="stage1:spatial")
        save_checkpoint(temporal, tp, stage="stage1:temporal")
        fused = assemble_two_stream(sp, tp, mlp_hidden=mlp_hidden,
                                    dropout_p=dropout_p, init_seed=seed + 2)
    else:
        with tempfile.TemporaryDirectory() as td:
            sp = Path(td) / "s.ckpt"
            tp = Path(td) / "t.ckpt"
            save_checkpoint(spatial, sp, stage="stage1:spatial")
            save_checkpoint(temporal, tp, stage="stage1:temporal")
            fused = assemble_two_stream(sp, tp, mlp_hidden=mlp_hidden,
                                        dropout_p=dropout_p, init_seed=seed + 2)
    fused, rep_f = fine_tune(fused, train_samples, stage2_cfg, log=log)
    stage_reports["two_stream_mtl"] = rep_f

    models["spatial_only"] = spatial
    models["temporal_only"] = temporal
    models["two_stream_mtl"] = fused

    reports = []
    for name in ("spatial_only", "temporal_only", "two_stream_mtl"):
        rep, _ = evaluate_model(name, models[name], test_samples, dt)
        reports.append(rep)
    return reports, models, stage_reports
