"""Run the full two-stage experiment and print the comparison table.

Walks the whole pipeline at the pinned configuration used by the
acceptance suite: generate disjoint train/test scenes whose label mixes a
position term with a cross-frame velocity term, cache optical flow, train
the spatial-only and temporal-only stage-1 branches, fuse them with the
multitask head in stage 2, and evaluate all three on the held-out scene.
Takes about a minute; artifacts land in demo_out/training/.

Run: python demos/04_two_stage_training.py
"""

import time
from pathlib import Path

from tsnet.dataset import load_sequence, make_samples, precompute_flows
from tsnet.metrics import write_comparison_csv
from tsnet.model import BranchConfig, save_checkpoint
from tsnet.optflow import FlowParams
from tsnet.synth import SynthConfig, synth_generate
from tsnet.trainer import (
    TrainConfig, assemble_two_stream, evaluate_model, fine_tune, train_branch,
)

OUT = Path("demo_out/training")
SCENE = dict(width=24, height=12, band_width=8.0, max_amplitude=7.0,
             n_motion_components=3, freq_range=(0.05, 0.10),
             k1=0.5, k2=2.0, sample_rate_hz=10.0)
FLOW = FlowParams(levels=2, window_size=13, iterations=3, poly_n=5,
                  poly_sigma=1.2)
BRANCH = BranchConfig(blocks=((12, 3, 2, 1), (24, 3, 2, 1), (48, 3, 2, 1)))
INPUT_HW = (12, 24)


def build_samples(out, n_frames, seed, max_magnitude=None):
    synth_generate(SynthConfig(n_frames=n_frames, seed=seed, **SCENE), out)
    seq = load_sequence(out)
    precompute_flows(seq, FLOW, cache_dir=out / "flows")
    return make_samples(seq, out / "flows", max_magnitude=max_magnitude)


def main():
    started = time.monotonic()
    train = build_samples(OUT / "train", n_frames=2001, seed=11)
    test = build_samples(OUT / "test", n_frames=501, seed=12,
                         max_magnitude=train[0].flow_max_magnitude)
    print("samples: %d train / %d test (flow cached in %.0fs)"
          % (len(train), len(test), time.monotonic() - started))

    # Stage 1: each branch alone, with its temporary regression head.
    stage1 = dict(lr=1e-3, batch_size=16, epochs=60)
    spatial, _ = train_branch(train, BRANCH, INPUT_HW, 0.0, "spatial",
                              TrainConfig(shuffle_seed=1, **stage1),
                              init_seed=0)
    print("stage 1 spatial-only trained (%.0fs)" % (time.monotonic() - started))
    temporal, _ = train_branch(train, BRANCH, INPUT_HW, 0.0, "temporal",
                               TrainConfig(shuffle_seed=2, **stage1),
                               init_seed=1)
    print("stage 1 temporal-only trained (%.0fs)" % (time.monotonic() - started))

    # Stage 2: fuse the frozen branches, train the multitask head.
    save_checkpoint(spatial, OUT / "stage1_spatial.ckpt",
                    stage="stage1:spatial")
    save_checkpoint(temporal, OUT / "stage1_temporal.ckpt",
                    stage="stage1:temporal")
    fused = assemble_two_stream(OUT / "stage1_spatial.ckpt",
                                OUT / "stage1_temporal.ckpt",
                                mlp_hidden=(8,), dropout_p=0.5, init_seed=2)
    fused, _ = fine_tune(fused, train,
                         TrainConfig.stage2_defaults(lr=3e-4, batch_size=16,
                                                     epochs=18, mtl_lambda=4.0,
                                                     shuffle_seed=2))
    print("stage 2 fusion fine-tuned (%.0fs)" % (time.monotonic() - started))

    dt = 1.0 / SCENE["sample_rate_hz"]
    reports = [evaluate_model(name, model, test, dt)[0]
               for name, model in (("spatial_only", spatial),
                                   ("temporal_only", temporal),
                                   ("two_stream_mtl", fused))]
    print("\n%-16s %8s %10s  (truth whiteness %.3f)"
          % ("model", "rmse", "whiteness", reports[0].whiteness_true))
    for rep in reports:
        print("%-16s %8.3f %10.3f" % (rep.model, rep.rmse_deg,
                                      rep.whiteness_pred))
    sp, fu = reports[0], reports[2]
    print("two-stream gains over spatial-only: rmse %+.1f%%, "
          "whiteness %+.1f%%"
          % (100 * (1 - fu.rmse_deg / sp.rmse_deg),
             100 * (1 - fu.whiteness_pred / sp.whiteness_pred)))

    write_comparison_csv(OUT / "comparison.csv", reports)
    print("total %.0fs, comparison table at %s"
          % (time.monotonic() - started, OUT / "comparison.csv"))


if __name__ == "__main__":
    main()
