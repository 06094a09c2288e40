"""Shared helpers: small synthetic datasets with precomputed flow caches."""

from tsnet.dataset import load_sequence, make_samples, precompute_flows
from tsnet.optflow import FlowParams
from tsnet.synth import SynthConfig, synth_generate

# Single pyramid level and a small window keep flow estimation fast on the
# tiny desk-scale canvases the tests use.
FAST_FLOW = FlowParams(pyramid_scale=0.5, levels=1, window_size=7,
                       iterations=2, poly_n=5, poly_sigma=1.2)


def synth_dataset(root, n_frames=33, seed=3, width=32, height=8, **overrides):
    cfg_kw = dict(width=width, height=height, n_frames=n_frames, seed=seed,
                  band_width=6.0, max_amplitude=4.0, n_motion_components=2)
    cfg_kw.update(overrides)
    cfg = SynthConfig(**cfg_kw)
    synth_generate(cfg, root)
    seq = load_sequence(root)
    precompute_flows(seq, params=FAST_FLOW)
    return seq


def synth_samples(root, **kw):
    seq = synth_dataset(root, **kw)
    return make_samples(seq, seq.root / "flows")
