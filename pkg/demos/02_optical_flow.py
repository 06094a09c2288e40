"""Estimate dense optical flow and visualize it with the color wheel.

Three exhibits, written to demo_out/flow/:
  1. a textured patch shifted by a known (u, v) and the recovered flow,
  2. the color-wheel legend itself (a synthetic radial flow field),
  3. flow between two frames of a generated scene, next to the frames.

Run: python demos/02_optical_flow.py
"""

from pathlib import Path

import numpy as np
from PIL import Image

from tsnet.dataset import load_sequence
from tsnet.optflow import FlowParams, encode_flow_rgb, estimate_flow
from tsnet.synth import SynthConfig, synth_generate

OUT = Path("demo_out/flow")


def textured(h, w, seed):
    """Smooth random texture with structure along both axes."""
    rng = np.random.Generator(np.random.PCG64(seed))
    coarse = rng.random((h // 4 + 2, w // 4 + 2))
    img = np.kron(coarse, np.ones((4, 4)))[:h, :w]
    return (40 + 170 * img).astype(np.uint8)


def exhibit_known_shift():
    img = textured(64, 96, seed=1)
    shift = (3, -2)  # (u right, v up): roll columns +3, rows -2
    moved = np.roll(np.roll(img, shift[0], axis=1), shift[1], axis=0)
    flow = estimate_flow(img, moved, FlowParams(levels=3, window_size=15))
    interior = (slice(8, -8), slice(8, -8))
    print("known shift u=%+d v=%+d  recovered medians u=%+.2f v=%+.2f"
          % (shift[0], shift[1],
             np.median(flow.u[interior]), np.median(flow.v[interior])))
    Image.fromarray(encode_flow_rgb(flow, max_magnitude=4.0)).save(
        OUT / "known_shift_encoded.png")


def exhibit_color_wheel():
    ys, xs = np.mgrid[-32:32, -32:32].astype(np.float64)
    from tsnet.optflow import FlowField
    wheel = encode_flow_rgb(FlowField(u=xs, v=ys), max_magnitude=32.0)
    Image.fromarray(wheel).resize((256, 256), Image.NEAREST).save(
        OUT / "color_wheel.png")
    print("color wheel legend: hue = direction, saturation = magnitude")


def exhibit_scene_pair():
    scene = OUT / "scene"
    synth_generate(SynthConfig(width=96, height=48, n_frames=12,
                               band_width=16.0, max_amplitude=30.0,
                               n_motion_components=2, freq_range=(0.2, 0.4),
                               seed=5), scene)
    seq = load_sequence(scene)
    a = np.asarray(Image.open(seq.frame_paths[5]).convert("L"), np.float64)
    b = np.asarray(Image.open(seq.frame_paths[6]).convert("L"), np.float64)
    flow = estimate_flow(a, b)
    band = np.abs(flow.u) > 0.05
    print("scene pair: band mean u=%+.2f px (band moved %s), v rms %.3f"
          % (flow.u[band].mean(),
             "right" if flow.u[band].mean() > 0 else "left",
             np.sqrt((flow.v ** 2).mean())))
    panel = np.concatenate([
        np.stack([a.astype(np.uint8)] * 3, axis=-1),
        encode_flow_rgb(flow, max_magnitude=2.0),
        np.stack([b.astype(np.uint8)] * 3, axis=-1),
    ], axis=1)
    Image.fromarray(panel).save(OUT / "scene_pair_flow.png")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    exhibit_known_shift()
    exhibit_color_wheel()
    exhibit_scene_pair()
    print("wrote exhibits under", OUT)


if __name__ == "__main__":
    main()
