"""Synthetic driving scenes with a ground-truth spatiotemporal oracle.

Each frame shows a bright vertical band (intensity 255 on background 32)
whose center x_t follows a seeded sum of sinusoids around the image midline.
The label mixes a position term and a velocity term:

    angle(t) = k1 (x_t - W/2) + k2 (x_t - x_{t-1}),   angle(0) = k1 (x_0 - W/2)

The velocity term is invisible in any single frame, so a purely spatial model
has an irreducible error floor while a temporal (flow-consuming) model does
not. Band edges are rendered with subpixel coverage, making x_t recoverable
to subpixel precision from one frame.

Two optional nuisance sources mimic real footage: per-frame sensor noise
(noise_std) and a static striped backdrop the band occludes (clutter).
Static clutter is invisible to optical flow but entangles appearance-based
position readout, which is what separates the two streams on real video.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["SynthConfig", "synth_generate"]


@dataclass
class SynthConfig:
    width: int = 64
    height: int = 32
    n_frames: int = 300
    seed: int = 0
    band_width: float = 10.0
    k1: float = 0.5
    k2: float = 2.0
    sample_rate_hz: float = 10.0
    center_offset_px: float = 0.0
    n_motion_components: int = 3
    max_amplitude: float = 10.0
    freq_range: tuple = (0.012, 0.08)   # cycles per frame
    noise_std: float = 0.0              # per-pixel sensor noise, intensity units
    clutter: float = 0.0                # static background stripe contrast
    clutter_seed: int = 0               # shared across sequences for one scene

    def __post_init__(self):
        if self.width < 8 or self.height < 4:
            raise ValueError("canvas too small: %dx%d" % (self.width, self.height))
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.band_width <= 0:
            raise ValueError("band_width must be positive")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.n_motion_components < 0 or self.max_amplitude < 0:
            raise ValueError("motion parameters must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.clutter < 0 or self.clutter > 223:
            raise ValueError("clutter must be in [0, 223] intensity units")
        # Worst-case excursion must keep the band inside the frame.
        reach = abs(self.center_offset_px) + self.max_amplitude + self.band_width / 2.0
        if reach > self.width / 2.0 - 1.0:
            raise ValueError(
                "band excursion %.1f px exceeds frame half-width minus margin %.1f px"
                % (reach, self.width / 2.0 - 1.0))


def _draw_motion(cfg, rng):
    """Seeded amplitudes, frequencies, phases with sum(a) <= max_amplitude."""
    n = cfg.n_motion_components
    if n == 0 or cfg.max_amplitude == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    raw = rng.uniform(0.3, 1.0, n)
    total = rng.uniform(0.75, 1.0) * cfg.max_amplitude
    amps = raw / raw.sum() * total
    freqs = rng.uniform(cfg.freq_range[0], cfg.freq_range[1], n)
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    return amps, freqs, phases


def render_band_frame(width, height, center_x, band_width, background=None):
    """One frame: vertical band with subpixel edge coverage, uint8 H x W x 3.

    background is an optional per-column intensity row (static scenery the
    band occludes); default is the flat 32 backdrop.
    """
    cols = np.arange(width, dtype=np.float64)
    left = center_x - band_width / 2.0
    right = center_x + band_width / 2.0
    coverage = np.clip(np.minimum(cols + 1.0, right) - np.maximum(cols, left), 0.0, 1.0)
    bg = np.full(width, 32.0) if background is None else np.asarray(background, dtype=np.float64)
    row = np.rint(bg * (1.0 - coverage) + 255.0 * coverage).astype(np.uint8)
    return np.broadcast_to(row[None, :, None], (height, width, 3)).copy()


def synth_generate(cfg, out_dir):
    """Render the dataset into out_dir: frames, steering.csv, meta.json.

    Deterministic: the same config (same seed) produces byte-identical files.
    Returns the trajectory x_t and the angle series.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    amps, freqs, phases = _draw_motion(cfg, rng)
    background = None
    if cfg.clutter > 0:
        # Static per-column stripes the band occludes. Seeded separately so
        # train/test sequences of one scene can share the same backdrop.
        crng = np.random.Generator(np.random.PCG64(cfg.clutter_seed))
        background = 32.0 + cfg.clutter * crng.random(cfg.width)

    t = np.arange(cfg.n_frames, dtype=np.float64)
    x = np.full(cfg.n_frames, cfg.width / 2.0 + cfg.center_offset_px)
    for a, f, p in zip(amps, freqs, phases):
        x = x + a * np.sin(2.0 * np.pi * f * t + p)
    x = np.clip(x, cfg.band_width / 2.0, cfg.width - cfg.band_width / 2.0)

    angle = cfg.k1 * (x - cfg.width / 2.0)
    angle[1:] += cfg.k2 * np.diff(x)

    for i in range(cfg.n_frames):
        frame = render_band_frame(cfg.width, cfg.height, x[i], cfg.band_width,
                                  background)
        if cfg.noise_std > 0:
            # Luminance (per-pixel, channel-shared) sensor noise. Drawn from
            # the same seeded generator, so datasets stay reproducible.
            jitter = rng.normal(0.0, cfg.noise_std, (cfg.height, cfg.width))
            noisy = frame.astype(np.float64) + jitter[:, :, None]
            frame = np.rint(np.clip(noisy, 0.0, 255.0)).astype(np.uint8)
        Image.fromarray(frame).save(out_dir / ("frame_%06d.png" % i))

    lines = ["index,timestamp_s,steering_angle_deg"]
    for i in range(cfg.n_frames):
        lines.append("%d,%s,%s" % (i, repr(i / cfg.sample_rate_hz), repr(float(angle[i]))))
    (out_dir / "steering.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    meta = {
        "width": cfg.width,
        "height": cfg.height,
        "n_frames": cfg.n_frames,
        "sample_rate_hz": cfg.sample_rate_hz,
        "flow_max_magnitude": None,
        "oracle_series": [float(v) for v in x],
        "synth": {
            "seed": cfg.seed,
            "band_width": cfg.band_width,
            "k1": cfg.k1,
            "k2": cfg.k2,
            "center_offset_px": cfg.center_offset_px,
            "noise_std": cfg.noise_std,
            "clutter": cfg.clutter,
            "clutter_seed": cfg.clutter_seed,
            "amplitudes": [float(a) for a in amps],
            "frequencies": [float(f) for f in freqs],
            "phases": [float(p) for p in phases],
        },
    }
    (out_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return x, angle
