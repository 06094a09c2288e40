"""On-disk driving sequences, flow precomputation, sample alignment, augmentation.

A sequence directory holds frame_%06d.png (or .ppm) plus steering.csv and an
optional meta.json. Flows are cached one file per consecutive pair in a cache
directory that carries its own meta.json with the encoding max magnitude (the
99th percentile over the cached flows), so the source dataset is never
mutated. Sample i (i >= 1) pairs frame i with the flow i-1 -> i and the
multitask targets angle(i), angle(i-1).
"""

import hashlib
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .optflow import (FlowParams, encode_flow_rgb, estimate_flow, read_flow,
                      rgb_to_gray, write_flow, FlowCacheError)

__all__ = [
    "DatasetError", "SteeringRecord", "DrivingSequence", "Sample",
    "AugmentConfig", "load_sequence", "precompute_flows", "attach_flow_cache",
    "make_samples", "augment", "stage_split", "meta_hash", "flow_worker_count",
]

CACHE_META = "meta.json"
FLOW_PATTERN = "flow_%06d.bin"


class DatasetError(ValueError):
    """Raised for malformed sequences, caches, or split requests."""


@dataclass
class SteeringRecord:
    frame_index: int
    timestamp_s: float
    angle_deg: float


@dataclass
class DrivingSequence:
    root: Path
    frame_paths: list
    width: int
    height: int
    sample_rate_hz: float
    records: list
    meta: dict
    flow_cache_dir: Path = None
    flow_max_magnitude: float = None

    @property
    def n_frames(self):
        return len(self.frame_paths)

    def load_frame(self, i):
        with Image.open(self.frame_paths[i]) as im:
            return np.asarray(im.convert("RGB"))

    def angles(self):
        return np.array([r.angle_deg for r in self.records])


@dataclass
class Sample:
    """One training unit: frame t, encoded flow t-1 -> t, MTL targets.

    The raw flow and the encoding max magnitude ride along so augmentation can
    re-encode exactly after mirroring.
    """

    index: int
    frame: np.ndarray
    flow: object
    flow_enc: np.ndarray
    target_main: float
    target_aux: float
    flow_max_magnitude: float


def _parse_steering_csv(path):
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0].strip() != "index,timestamp_s,steering_angle_deg":
        raise DatasetError("steering.csv missing expected header in %s" % (path,))
    records = []
    for ln, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != 3:
            raise DatasetError("steering.csv row %d malformed: %r" % (ln, line))
        records.append(SteeringRecord(int(parts[0]), float(parts[1]), float(parts[2])))
    return records


def load_sequence(path):
    """Load and validate a sequence directory."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError("dataset directory %s does not exist" % (root,))
    frame_paths = sorted(list(root.glob("frame_*.png")) + list(root.glob("frame_*.ppm")))
    if not frame_paths:
        raise DatasetError("no frame_*.png or frame_*.ppm files in %s" % (root,))
    pat = re.compile(r"frame_(\d{6})\.(png|ppm)$")
    for i, p in enumerate(frame_paths):
        m = pat.match(p.name)
        if not m or int(m.group(1)) != i:
            raise DatasetError("frame indices not contiguous: expected index %d, found %s"
                               % (i, p.name))

    csv_path = root / "steering.csv"
    if not csv_path.exists():
        raise DatasetError("steering.csv missing in %s" % (root,))
    records = _parse_steering_csv(csv_path)
    if len(records) != len(frame_paths):
        raise DatasetError("record count %d != frame count %d (first gap at index %d)"
                           % (len(records), len(frame_paths),
                              min(len(records), len(frame_paths))))
    for i, r in enumerate(records):
        if r.frame_index != i:
            raise DatasetError("steering.csv index %d out of order at row %d"
                               % (r.frame_index, i))
        if i > 0 and r.timestamp_s <= records[i - 1].timestamp_s:
            raise DatasetError("timestamps not strictly increasing at index %d" % (i,))

    with Image.open(frame_paths[0]) as im:
        width, height = im.size
    for i, p in enumerate(frame_paths[1:], start=1):
        with Image.open(p) as im:
            if im.size != (width, height):
                raise DatasetError("frame %d has size %s, expected %s"
                                   % (i, im.size, (width, height)))

    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    if len(records) > 1:
        rate = 1.0 / float(np.median(np.diff([r.timestamp_s for r in records])))
    else:
        rate = 1.0
    sample_rate = float(meta.get("sample_rate_hz") or rate)

    return DrivingSequence(root=root, frame_paths=frame_paths, width=width,
                           height=height, sample_rate_hz=sample_rate,
                           records=records, meta=meta)


def meta_hash(seq_root):
    """Identity hash of a dataset, used by the leakage guard."""
    root = Path(seq_root)
    meta_path = root / "meta.json"
    if meta_path.exists():
        return hashlib.sha256(meta_path.read_bytes()).hexdigest()
    return hashlib.sha256(str(root.resolve()).encode()).hexdigest()


def flow_worker_count():
    """Worker cap from TSNET_THREADS; defaults to 1."""
    raw = os.environ.get("TSNET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _flow_file_valid(path, width, height):
    try:
        flow = read_flow(path)
    except (OSError, FlowCacheError):
        return False
    return flow.width == width and flow.height == height


def precompute_flows(seq, params=None, cache_dir=None, threads=None):
    """Cache flow for every consecutive pair; idempotent.

    Existing valid files are left untouched. After all pairs exist, the 99th
    percentile magnitude over the cached (float32) flows is recorded in the
    cache directory's meta.json together with a parameter echo and the source
    dataset hash. Returns the cache directory.
    """
    params = params or FlowParams()
    cache = Path(cache_dir) if cache_dir is not None else seq.root / "flows"
    try:
        cache.mkdir(parents=True, exist_ok=True)
        probe = cache / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError("flow cache dir %s not writable: %s" % (cache, exc))

    todo = []
    for i in range(seq.n_frames - 1):
        path = cache / (FLOW_PATTERN % i)
        if not _flow_file_valid(path, seq.width, seq.height):
            todo.append(i)

    def compute(i):
        prev = rgb_to_gray(seq.load_frame(i))
        nxt = rgb_to_gray(seq.load_frame(i + 1))
        write_flow(cache / (FLOW_PATTERN % i), estimate_flow(prev, nxt, params))

    workers = threads or flow_worker_count()
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(compute, todo))
    else:
        for i in todo:
            compute(i)

    mags = []
    for i in range(seq.n_frames - 1):
        mags.append(read_flow(cache / (FLOW_PATTERN % i)).magnitude().ravel())
    max_mag = float(np.percentile(np.concatenate(mags), 99.0)) if mags else 1.0
    if max_mag <= 0:
        max_mag = 1.0   # static scene, any positive scale encodes all-white

    meta = {
        "flow_max_magnitude": max_mag,
        "n_flows": seq.n_frames - 1,
        "flow_params": {
            "pyramid_scale": params.pyramid_scale,
            "levels": params.levels,
            "window_size": params.window_size,
            "iterations": params.iterations,
            "poly_n": params.poly_n,
            "poly_sigma": params.poly_sigma,
        },
        "source_meta_sha256": meta_hash(seq.root),
    }
    blob = json.dumps(meta, sort_keys=True, indent=1) + "\n"
    meta_path = cache / CACHE_META
    if not meta_path.exists() or meta_path.read_text(encoding="utf-8") != blob:
        meta_path.write_text(blob, encoding="utf-8")

    seq.flow_cache_dir = cache
    seq.flow_max_magnitude = max_mag
    return cache


def attach_flow_cache(seq, cache_dir):
    """Point a loaded sequence at an existing, complete flow cache."""
    cache = Path(cache_dir)
    meta_path = cache / CACHE_META
    if not meta_path.exists():
        raise DatasetError("flow cache %s has no meta.json; run flow precompute" % (cache,))
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    for i in range(seq.n_frames - 1):
        if not (cache / (FLOW_PATTERN % i)).exists():
            raise DatasetError("incomplete flow cache: missing pair %d" % (i,))
    seq.flow_cache_dir = cache
    seq.flow_max_magnitude = float(meta["flow_max_magnitude"])
    return seq


def make_samples(seq, cache_dir=None, max_magnitude=None):
    """Ordered samples 1..n-1; flow i-1 -> i encoded at a fixed max magnitude.

    max_magnitude defaults to the cache's recorded percentile; pass the value
    stored in a checkpoint to reproduce training-time encoding at eval.
    """
    if cache_dir is not None:
        attach_flow_cache(seq, cache_dir)
    if seq.flow_cache_dir is None:
        raise DatasetError("sequence has no flow cache attached")
    cache = seq.flow_cache_dir
    max_mag = float(max_magnitude) if max_magnitude is not None else seq.flow_max_magnitude

    samples = []
    for i in range(1, seq.n_frames):
        path = cache / (FLOW_PATTERN % (i - 1))
        if not path.exists():
            raise DatasetError("incomplete flow cache: missing pair %d" % (i - 1,))
        flow = read_flow(path)
        samples.append(Sample(
            index=i,
            frame=seq.load_frame(i),
            flow=flow,
            flow_enc=encode_flow_rgb(flow, max_mag),
            target_main=seq.records[i].angle_deg,
            target_aux=seq.records[i - 1].angle_deg,
            flow_max_magnitude=max_mag,
        ))
    return samples


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    brightness: float = 25.0
    contrast_range: tuple = (0.8, 1.2)


def augment(sample, rng_seed, cfg=None):
    """Seeded augmentation: horizontal flip (label-consistent) + photometric jitter.

    A flip mirrors the frame, mirrors the flow with u negated (re-encoded to
    RGB at the sample's own max magnitude), and negates both targets. Jitter
    (brightness offset, contrast scale around mid-gray) touches the frame
    only; the flow channel is byte-identical.
    """
    cfg = cfg or AugmentConfig()
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    frame = sample.frame
    flow = sample.flow
    flow_enc = sample.flow_enc
    t_main, t_aux = sample.target_main, sample.target_aux

    if rng.random() < cfg.flip_prob:
        frame = frame[:, ::-1].copy()
        flow = replace(flow, u=-flow.u[:, ::-1], v=flow.v[:, ::-1].copy())
        flow_enc = encode_flow_rgb(flow, sample.flow_max_magnitude)
        t_main, t_aux = -t_main, -t_aux

    offset = rng.uniform(-cfg.brightness, cfg.brightness)
    lo, hi = cfg.contrast_range
    scalec = rng.uniform(lo, hi)
    jittered = scalec * (frame.astype(np.float64) - 127.5) + 127.5 + offset
    frame = np.rint(np.clip(jittered, 0.0, 255.0)).astype(np.uint8)

    return Sample(index=sample.index, frame=frame, flow=flow, flow_enc=flow_enc,
                  target_main=t_main, target_aux=t_aux,
                  flow_max_magnitude=sample.flow_max_magnitude)


def stage_split(samples, ratio=0.6):
    """Contiguous temporal split at floor(ratio * n); both sides non-empty."""
    if not 0.0 < ratio < 1.0:
        raise DatasetError("split ratio must lie in (0,1), got %r" % (ratio,))
    n = len(samples)
    k = int(np.floor(ratio * n))
    if k == 0 or k == n:
        raise DatasetError("split ratio %r leaves an empty side for n=%d" % (ratio, n))
    return samples[:k], samples[k:]
