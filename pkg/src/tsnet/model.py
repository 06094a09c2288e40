"""Two-stream architecture and checkpoint persistence.

Twin convolutional branches with identical configuration but independent
parameters embed the raw frame (spatial stream) and the color-encoded flow
(temporal stream). Global average pooling reduces each to a vector, the
fusion layer multiplies them elementwise, and a shared MLP trunk ends in one
linear layer with two outputs: row 0 predicts angle(t), row 1 the auxiliary
angle(t-1), dropped at inference.

Checkpoints are a flat binary format: magic "TSNET001", a JSON header (model
kind, config, stage tag, rng state, provenance extras), then one record per
parameter (name, rank, dims as u32 LE, float64 LE data), sorted by name.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, conv2d, dense, dropout, elementwise_mul,
                     global_avg_pool, relu, take_column)

__all__ = [
    "BranchConfig", "TwoStreamConfig", "SingleStreamModel", "TwoStreamModel",
    "CheckpointError", "build_model", "build_branch_model", "param_count",
    "save_checkpoint", "load_checkpoint", "load_branch_weights",
    "CHECKPOINT_MAGIC", "normalize_image",
]

CHECKPOINT_MAGIC = b"TSNET001"

DEFAULT_BLOCKS = ((16, 3, 2, 1), (32, 3, 2, 1), (64, 3, 2, 1), (128, 3, 2, 1))


class CheckpointError(ValueError):
    """Raised for bad magic, truncated files, or incompatible configs."""


@dataclass
class BranchConfig:
    """Conv blocks as (out_channels, kernel, stride, padding) tuples."""

    blocks: tuple = DEFAULT_BLOCKS
    in_channels: int = 3

    def __post_init__(self):
        self.blocks = tuple(tuple(b) for b in self.blocks)
        if not self.blocks:
            raise ValueError("branch needs at least one conv block")
        for b in self.blocks:
            if len(b) != 4 or b[0] < 1 or b[1] < 1 or b[2] < 1 or b[3] < 0:
                raise ValueError("bad conv block spec %r" % (b,))

    @property
    def embedding_dim(self):
        return self.blocks[-1][0]


@dataclass
class TwoStreamConfig:
    branch: BranchConfig = field(default_factory=BranchConfig)
    mlp_hidden: tuple = (64,)
    dropout_p: float = 0.2
    input_hw: tuple = (32, 64)

    def __post_init__(self):
        self.mlp_hidden = tuple(self.mlp_hidden)
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0,1), got %r" % (self.dropout_p,))
        check_branch_output(self.branch, self.input_hw)

    def to_dict(self):
        return {"blocks": [list(b) for b in self.branch.blocks],
                "in_channels": self.branch.in_channels,
                "mlp_hidden": list(self.mlp_hidden),
                "dropout_p": self.dropout_p,
                "input_hw": list(self.input_hw)}

    @classmethod
    def from_dict(cls, d):
        return cls(branch=BranchConfig(blocks=tuple(tuple(b) for b in d["blocks"]),
                                       in_channels=d["in_channels"]),
                   mlp_hidden=tuple(d["mlp_hidden"]),
                   dropout_p=d["dropout_p"],
                   input_hw=tuple(d["input_hw"]))


def check_branch_output(branch, input_hw):
    """Walk the shape formula; reject configs that collapse below 1x1."""
    h, w = input_hw
    for i, (_, k, s, p) in enumerate(branch.blocks):
        h = (h + 2 * p - k) // s + 1
        w = (w + 2 * p - k) // s + 1
        if h < 1 or w < 1:
            raise ValueError("conv block %d reduces input %s below 1x1"
                             % (i, tuple(input_hw)))
    return h, w


def _init_param(shape, fan_in, seed_seq):
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _init_branch(prefix, branch, seed, ordinal_start):
    """Fan-in-scaled uniform init, one child seed per parameter tensor."""
    params = {}
    ordinal = ordinal_start
    cin = branch.in_channels
    for i, (cout, k, _, _) in enumerate(branch.blocks):
        fan_in = cin * k * k
        params["%s.conv%d.weight" % (prefix, i)] = _init_param(
            (cout, cin, k, k), fan_in, np.random.SeedSequence((seed, ordinal)))
        params["%s.conv%d.bias" % (prefix, i)] = _init_param(
            (cout,), fan_in, np.random.SeedSequence((seed, ordinal + 1)))
        ordinal += 2
        cin = cout
    return params, ordinal


def _branch_forward(params, prefix, x, branch):
    h = x
    for i, (_, _, stride, pad) in enumerate(branch.blocks):
        h = relu(conv2d(h, params["%s.conv%d.weight" % (prefix, i)],
                        params["%s.conv%d.bias" % (prefix, i)],
                        stride=stride, padding=pad))
    return global_avg_pool(h)


def _check_input(name, x, hw):
    if x.data.ndim != 4 or x.data.shape[1] != 3:
        raise ValueError("%s must be (N,3,H,W), got %s" % (name, x.data.shape))
    if x.data.shape[2:] != tuple(hw):
        raise ValueError("%s spatial dims %s do not match config %s"
                         % (name, x.data.shape[2:], tuple(hw)))
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError("%s values outside [0,1] (min %g, max %g); "
                         "divide images by 255" % (name, lo, hi))


def normalize_image(img):
    """H x W x 3 image in [0,255] to a (3,H,W) float64 array in [0,1]."""
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def _dropout_seed(base, layer):
    return int(np.random.SeedSequence((int(base), layer)).generate_state(1)[0])


class SingleStreamModel:
    """One branch + GAP + temporary linear head: the stage-1 regressor."""

    def __init__(self, branch, input_hw, dropout_p, stream, seed=0, params=None):
        self.branch = branch
        self.input_hw = tuple(input_hw)
        self.dropout_p = float(dropout_p)
        self.stream = stream
        check_branch_output(branch, input_hw)
        if params is not None:
            self.params = params
        else:
            self.params, ordinal = _init_branch("branch", branch, seed, 0)
            d = branch.embedding_dim
            self.params["head.weight"] = _init_param(
                (1, d), d, np.random.SeedSequence((seed, ordinal)))
            self.params["head.bias"] = _init_param(
                (1,), d, np.random.SeedSequence((seed, ordinal + 1)))

    def config_dict(self):
        return {"blocks": [list(b) for b in self.branch.blocks],
                "in_channels": self.branch.in_channels,
                "dropout_p": self.dropout_p,
                "input_hw": list(self.input_hw),
                "stream": self.stream}

    def forward(self, x, training=False, dropout_seed=0):
        x = x if isinstance(x, Tensor) else Tensor(x)
        _check_input("input", x, self.input_hw)
        e = _branch_forward(self.params, "branch", x, self.branch)
        if self.dropout_p > 0:
            e = dropout(e, self.dropout_p, training, _dropout_seed(dropout_seed, 0))
        out = dense(e, self.params["head.weight"], self.params["head.bias"])
        return take_column(out, 0)

    def predict(self, image):
        x = normalize_image(image)[None]
        return float(self.forward(Tensor(x), training=False).data[0])


class TwoStreamModel:
    """Twin branches, multiplicative fusion, shared MLP trunk, two outputs."""

    def __init__(self, cfg, seed=0, params=None):
        self.cfg = cfg
        if params is not None:
            self.params = params
            return
        self.params = {}
        p_s, ordinal = _init_branch("spatial", cfg.branch, seed, 0)
        p_t, ordinal = _init_branch("temporal", cfg.branch, seed, ordinal)
        self.params.update(p_s)
        self.params.update(p_t)
        din = cfg.branch.embedding_dim
        for i, width in enumerate(cfg.mlp_hidden):
            self.params["mlp.hidden%d.weight" % i] = _init_param(
                (width, din), din, np.random.SeedSequence((seed, ordinal)))
            self.params["mlp.hidden%d.bias" % i] = _init_param(
                (width,), din, np.random.SeedSequence((seed, ordinal + 1)))
            ordinal += 2
            din = width
        self.params["mlp.out.weight"] = _init_param(
            (2, din), din, np.random.SeedSequence((seed, ordinal)))
        self.params["mlp.out.bias"] = _init_param(
            (2,), din, np.random.SeedSequence((seed, ordinal + 1)))

    def embed_spatial(self, frames):
        return _branch_forward(self.params, "spatial", frames, self.cfg.branch)

    def embed_temporal(self, flows):
        return _branch_forward(self.params, "temporal", flows, self.cfg.branch)

    def head(self, z, training=False, dropout_seed=0):
        """MLP over the fused embedding; returns (y_main, y_aux)."""
        h = z
        for i in range(len(self.cfg.mlp_hidden)):
            h = relu(dense(h, self.params["mlp.hidden%d.weight" % i],
                           self.params["mlp.hidden%d.bias" % i]))
            if self.cfg.dropout_p > 0:
                h = dropout(h, self.cfg.dropout_p, training,
                            _dropout_seed(dropout_seed, i))
        out = dense(h, self.params["mlp.out.weight"], self.params["mlp.out.bias"])
        return take_column(out, 0), take_column(out, 1)

    def forward(self, frames, flows_enc, training=False, dropout_seed=0):
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        flows_enc = flows_enc if isinstance(flows_enc, Tensor) else Tensor(flows_enc)
        _check_input("frames", frames, self.cfg.input_hw)
        _check_input("flows_enc", flows_enc, self.cfg.input_hw)
        if frames.data.shape[0] != flows_enc.data.shape[0]:
            raise ValueError("batch mismatch: %d frames vs %d flows"
                             % (frames.data.shape[0], flows_enc.data.shape[0]))
        z = elementwise_mul(self.embed_spatial(frames), self.embed_temporal(flows_enc))
        return self.head(z, training, dropout_seed)

    def predict(self, frame, flow_enc):
        """Inference: auxiliary output dropped, dropout off."""
        f = Tensor(normalize_image(frame)[None])
        g = Tensor(normalize_image(flow_enc)[None])
        y_main, _ = self.forward(f, g, training=False)
        return float(y_main.data[0])


def build_model(cfg, seed):
    return TwoStreamModel(cfg, seed=seed)


def build_branch_model(branch, input_hw, dropout_p, stream, seed):
    return SingleStreamModel(branch, input_hw, dropout_p, stream, seed=seed)


def param_count(model):
    return int(sum(p.data.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, stage, rng_state=None, extra=None):
    """Write model parameters plus provenance; float64 LE, sorted by name."""
    if isinstance(model, TwoStreamModel):
        kind, config = "two_stream", model.cfg.to_dict()
    else:
        kind, config = "single_stream", model.config_dict()
    header = {"kind": kind, "config": config, "stage": stage,
              "rng_state": rng_state, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(model.params):
            data = np.ascontiguousarray(model.params[name].data, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack("<%dI" % data.ndim, *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint %s" % (path,))
    return buf


def read_checkpoint_raw(path):
    """Header dict + name->array map, validating magic and length."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic in %s" % (path,))
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
        header = json.loads(_read_exact(fh, hlen, path).decode("utf-8"))
        params = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise CheckpointError("truncated checkpoint %s" % (path,))
            (nlen,) = struct.unpack("<I", raw)
            name = _read_exact(fh, nlen, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
            dims = struct.unpack("<%dI" % rank, _read_exact(fh, 4 * rank, path))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * count, path), dtype="<f8")
            params[name] = data.reshape(dims).astype(np.float64)
    return header, params


def load_checkpoint(path):
    """Rebuild the saved model; stage tag and header ride on the instance."""
    header, arrays = read_checkpoint_raw(path)
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    kind = header.get("kind")
    cfgd = header.get("config", {})
    try:
        if kind == "two_stream":
            model = TwoStreamModel(TwoStreamConfig.from_dict(cfgd), params=params)
        elif kind == "single_stream":
            model = SingleStreamModel(
                BranchConfig(blocks=tuple(tuple(b) for b in cfgd["blocks"]),
                             in_channels=cfgd["in_channels"]),
                tuple(cfgd["input_hw"]), cfgd["dropout_p"], cfgd["stream"],
                params=params)
        else:
            raise CheckpointError("unknown model kind %r in %s" % (kind, path))
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError("config incompatibility in %s: %s" % (path, exc))
    expected = set(_expected_param_names(model))
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        extra_names = sorted(set(params) - expected)[:3]
        raise CheckpointError("config incompatibility in %s: missing %s, unexpected %s"
                              % (path, missing, extra_names))
    model.stage = header.get("stage")
    model.rng_state = header.get("rng_state")
    model.extra = header.get("extra", {})
    return model


def _expected_param_names(model):
    if isinstance(model, TwoStreamModel):
        ref = TwoStreamModel(model.cfg, seed=0)
    else:
        ref = SingleStreamModel(model.branch, model.input_hw, model.dropout_p,
                                model.stream, seed=0)
    return ref.params.keys()


def load_branch_weights(model, ckpt_path, stream):
    """Initialize one branch of a two-stream model from a stage-1 checkpoint.

    Matching is by name: stage-1 "branch.*" tensors map onto "<stream>.*";
    the temporary head is simply not matched. Shape disagreements are config
    incompatibilities.
    """
    if stream not in ("spatial", "temporal"):
        raise ValueError("stream must be spatial or temporal, got %r" % (stream,))
    header, arrays = read_checkpoint_raw(ckpt_path)
    if header.get("kind") != "single_stream":
        raise CheckpointError("config incompatibility: %s is not a stage-1 branch "
                              "checkpoint" % (ckpt_path,))
    loaded = 0
    for name, data in arrays.items():
        if not name.startswith("branch."):
            continue
        target = stream + name[len("branch"):]
        if target not in model.params:
            raise CheckpointError("config incompatibility: no parameter %s in model"
                                  % (target,))
        if model.params[target].data.shape != data.shape:
            raise CheckpointError("config incompatibility: %s shape %s vs %s"
                                  % (target, data.shape, model.params[target].data.shape))
        model.params[target].data = data.copy()
        loaded += 1
    if loaded == 0:
        raise CheckpointError("config incompatibility: no branch.* tensors in %s"
                              % (ckpt_path,))
    return header
