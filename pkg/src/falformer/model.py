"""The FALFormer slide classifier: FC+GELU embedding, CLS token, L pre-norm
attention layers with residuals, and a linear head on the normalised CLS row."""
from __future__ import annotations

import ast
import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import MODES, AttendCache, AttentionParams, attend_forward
from .clustering import SegmentAssignment, kmeans
from .errors import CheckpointError, ConfigError, ShapeError

CKPT_MAGIC = b"FALFORMER-CKPT\n"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_f: int
    d_model: int = 768
    layers: int = 2
    segments: int = 256
    heads: int = 8
    n_classes: int = 2
    attention_mode: str = "falsa"
    pinv_iters: int = nx.PINV_ITERS
    oracle_pinv: bool = False
    kmeans_seed: int = 0
    kmeans_max_iters: int = 50
    recluster_per_layer: bool = False
    cluster_space: str = "projected"  # or "raw": cluster the input features
    ln_eps: float = nx.LN_EPS

    def __post_init__(self):
        problems = []
        if self.d_f < 1:
            problems.append("d_f must be >= 1")
        if self.d_model < 1:
            problems.append("d_model must be >= 1")
        if self.layers < 1:
            problems.append("layers must be >= 1")
        if self.segments < 1:
            problems.append("segments must be >= 1")
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.heads < 1 or self.d_model % self.heads:
            problems.append(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.attention_mode not in MODES:
            problems.append(f"attention_mode must be one of {MODES}")
        if self.pinv_iters < 1:
            problems.append("pinv_iters must be >= 1")
        if self.cluster_space not in ("projected", "raw"):
            problems.append("cluster_space must be 'projected' or 'raw'")
        if self.ln_eps <= 0:
            problems.append("ln_eps must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def d_head(self):
        return self.d_model // self.heads

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text):

        values = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = ast.literal_eval(raw)
        return cls(**values)


def param_shapes(config):
    """Parameter names and shapes, in the fixed order used by checkpoints."""
    d, inner = config.d_model, config.heads * config.d_head
    shapes = {
        "embed.weight": (config.d_f, d),
        "embed.bias": (d,),
        "cls_token": (d,),
    }
    for i in range(config.layers):
        shapes[f"layers.{i}.norm.gamma"] = (d,)
        shapes[f"layers.{i}.norm.beta"] = (d,)
        shapes[f"layers.{i}.attn.wq"] = (d, inner)
        shapes[f"layers.{i}.attn.wk"] = (d, inner)
        shapes[f"layers.{i}.attn.wv"] = (d, inner)
        shapes[f"layers.{i}.attn.wo"] = (inner, d)
    shapes["final_norm.gamma"] = (d,)
    shapes["final_norm.beta"] = (d,)
    shapes["classifier.weight"] = (d, config.n_classes)
    shapes["classifier.bias"] = (config.n_classes,)
    return shapes


@dataclass
class ModelParams:
    """All learnable tensors, keyed by the names from :func:`param_shapes`."""

    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def n_params(self):
        return sum(v.size for v in self.tensors.values())

    def attention(self, layer, heads):
        p = f"layers.{layer}.attn."
        return AttentionParams(self[p + "wq"], self[p + "wk"], self[p + "wv"], self[p + "wo"], heads)

    def check(self, config):
        shapes = param_shapes(config)
        if list(shapes) != list(self.tensors):
            raise ConfigError("parameter names do not match the config")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(f"{name} has shape {self.tensors[name].shape}, config expects {shape}")
            nx.check_finite(self.tensors[name], name)


def init_params(config, seed=0):
    """Seeded init: linear weights/biases ~ U(+-1/sqrt(fan_in)), LayerNorm (1, 0),
    CLS ~ N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            tensors[name] = np.ones(shape)
        elif name.endswith(".beta"):
            tensors[name] = np.zeros(shape)
        elif name == "cls_token":
            tensors[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            weight = name.replace(".bias", ".weight")
            fan_in = param_shapes(config)[weight][0] if name.endswith(".bias") else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(tensors)


@dataclass
class LayerTrace:
    ln_cache: object
    normed: np.ndarray
    attend: AttendCache | None
    assignment: SegmentAssignment | None
    n_landmarks: int | None


@dataclass
class ForwardTrace:
    """Activations of one forward pass; caches are kept only with ``retain=True``."""

    hidden: list             # H^(0) .. H^(L), each (N+1, d_model)
    layers: list             # LayerTrace per layer
    logits: np.ndarray
    inputs: np.ndarray | None = None
    pre_gelu: np.ndarray | None = None
    final_ln_cache: object = None
    cls_normed: np.ndarray | None = None
    config: ModelConfig | None = None
    retained: bool = True

    @property
    def assignment(self):
        return self.layers[0].assignment if self.layers else None


def _bag_tokens(bag):
    tokens = getattr(bag, "tokens", bag)
    return np.asarray(tokens, dtype=np.float64)


def _cluster(tokens, config):
    return kmeans(tokens, min(config.segments, len(tokens)), seed=config.kmeans_seed,
                  max_iters=config.kmeans_max_iters)


def forward(bag, params, config, assignment=None, retain=True):
    """Run the network on one bag (a :class:`FeatureBag` or an ``(N, d_f)`` array).

    In ``falsa`` mode the bag's patch tokens are clustered once, on H^(0)
    (or the raw features with ``cluster_space="raw"``), and that assignment
    is reused by every layer unless ``recluster_per_layer`` is set. Pass
    ``assignment`` to skip clustering entirely.
    """
    x = _bag_tokens(bag)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"bag must be a non-empty (N, d_f) matrix, got shape {x.shape}")
    if x.shape[1] != config.d_f:
        raise ShapeError(f"bag has d_f={x.shape[1]}, model expects {config.d_f}")
    nx.check_finite(x, "bag tokens")
    n = x.shape[0]

    z = x @ params["embed.weight"] + params["embed.bias"]
    embedded = nx.gelu(z)
    h = np.vstack([params["cls_token"][None, :], embedded])

    mode = config.attention_mode
    if mode == "falsa" and assignment is None and not config.recluster_per_layer:
        assignment = _cluster(x if config.cluster_space == "raw" else embedded, config)
    if assignment is not None and len(assignment.ids) != n:
        raise ShapeError(f"assignment covers {len(assignment.ids)} tokens, bag has {n}")
    n_landmarks = min(config.segments + 1, n + 1) if mode == "nystrom" else None

    hidden = [h]
    layer_traces = []
    for i in range(config.layers):
        normed, ln_cache = nx.layer_norm(h, params[f"layers.{i}.norm.gamma"],
                                         params[f"layers.{i}.norm.beta"], config.ln_eps,
                                         return_cache=True)
        layer_assignment = assignment
        if mode == "falsa" and config.recluster_per_layer:
            layer_assignment = _cluster(normed[1:], config)
        attn_out, cache = attend_forward(
            normed, params.attention(i, config.heads), mode, layer_assignment, n_landmarks,
            config.pinv_iters, config.oracle_pinv, retain=retain)
        h = h + attn_out
        hidden.append(h)
        layer_traces.append(LayerTrace(ln_cache if retain else None, normed if retain else None,
                                       cache, layer_assignment, n_landmarks))

    cls_normed, final_cache = nx.layer_norm(h[0:1], params["final_norm.gamma"],
                                            params["final_norm.beta"], config.ln_eps,
                                            return_cache=True)
    logits = (cls_normed @ params["classifier.weight"] + params["classifier.bias"])[0]
    nx.check_finite(logits, "logits")
    return ForwardTrace(hidden, layer_traces, logits, x if retain else None, z if retain else None,
                        final_cache, cls_normed, config, retain)


def softmax(logits):
    return nx.softmax_rows(np.asarray(logits, dtype=np.float64)[None, :])[0]


def predict(bag, params, config, assignment=None):
    """Returns ``(label, probabilities)``; ties go to the lowest class index."""
    trace = forward(bag, params, config, assignment, retain=False)
    probs = softmax(trace.logits)
    return int(np.argmax(probs)), probs


# --------------------------------------------------------------------------
# checkpoints
#
# Layout:
#   FALFORMER-CKPT\n
#   version=1\n
#   <ModelConfig as key=repr(value) lines>
#   [optimizer key=repr(value) lines, prefixed "opt.", when present]
#   end\n
#   parameters: little-endian float64, param_shapes() order, row-major
#   optimizer (when present): u64 step, then first moments, then second
#   moments, each in param_shapes() order


def save_checkpoint(path, config, params, optimizer=None):
    params.check(config)
    header = [CKPT_MAGIC, f"version={CKPT_VERSION}\n".encode(), config.to_text().encode()]
    if optimizer is not None:
        for key, value in optimizer.hyperparams().items():
            header.append(f"opt.{key}={value!r}\n".encode())
    header.append(b"end\n")
    order = list(param_shapes(config))
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        for name in order:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
        if optimizer is not None:
            fh.write(struct.pack("<Q", optimizer.step))
            for bank in (optimizer.m, optimizer.v):
                for name in order:
                    fh.write(np.ascontiguousarray(bank[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(config, params, optimizer_state_or_None)``."""
    from .training import OptimizerState

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a falformer checkpoint")
    end = data.find(b"\nend\n")
    if end < 0:
        raise CheckpointError("checkpoint header is not terminated")
    lines = data[len(CKPT_MAGIC):end + 1].decode("utf-8").splitlines()
    if not lines or lines[0] != f"version={CKPT_VERSION}":
        raise CheckpointError(f"unsupported checkpoint version line {lines[:1]}")
    cfg_lines = [ln for ln in lines[1:] if not ln.startswith("opt.")]
    opt_lines = [ln[4:] for ln in lines[1:] if ln.startswith("opt.")]
    config = ModelConfig.from_text("\n".join(cfg_lines))
    shapes = param_shapes(config)
    offset = end + len(b"\nend\n")

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise CheckpointError("checkpoint payload is truncated")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr.astype(np.float64)

    params = ModelParams({name: take(shape) for name, shape in shapes.items()})
    optimizer = None
    if opt_lines:

        hyper = {}
        for line in opt_lines:
            key, _, raw = line.partition("=")
            hyper[key] = ast.literal_eval(raw)
        if offset + 8 > len(data):
            raise CheckpointError("checkpoint optimizer block is truncated")
        (step,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        m = {name: take(shape) for name, shape in shapes.items()}
        v = {name: take(shape) for name, shape in shapes.items()}
        optimizer = OptimizerState(m=m, v=v, step=step, **hyper)
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} unexpected trailing bytes in checkpoint")
    params.check(config)
    return config, params, optimizer
