"""
ProstAttFormer and ExpertiseNet assembled from tensor_core ops.

Parameters live in a flat, ordered ``{path: Tensor}`` map (``ModelParams``);
the model config travels with them so a forward pass needs nothing else.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.stats import truncnorm

from . import tensor_core as tc
from .errors import ConfigError, HeadDivisibility, ShapeMismatch
from .heatmap import DEFAULT_GRIDS, GridSpec, Heatmap
from .telemetry import DEFAULT_FEATURE_DIM

INIT_STD = 0.02
EXPERTISE_MODES = ("both", "temporal_only", "magnification_only")
STACK_DEPTH = 4
WEIGHT_NAMES = {"w", "wq", "wk", "wv", "wo", "w1", "w2", "pos"}


# =========================================================
# 1. Configs
# =========================================================

def _grid_dict(grid):
    return {"rows": grid.rows, "cols": grid.cols, "mag_level": grid.mag_level}


@dataclass(frozen=True)
class ProstAttFormerConfig:
    grid: GridSpec
    dim: int = DEFAULT_FEATURE_DIM
    depth: int = 12
    n_heads: int = 8
    mlp_ratio: int = 4
    use_pos: bool = True

    kind = "prostattformer"

    def __post_init__(self):
        if self.dim < 1 or self.n_heads < 1 or self.mlp_ratio < 1 or self.depth < 0:
            raise ConfigError(f"invalid ProstAttFormer config: {self}")
        if self.dim % self.n_heads:
            raise HeadDivisibility(f"embedding dim {self.dim} not divisible by {self.n_heads} heads")

    @property
    def n_tokens(self):
        return self.grid.n_cells

    def to_dict(self):
        d = asdict(self)
        d["grid"] = _grid_dict(self.grid)
        d["kind"] = self.kind
        return d


@dataclass(frozen=True)
class ExpertiseNetConfig:
    grid: GridSpec = DEFAULT_GRIDS["20x"]
    dim: int = DEFAULT_FEATURE_DIM
    n_classes: int = 3
    channels: int = 16
    mode: str = "both"
    pooled: int = 16

    kind = "expertisenet"

    def __post_init__(self):
        if self.n_classes not in (2, 3):
            raise ConfigError(f"n_classes must be 2 or 3, got {self.n_classes}")
        if self.mode not in EXPERTISE_MODES:
            raise ConfigError(f"Unsupported ExpertiseNet mode: {self.mode}")
        if min(self.dim, self.channels, self.pooled) < 1:
            raise ConfigError(f"invalid ExpertiseNet config: {self}")

    @property
    def branches(self):
        if self.mode == "temporal_only":
            return ("wsi", "temporal")
        if self.mode == "magnification_only":
            return ("wsi", "magnification")
        return ("wsi", "temporal", "magnification")

    @property
    def concat_channels(self):
        return self.channels * len(self.branches)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = _grid_dict(self.grid)
        d["kind"] = self.kind
        return d


def config_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    try:
        d["grid"] = GridSpec(**d["grid"])
        if kind == ProstAttFormerConfig.kind:
            return ProstAttFormerConfig(**d)
        if kind == ExpertiseNetConfig.kind:
            return ExpertiseNetConfig(**d)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"invalid model config: {e}")
    raise ConfigError(f"Unsupported model kind: {kind}")


def config_hash(config):
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def linear_probe_config(grid, dim=DEFAULT_FEATURE_DIM):
    """Frozen features + linear decoder: no encoder blocks, no positional embedding."""
    return ProstAttFormerConfig(grid=grid, dim=dim, depth=0, n_heads=1, use_pos=False)


def ablation_variant(config, mode):
    if mode not in EXPERTISE_MODES:
        raise ConfigError(f"Unsupported ExpertiseNet mode: {mode}")
    return replace(config, mode=mode)


# =========================================================
# 2. Parameters
# =========================================================

def param_shapes(config):
    """Ordered {path: shape} for a model config."""
    shapes = {}
    if isinstance(config, ProstAttFormerConfig):
        D, H = config.dim, config.dim * config.mlp_ratio
        if config.use_pos:
            shapes["pos"] = (config.n_tokens, D)
        for i in range(config.depth):
            p = f"blocks.{i}"
            shapes[f"{p}.ln1.gamma"] = (D,)
            shapes[f"{p}.ln1.beta"] = (D,)
            for m in ("q", "k", "v", "o"):
                shapes[f"{p}.attn.w{m}"] = (D, D)
                shapes[f"{p}.attn.b{m}"] = (D,)
            shapes[f"{p}.ln2.gamma"] = (D,)
            shapes[f"{p}.ln2.beta"] = (D,)
            shapes[f"{p}.mlp.w1"] = (D, H)
            shapes[f"{p}.mlp.b1"] = (H,)
            shapes[f"{p}.mlp.w2"] = (H, D)
            shapes[f"{p}.mlp.b2"] = (D,)
        shapes["decoder.w"] = (D, 1)
        shapes["decoder.b"] = (1,)
        return shapes

    if isinstance(config, ExpertiseNetConfig):
        C = config.channels
        in_channels = {"wsi": config.dim, "temporal": STACK_DEPTH, "magnification": STACK_DEPTH}
        for branch in config.branches:
            shapes[f"{branch}_encoder.w"] = (in_channels[branch], C)
            shapes[f"{branch}_encoder.b"] = (C,)
        shapes["decoder.conv.w"] = (config.concat_channels, 1)
        shapes["decoder.conv.b"] = (1,)
        shapes["decoder.fc.w"] = (config.pooled * config.pooled, config.n_classes)
        shapes["decoder.fc.b"] = (config.n_classes,)
        return shapes

    raise ConfigError(f"Unsupported model config: {type(config).__name__}")


@dataclass
class ModelParams:
    config: object
    tensors: dict
    seed: int
    config_hash: str

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    @property
    def names(self):
        return list(self.tensors)

    @property
    def n_params(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def sub(self, prefix):
        """Tensors under ``prefix.`` keyed by their remaining path."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def state(self):
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self):
        tensors = {k: tc.Tensor(t.data, requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()}
        return ModelParams(self.config, tensors, self.seed, self.config_hash)


def _init_kind(name):
    leaf = name.rsplit(".", 1)[-1]
    if leaf in WEIGHT_NAMES:
        return "normal"
    if leaf == "gamma":
        return "ones"
    return "zeros"


def init_params(config, seed):
    """
    Deterministic initialization: truncated normal (std 0.02, cut at 2 std) for
    weights and positional embeddings, zeros for biases and LN beta, ones for LN gamma.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        kind = _init_kind(name)
        if kind == "normal":
            data = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=INIT_STD, size=shape, random_state=rng)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = tc.Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors, seed, config_hash(config))


def params_from_arrays(config, arrays, seed=0):
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ShapeMismatch(f"parameter set does not match config (missing {missing}, extra {extra})")
    tensors = {}
    for name, shape in expected.items():
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, found {a.shape}")
        tensors[name] = tc.Tensor(a, requires_grad=True, name=name)
    return ModelParams(config, tensors, seed, config_hash(config))


# =========================================================
# 3. ProstAttFormer
# =========================================================

def _check_features(features, grid, dim):
    data = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if data.shape != (grid.rows, grid.cols, dim):
        raise ShapeMismatch(f"features {data.shape} do not match grid {grid.shape} with dim {dim}")
    return data


def encoder_block(z, block, n_heads):
    """Pre-norm transformer block: z + MHSA(LN(z)), then z + MLP(LN(z))."""
    h = tc.layer_norm(z, block["ln1.gamma"], block["ln1.beta"])
    attn = {k[len("attn."):]: v for k, v in block.items() if k.startswith("attn.")}
    z = tc.add(z, tc.mhsa(h, attn, n_heads))
    h = tc.layer_norm(z, block["ln2.gamma"], block["ln2.beta"])
    h = tc.gelu(tc.linear(h, block["mlp.w1"], block["mlp.b1"]))
    return tc.add(z, tc.linear(h, block["mlp.w2"], block["mlp.b2"]))


def prostattformer_scores(features, params):
    """Per-token scores (before map normalization) as a graph-building Tensor of shape (N,)."""
    cfg = params.config
    data = _check_features(features, cfg.grid, cfg.dim)
    z = tc.Tensor(data.reshape(cfg.n_tokens, cfg.dim))
    if cfg.use_pos:
        z = tc.add(z, params["pos"])
    for i in range(cfg.depth):
        z = encoder_block(z, params.sub(f"blocks.{i}"), cfg.n_heads)
    score = tc.linear(z, params["decoder.w"], params["decoder.b"])
    return tc.reshape(score, (cfg.n_tokens,))


def prostattformer_forward(features, params):
    """
    Predicted attention heatmap on the config grid, minmax-normalized.

    A constant score map cannot be minmax-normalized; it comes back as a zero
    map flagged "degenerate".
    """
    grid = params.config.grid
    scores = prostattformer_scores(features, params).data.reshape(grid.shape)
    lo, hi = scores.min(), scores.max()
    if not hi > lo:
        logging.warning("ProstAttFormer produced a constant map")
        return Heatmap(grid, np.zeros(grid.shape), "minmax", flag="degenerate")
    return Heatmap(grid, (scores - lo) / (hi - lo), "minmax")


# =========================================================
# 4. ExpertiseNet
# =========================================================

def _stack(maps, grid, name):
    if maps is None:
        raise ShapeMismatch(f"{name} stack is required by this ExpertiseNet mode")
    data = np.array([getattr(m, "values", m) for m in maps], dtype=np.float64)
    if data.shape != (STACK_DEPTH, grid.rows, grid.cols):
        raise ShapeMismatch(f"{name} stack {data.shape} does not match ({STACK_DEPTH}, {grid.rows}, {grid.cols})")
    return data


def expertisenet_logits(features, temporal, magnification, params):
    """Graph-building forward; returns a Tensor of shape (n_classes,)."""
    cfg = params.config
    inputs = {"wsi": _check_features(features, cfg.grid, cfg.dim).transpose(2, 0, 1)}
    if "temporal" in cfg.branches:
        inputs["temporal"] = _stack(temporal, cfg.grid, "temporal")
    if "magnification" in cfg.branches:
        inputs["magnification"] = _stack(magnification, cfg.grid, "magnification")

    encoded = [
        tc.relu(tc.conv1x1(tc.Tensor(inputs[b]), params[f"{b}_encoder.w"], params[f"{b}_encoder.b"]))
        for b in cfg.branches
    ]
    x = tc.avg_pool2d(tc.concat(encoded, axis=0), k=3, stride=2)
    x = tc.relu(tc.conv1x1(x, params["decoder.conv.w"], params["decoder.conv.b"]))
    x = tc.adaptive_avg_pool(x, cfg.pooled, cfg.pooled)
    x = tc.reshape(x, (1, cfg.pooled * cfg.pooled))
    logits = tc.linear(x, params["decoder.fc.w"], params["decoder.fc.b"])
    return tc.reshape(logits, (cfg.n_classes,))


def expertisenet_forward(features, temporal, magnification, params):
    """Class logits as a float64 array; unused stacks may be None."""
    return expertisenet_logits(features, temporal, magnification, params).data.copy()
