"""Network building blocks and the composed few-shot classifier.

Sequence tensors use the channels-first layout ``(..., C, l)``: C features
per position, l = N*k + 1 positions per episode. Windows fed to the
embeddings are ``(..., W, N_S)`` (time-major, as recorded).

Parameters live in a flat ``name -> Tensor`` dict produced by
:func:`init_params`; every layer function takes that dict plus a name prefix.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

__all__ = [
    "EMBEDDING_KINDS",
    "EmbeddingConfig",
    "TemporalBlockConfig",
    "AttentionConfig",
    "ModelConfig",
    "tcn_depth",
    "tcn_dilations",
    "init_params",
    "embed",
    "temporal_block",
    "temporal_conv_net",
    "attention",
    "model_forward",
    "channel_plan",
    "save_model_config",
    "load_model_config",
]

EMBEDDING_KINDS = ("fc", "lstm", "tblock1", "tblock2")


@dataclass
class EmbeddingConfig:
    kind: str = "fc"
    input_channels: int = 12
    window_len: int = 400
    out_dim: int = 128
    hidden_time: int = 100

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ParameterError(f"unknown embedding kind {self.kind!r}; choose from {{{', '.join(EMBEDDING_KINDS)}}}")
        for name in ("input_channels", "window_len", "out_dim", "hidden_time"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"embedding {name} must be positive, got {getattr(self, name)}")

    @property
    def feature_dim(self) -> int:
        """Length of the feature vector produced per window.

        The temporal-block variants keep their residual concatenation, so
        the sensor channels ride along with the learned filters.
        """
        if self.kind == "tblock1":
            return self.input_channels + self.out_dim
        if self.kind == "tblock2":
            return self.input_channels + 2 * self.out_dim
        return self.out_dim


@dataclass
class TemporalBlockConfig:
    c_in: int
    f: int = 128
    k: int = 2
    d: int = 1

    def __post_init__(self):
        if self.d < 1 or self.k < 1 or self.f < 1 or self.c_in < 1:
            raise ParameterError(f"invalid temporal block {self}")

    @property
    def c_out(self) -> int:
        return self.c_in + self.f


@dataclass
class AttentionConfig:
    d_k: int = 64
    d_v: int = 32
    causal_mask: bool = True

    def __post_init__(self):
        if self.d_k <= 0 or self.d_v <= 0:
            raise ParameterError(f"attention widths must be positive, got d_k={self.d_k}, d_v={self.d_v}")


@dataclass
class ModelConfig:
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    n_way: int = 5
    k_shot: int = 1
    tcn_filters: int = 128
    tcn_kernel: int = 2
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1:
            raise ParameterError(f"need n_way >= 2 and k_shot >= 1, got {self.n_way}-way {self.k_shot}-shot")

    @property
    def seq_len(self) -> int:
        return self.n_way * self.k_shot + 1

    @property
    def input_channels(self) -> int:
        return self.embedding.feature_dim + self.n_way


def tcn_depth(l: int) -> int:
    """Number of temporal blocks, ceil(log2 l), computed without floats."""
    if l < 2:
        raise ParameterError(f"temporal conv net needs sequence length >= 2, got {l}")
    return (l - 1).bit_length()


def tcn_dilations(l: int) -> list[int]:
    return [2**i for i in range(tcn_depth(l))]


def channel_plan(cfg: ModelConfig) -> list[tuple[str, int]]:
    """Predicted channel count after every stage of :func:`model_forward`."""
    c = cfg.input_channels
    z = tcn_depth(cfg.seq_len)
    plan = [("input", c)]
    for i in range(4):
        c += cfg.attention.d_v
        plan.append((f"attn{i}", c))
        if i < 3:
            c += z * cfg.tcn_filters
            plan.append((f"tcn{i}", c))
    plan.append(("logits", cfg.n_way))
    return plan


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _uniform(rng, shape, bound, dtype):
    return T.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def _zeros(shape, dtype):
    return T.parameter(np.zeros(shape), dtype=dtype)


def _linear_params(params, prefix, fan_in, fan_out, rng, dtype, gain=1.0):
    params[f"{prefix}.w"] = _uniform(rng, (fan_in, fan_out), gain * math.sqrt(3.0 / fan_in), dtype)
    params[f"{prefix}.b"] = _zeros((fan_out,), dtype)


def _block_params(params, prefix, cfg: TemporalBlockConfig, rng, dtype):
    relu_gain = math.sqrt(2.0)
    params[f"{prefix}.conv1.w"] = _uniform(rng, (cfg.f, cfg.c_in, cfg.k), relu_gain * math.sqrt(3.0 / (cfg.c_in * cfg.k)), dtype)
    params[f"{prefix}.conv1.b"] = _zeros((cfg.f, 1), dtype)
    params[f"{prefix}.conv2.w"] = _uniform(rng, (cfg.f, cfg.f, cfg.k), relu_gain * math.sqrt(3.0 / (cfg.f * cfg.k)), dtype)
    params[f"{prefix}.conv2.b"] = _zeros((cfg.f, 1), dtype)


def _embedding_blocks(cfg: EmbeddingConfig) -> list[TemporalBlockConfig]:
    if cfg.kind == "tblock1":
        return [TemporalBlockConfig(cfg.input_channels, cfg.out_dim, k=3, d=1)]
    if cfg.kind == "tblock2":
        first = TemporalBlockConfig(cfg.input_channels, cfg.out_dim, k=3, d=1)
        return [first, TemporalBlockConfig(first.c_out, cfg.out_dim, k=3, d=2)]
    return []


def init_params(cfg: ModelConfig, rng=None, dtype=np.float32) -> dict[str, Tensor]:
    """Seed-controlled initialization: uniform fan-in scaling, zero biases."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params: dict[str, Tensor] = {}
    emb = cfg.embedding
    relu_gain = math.sqrt(2.0)

    if emb.kind == "fc":
        _linear_params(params, "embed.fc_in", emb.input_channels, emb.out_dim, rng, dtype)
    elif emb.kind == "lstm":
        bound = 1.0 / math.sqrt(emb.out_dim)
        params["embed.lstm.wx"] = _uniform(rng, (emb.input_channels, 4 * emb.out_dim), bound, dtype)
        params["embed.lstm.wh"] = _uniform(rng, (emb.out_dim, 4 * emb.out_dim), bound, dtype)
        params["embed.lstm.b"] = _zeros((4 * emb.out_dim,), dtype)
    else:
        for i, bcfg in enumerate(_embedding_blocks(emb)):
            _block_params(params, f"embed.block{i}", bcfg, rng, dtype)
    _linear_params(params, "embed.time1", emb.window_len, emb.hidden_time, rng, dtype, gain=relu_gain)
    _linear_params(params, "embed.time2", emb.hidden_time, 1, rng, dtype)

    att = cfg.attention
    c = cfg.input_channels
    z = tcn_depth(cfg.seq_len)
    for i in range(4):
        for name, width in (("q", att.d_k), ("k", att.d_k), ("v", att.d_v)):
            _linear_params(params, f"attn{i}.{name}", c, width, rng, dtype)
        # a key bias shifts every score in a row equally; softmax ignores it
        del params[f"attn{i}.k.b"]
        c += att.d_v
        if i < 3:
            for j in range(z):
                bcfg = TemporalBlockConfig(c, cfg.tcn_filters, cfg.tcn_kernel, 2**j)
                _block_params(params, f"tcn{i}.block{j}", bcfg, rng, dtype)
                c = bcfg.c_out
    _linear_params(params, "out", c, cfg.n_way, rng, dtype)
    return params


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _linear(x, params, prefix):
    x = T._as_tensor(x)
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    if x.ndim == 1:  # single vector: lift to a row for matmul
        return T.reshape(T.add(T.matmul(T.reshape(x, (1, x.shape[0])), w), b), (w.shape[1],))
    return T.add(T.matmul(x, w), b)


def temporal_block(x, cfg: TemporalBlockConfig, params, prefix: str) -> Tensor:
    """conv -> ReLU -> conv -> ReLU, then concatenate with the input.

    (..., C_in, l) -> (..., C_in + f, l)
    """
    x = T._as_tensor(x)
    if x.shape[-2] != cfg.c_in:
        raise DimensionError(f"{prefix}: expected {cfg.c_in} input channels, got shape {x.shape}")
    h = T.relu(T.add(T.conv1d_causal(x, params[f"{prefix}.conv1.w"], cfg.d), params[f"{prefix}.conv1.b"]))
    h = T.relu(T.add(T.conv1d_causal(h, params[f"{prefix}.conv2.w"], cfg.d), params[f"{prefix}.conv2.b"]))
    return T.concat_channels(x, h)


def temporal_conv_net(x, params, prefix: str, filters: int = 128, kernel: int = 2) -> Tensor:
    """ceil(log2 l) temporal blocks with dilations 1, 2, 4, ..."""
    x = T._as_tensor(x)
    l = x.shape[-1]
    for j, d in enumerate(tcn_dilations(l)):
        x = temporal_block(x, TemporalBlockConfig(x.shape[-2], filters, kernel, d), params, f"{prefix}.block{j}")
    return x


def causal_mask(l: int) -> np.ndarray:
    return np.tril(np.ones((l, l), dtype=bool))


def attention(x, cfg: AttentionConfig, params, prefix: str) -> Tensor:
    """Scaled dot-product attention over positions; output (..., C + d_v, l)."""
    x = T._as_tensor(x)
    l = x.shape[-1]
    rows = T.swap_last(x)  # (..., l, C)
    q = _linear(rows, params, f"{prefix}.q")
    k = T.matmul(rows, params[f"{prefix}.k.w"])
    v = _linear(rows, params, f"{prefix}.v")
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(cfg.d_k))
    weights = T.softmax_lastdim(scores, causal_mask(l) if cfg.causal_mask else None)
    read = T.matmul(weights, v)  # (..., l, d_v)
    return T.concat_channels(x, T.swap_last(read))


def _time_fcs(feats, params) -> Tensor:
    """Collapse the time axis: (..., D, W) -> FC W->H, ReLU -> FC H->1 -> (..., D)."""
    h = T.relu(_linear(feats, params, "embed.time1"))
    out = _linear(h, params, "embed.time2")
    return T.reshape(out, out.shape[:-1])


def _fc_embed(x, cfg: EmbeddingConfig, params) -> Tensor:
    # The per-timestep FC (N_S -> D) and the first time-axis FC (W -> H) are
    # both linear, so the time FC is applied first on the narrow N_S channels.
    w_in, b_in = params["embed.fc_in.w"], params["embed.fc_in.b"]
    w_t, b_t = params["embed.time1.w"], params["embed.time1.b"]
    mixed = T.matmul(T.swap_last(x), w_t)  # (..., N_S, H)
    proj = T.matmul(T.swap_last(mixed), w_in)  # (..., H, D)
    ones = Tensor(np.ones((1, cfg.window_len), dtype=w_t.dtype))
    col_sums = T.reshape(T.matmul(ones, w_t), (cfg.hidden_time, 1))
    bias = T.add(T.matmul(col_sums, T.reshape(b_in, (1, cfg.out_dim))), T.reshape(b_t, (cfg.hidden_time, 1)))
    h = T.relu(T.add(proj, bias))  # (..., H, D)
    out = _linear(T.swap_last(h), params, "embed.time2")
    return T.reshape(out, out.shape[:-1])


def _lstm_embed(x, cfg: EmbeddingConfig, params) -> Tensor:
    D = cfg.out_dim
    lead = x.shape[:-2]
    xproj = T.add(T.matmul(x, params["embed.lstm.wx"]), params["embed.lstm.b"])  # (..., W, 4D)
    wh = params["embed.lstm.wh"]
    h = Tensor(np.zeros(lead + (1, D), dtype=x.dtype))
    c = Tensor(np.zeros(lead + (1, D), dtype=x.dtype))
    outs = []
    for t in range(cfg.window_len):
        gates = T.add(xproj[..., t : t + 1, :], T.matmul(h, wh))
        i = T.sigmoid(gates[..., 0:D])
        f = T.sigmoid(gates[..., D : 2 * D])
        g = T.tanh(gates[..., 2 * D : 3 * D])
        o = T.sigmoid(gates[..., 3 * D : 4 * D])
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        outs.append(h)
    seq = T.concat(outs, axis=-2)  # (..., W, D)
    return _time_fcs(T.swap_last(seq), params)


def _tblock_embed(x, cfg: EmbeddingConfig, params) -> Tensor:
    h = T.swap_last(x)  # (..., N_S, W)
    for i, bcfg in enumerate(_embedding_blocks(cfg)):
        h = temporal_block(h, bcfg, params, f"embed.block{i}")
    return _time_fcs(h, params)


def embed(windows, cfg: EmbeddingConfig, params) -> Tensor:
    """Map windows (..., W, N_S) to feature vectors (..., feature_dim)."""
    x = T._as_tensor(windows)
    if x.ndim < 2 or x.shape[-2:] != (cfg.window_len, cfg.input_channels):
        raise DimensionError(
            f"embed: window shape {x.shape[-2:]} does not match ({cfg.window_len}, {cfg.input_channels})"
        )
    dtype = params["embed.time1.w"].dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    if cfg.kind == "fc":
        return _fc_embed(x, cfg, params)
    if cfg.kind == "lstm":
        return _lstm_embed(x, cfg, params)
    return _tblock_embed(x, cfg, params)


def model_forward(encoded, cfg: ModelConfig, params, query_index: int = -1) -> Tensor:
    """Attn -> TCN -> Attn -> TCN -> Attn -> TCN -> Attn -> FC on the query slot.

    ``encoded`` is (..., feature_dim + N, l); returns logits (..., N).
    """
    x = T._as_tensor(encoded)
    if x.ndim < 2 or x.shape[-2] != cfg.input_channels:
        raise DimensionError(f"model_forward: expected {cfg.input_channels} input channels, got shape {x.shape}")
    for i in range(4):
        x = attention(x, cfg.attention, params, f"attn{i}")
        if i < 3:
            x = temporal_conv_net(x, params, f"tcn{i}", cfg.tcn_filters, cfg.tcn_kernel)
    if x.shape[-2] != params["out.w"].shape[0]:
        raise DimensionError(
            f"model_forward: {x.shape[-2]} channels reach the output layer, parameters expect {params['out.w'].shape[0]}"
        )
    return _linear(x[..., :, query_index], params, "out")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        if value.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if value.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def dataclass_from_section(cls, section) -> object:
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in section.items():
        if key not in known:
            raise ParameterError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(value, known[key].type)
    return cls(**kwargs)


def model_config_to_ini(cfg: ModelConfig) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    top = {k: v for k, v in asdict(cfg).items() if k not in ("embedding", "attention")}
    cp["model"] = {k: str(v) for k, v in top.items()}
    cp["embedding"] = {k: str(v) for k, v in asdict(cfg.embedding).items()}
    cp["attention"] = {k: str(v) for k, v in asdict(cfg.attention).items()}
    return cp


def model_config_from_ini(cp: configparser.ConfigParser) -> ModelConfig:
    emb = dataclass_from_section(EmbeddingConfig, cp["embedding"]) if cp.has_section("embedding") else EmbeddingConfig()
    att = dataclass_from_section(AttentionConfig, cp["attention"]) if cp.has_section("attention") else AttentionConfig()
    top = {}
    if cp.has_section("model"):
        known = {f.name: f for f in fields(ModelConfig)}
        for key, value in cp["model"].items():
            if key not in known or key in ("embedding", "attention"):
                raise ParameterError(f"unknown key {key!r} in [model]")
            top[key] = _coerce(value, known[key].type)
    return ModelConfig(embedding=emb, attention=att, **top)


def save_model_config(path, cfg: ModelConfig) -> None:
    buf = io.StringIO()
    buf.write("# fshgr model configuration\n")
    model_config_to_ini(cfg).write(buf)
    Path(path).write_text(buf.getvalue())


def load_model_config(path) -> ModelConfig:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return model_config_from_ini(cp)
