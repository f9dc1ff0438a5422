"""Conditional vector-field network v(t, x_t, c).

A small UNet built on :mod:`radioflow.numeric`. The condition map passes
through a convolutional stem whose output is concatenated with the noisy
input; each stage is two conv -> group-norm -> SiLU layers with a residual
path and a per-sample FiLM modulation from the time embedding. An optional
spatial-attention head gates the decoder output using channel mean/max of
the decoder and condition features.

Parameters live in plain ``dict[str, np.ndarray]`` so they can be
checkpointed, averaged and perturbed without touching the network code.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Mapping

import numpy as np

from . import numeric as nm
from .numeric import ConfigurationError, Tensor

CKPT_MAGIC = b"RFCK"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: Literal["lite", "full"] = "lite"
    base_channels: int = 16
    depth: int = 2
    use_spatial_attention: bool = True
    cond_channels: int = 2
    time_embed_dim: int = 32
    attention_kernel: int = 7
    # v = net(x_t, t, c) - x_t; at t = 0 the net then regresses x1 directly
    output_skip: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.base_channels < 4:
            raise ConfigurationError("base_channels must be >= 4")
        if self.cond_channels not in (2, 3):
            raise ConfigurationError("cond_channels must be 2 (SRM) or 3 (DRM)")
        if self.time_embed_dim % 2:
            raise ConfigurationError("time_embed_dim must be even")

    @classmethod
    def lite(cls, **kw) -> "ModelConfig":
        return cls(**{"variant": "lite", "base_channels": 16, "depth": 2, **kw})

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**{"variant": "full", "base_channels": 32, "depth": 3, **kw})

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]

    def check_spatial(self, H: int, W: int) -> None:
        f = 2**self.depth
        if H % f or W % f:
            raise ConfigurationError(f"spatial size {H}x{W} not divisible by 2^depth = {f}")


def norm_groups(channels: int) -> int:
    """8 groups, or one per channel below 8 channels."""
    return math.gcd(channels, 8)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_k), cos(t w_k)]`` with w_k geometric in [1, 1e4].

    Accepts a scalar (returns (dim,)) or a (B,) array (returns (B, dim)).
    """
    if dim % 2 or dim < 2:
        raise ConfigurationError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.geomspace(1.0, 1e4, half) if half > 1 else np.ones(1)
    t_arr = np.asarray(t, dtype=np.float64)
    ang = t_arr[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# -- parameters --------------------------------------------------------------


def _conv_spec(cin: int, cout: int, k: int) -> dict[str, tuple]:
    return {"w": (cout, cin, k, k), "b": (cout,)}


def _res_spec(cin: int, cout: int, temb: int) -> dict[str, tuple]:
    spec = {
        "conv1.w": (cout, cin, 3, 3),
        "conv1.b": (cout,),
        "norm1.g": (cout,),
        "norm1.b": (cout,),
        "film_scale.w": (temb, cout),
        "film_scale.b": (cout,),
        "film_shift.w": (temb, cout),
        "film_shift.b": (cout,),
        "conv2.w": (cout, cout, 3, 3),
        "conv2.b": (cout,),
        "norm2.g": (cout,),
        "norm2.b": (cout,),
    }
    if cin != cout:
        spec["skip.w"] = (cout, cin, 1, 1)
        spec["skip.b"] = (cout,)
    return spec


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map for every parameter of ``cfg``."""
    base, D = cfg.base_channels, cfg.time_embed_dim
    chans = cfg.stage_channels()
    shapes: dict[str, tuple] = {}

    def put(prefix, spec):
        for k, v in spec.items():
            shapes[f"{prefix}.{k}"] = v

    put("time_mlp", {"w": (D, D), "b": (D,)})
    put("cond_stem", _conv_spec(cfg.cond_channels, base, 3))
    put("in_conv", _conv_spec(1 + base, base, 3))
    cin = base
    for i, ch in enumerate(chans):
        put(f"enc{i}", _res_spec(cin, ch, D))
        cin = ch
    put("mid", _res_spec(cin, cin, D))
    for i in reversed(range(cfg.depth)):
        put(f"dec{i}", _res_spec(cin + chans[i], chans[i], D))
        cin = chans[i]
    if cfg.use_spatial_attention:
        put("attn", _conv_spec(2, 1, cfg.attention_kernel))
    put("out_conv", _conv_spec(base, 1, 3))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, out_gain: float = 0.01) -> dict[str, np.ndarray]:
    """Fan-in uniform kernels, zero biases, unit norm gains.

    The output conv is scaled by ``out_gain`` so the initial field is close
    to zero while every parameter still receives gradient.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if name.endswith("norm1.g") or name.endswith("norm2.g"):
            params[name] = np.ones(shape)
        elif leaf == "b":
            params[name] = np.zeros(shape)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            gain = out_gain if name.startswith("out_conv") else 1.0
            params[name] = nm.fan_in_uniform(rng, shape, fan_in, gain)
        else:
            params[name] = nm.fan_in_uniform(rng, shape, shape[0])
    return params


def count_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(p).size for p in params.values()))


# -- network -----------------------------------------------------------------


def _conv(p, prefix, x, padding):
    return nm.conv2d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], stride=1, padding=padding)


def _linear(p, prefix, x):
    return nm.add_row_bias(nm.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def _res_block(p, prefix, x: Tensor, temb: Tensor) -> Tensor:
    cout = p[f"{prefix}.conv1.b"].shape[0]
    g = norm_groups(cout)
    h = _conv(p, f"{prefix}.conv1", x, 1)
    h = nm.group_normalize(h, g, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
    h = nm.channel_affine(h, _linear(p, f"{prefix}.film_scale", temb), _linear(p, f"{prefix}.film_shift", temb))
    h = nm.silu(h)
    h = _conv(p, f"{prefix}.conv2", h, 1)
    h = nm.group_normalize(h, g, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
    h = nm.silu(h)
    skip = _conv(p, f"{prefix}.skip", x, 0) if f"{prefix}.skip.w" in p else x
    return nm.add(h, skip)


def condition_embed(cfg: ModelConfig, p, c) -> Tensor:
    """Convolutional stem mapping the condition channels to ``base_channels``."""
    c = c if isinstance(c, Tensor) else Tensor(c)
    if c.data.ndim != 4 or c.shape[1] != cfg.cond_channels:
        raise ConfigurationError(
            f"condition has shape {c.shape}; model expects {cfg.cond_channels} condition channels"
        )
    return _conv(p, "cond_stem", c, 1)


def attention_gate(p, features: Tensor, cond_features: Tensor, prefix: str = "attn") -> Tensor:
    """Spatial gate in (0, 1): sigmoid(conv([mean_c; max_c] of [features; cond]))."""
    if features.shape[0] != cond_features.shape[0] or features.shape[2:] != cond_features.shape[2:]:
        raise ConfigurationError(f"attention inputs differ spatially: {features.shape} vs {cond_features.shape}")
    both = nm.concat_channels([features, cond_features])
    pooled = nm.concat_channels([nm.mean_over_channels(both), nm.max_over_channels(both)])
    k = p[f"{prefix}.w"].shape[-1]
    return nm.sigmoid(_conv(p, prefix, pooled, k // 2))


def spatial_attention(p, features: Tensor, cond_features: Tensor, gate_override=None) -> Tensor:
    g = attention_gate(p, features, cond_features) if gate_override is None else gate_override
    return nm.gate(features, g)


def forward(cfg: ModelConfig, params: Mapping, x_t, t, c) -> Tensor:
    """Vector field for a batch: x_t (B, 1, H, W), t (B,) or scalar, c (B, Cc, H, W).

    ``params`` may hold ndarrays or Tensors; pass Tensors with
    ``requires_grad=True`` inside a :class:`~radioflow.numeric.Tape` to
    differentiate.
    """
    p = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ConfigurationError(f"x_t must be (B, 1, H, W), got {x.shape}")
    B, _, H, W = x.shape
    cfg.check_spatial(H, W)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))

    temb = nm.silu(_linear(p, "time_mlp", Tensor(time_embedding(t_arr, cfg.time_embed_dim))))
    e = condition_embed(cfg, p, c)
    if e.shape[0] != B or e.shape[2:] != (H, W):
        raise ConfigurationError(f"condition batch/spatial shape {e.shape} does not match x_t {x.shape}")
    h = _conv(p, "in_conv", nm.concat_channels([x, e]), 1)
    skips = []
    for i in range(cfg.depth):
        h = _res_block(p, f"enc{i}", h, temb)
        skips.append(h)
        h = nm.downsample_avg_2x(h)
    h = _res_block(p, "mid", h, temb)
    for i in reversed(range(cfg.depth)):
        h = nm.upsample_nearest_2x(h)
        h = _res_block(p, f"dec{i}", nm.concat_channels([h, skips[i]]), temb)
    if cfg.use_spatial_attention:
        h = spatial_attention(p, h, e)
    out = _conv(p, "out_conv", h, 1)
    return nm.sub(out, x) if cfg.output_skip else out


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, with_ema: bool = True) -> "ModelState":
        params = init_params(config, seed)
        ema = {k: v.copy() for k, v in params.items()} if with_ema else None
        return cls(config, params, ema)

    def weights(self, use_ema: bool = True) -> dict[str, np.ndarray]:
        return self.ema if (use_ema and self.ema is not None) else self.params

    def field(self, use_ema: bool = True):
        """Plain-array vector field ``v(x, t, c)`` for inference."""
        w = self.weights(use_ema)
        cfg = self.config

        def v(x, t, c):
            return forward(cfg, w, x, t, c).data

        return v


# -- checkpoints -------------------------------------------------------------


def _pack_params(buf: list[bytes], params: Mapping[str, np.ndarray]) -> None:
    buf.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.append(struct.pack("<H", len(nb)) + nb)
        buf.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(arr.tobytes())


def encode_checkpoint(state: ModelState, extra: dict | None = None) -> bytes:
    cfg = json.dumps({"model": asdict(state.config), "extra": extra or {}}).encode("utf-8")
    buf = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg]
    _pack_params(buf, state.params)
    buf.append(struct.pack("<B", state.ema is not None))
    if state.ema is not None:
        _pack_params(buf, state.ema)
    return b"".join(buf)


def decode_checkpoint(data: bytes) -> tuple[ModelState, dict]:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    try:
        version, n = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 10
        meta = json.loads(data[off : off + n].decode("utf-8"))
        off += n

        def unpack(off):
            (count,) = struct.unpack_from("<I", data, off)
            off += 4
            out = {}
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", data, off)
                off += 2
                name = data[off : off + ln].decode("utf-8")
                off += ln
                (ndim,) = struct.unpack_from("<B", data, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}I", data, off)
                off += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                if off + 8 * size > len(data):
                    raise CheckpointError(f"truncated data for parameter {name}")
                out[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).astype(np.float64)
                off += 8 * size
            return out, off

        params, off = unpack(off)
        (has_ema,) = struct.unpack_from("<B", data, off)
        off += 1
        ema = None
        if has_ema:
            ema, off = unpack(off)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    cfg = ModelConfig(**meta["model"])
    expected = parameter_shapes(cfg)
    for name, arr in params.items():
        if expected.get(name) != arr.shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, config expects {expected.get(name)}")
    if ema is not None and {k: v.shape for k, v in ema.items()} != {k: v.shape for k, v in params.items()}:
        raise CheckpointError("EMA parameters do not match model parameters")
    return ModelState(cfg, params, ema), meta.get("extra", {})


def save_checkpoint(state: ModelState, path: Path, extra: dict | None = None) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(state, extra)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path) -> tuple[ModelState, dict]:
    return decode_checkpoint(Path(path).read_bytes())
