"""Image-to-voxel network with a domain classifier and a voxel classifier.

Layout::

    image -> encoder (stride-2 conv/BN/ELU stages, dense) -> latent
    latent -> decoder (dense seed volume, transposed-conv/BN/ReLU stages) -> raw voxel
    raw voxel -> refiner (down, up, skip concat) -> refined voxel
    latent -> GRL -> domain head (dense 64, ReLU, dense 1)
    refined voxel -> class head (dense 100, ReLU, dense 20, ReLU, dense K)

Parameters live in a flat name -> Tensor mapping (:class:`ModelParams`); the
first dotted component of each name is the owning submodule.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

SUBMODULES = ("encoder", "decoder", "refiner", "domain_head", "class_head")
CLASS_HIDDEN = (100, 20)
DOMAIN_HIDDEN = 64
CONV_K = 4  # stride-2 downsampling: k=4, pad=1 halves extents
UP_K = 2  # stride-2 transposed stages: k=2, pad=0 doubles extents without overlap
PROB_EPS = 1e-6
LATENT_ACTIVATIONS = ("tanh", "l2", "linear")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 32
    image_channels: int = 3
    voxel_size: int = 16
    num_classes: int = 6
    latent_dim: int = 128
    refiner_enabled: bool = True
    channel_widths: Tuple[int, ...] = (16, 32, 64, 128)
    refiner_channels: int = 8
    latent_activation: str = "l2"  # tanh | l2 | linear

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        if not (_is_pow2(self.image_size) and self.image_size >= 8):
            raise ValueError(f"image_size must be a power of two >= 8, got {self.image_size}")
        if not (_is_pow2(self.voxel_size) and self.voxel_size >= 8):
            raise ValueError(f"voxel_size must be a power of two >= 8, got {self.voxel_size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.latent_dim < 8:
            raise ValueError("latent_dim must be >= 8")
        if self.latent_activation not in LATENT_ACTIVATIONS:
            raise ValueError(f"latent_activation must be one of {LATENT_ACTIVATIONS}, got {self.latent_activation!r}")
        if not self.channel_widths or min(self.channel_widths) < 1:
            raise ValueError("channel_widths must be non-empty and positive")

    def width(self, i: int) -> int:
        return self.channel_widths[min(i, len(self.channel_widths) - 1)]

    @property
    def encoder_stages(self) -> int:
        return int(math.log2(self.image_size // 4))

    @property
    def decoder_stages(self) -> int:
        return int(math.log2(self.voxel_size // 2))

    def to_json(self) -> str:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown NetworkConfig keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class ModelParams:
    """Trainable tensors plus batch-norm running statistics."""

    tensors: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def owner(name: str) -> str:
        return name.split(".", 1)[0]

    def by_owner(self, owner: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if self.owner(k) == owner}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def arrays(self) -> Dict[str, np.ndarray]:
        """Every tensor and buffer as a numpy array, in a deterministic order."""
        out = {k: v.data for k, v in self.tensors.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


@dataclass
class ForwardOutputs:
    latent: Tensor
    voxel_raw: Tensor
    voxel_refined: Tensor
    domain_logits: Optional[Tensor] = None
    class_logits: Optional[Tensor] = None


# ---------------------------------------------------------------------------
# parameter layout and initialization
# ---------------------------------------------------------------------------

def _layer_specs(config: NetworkConfig) -> List[Tuple[str, tuple, int, str]]:
    """(name, shape, fan_in, kind) for every tensor; kind in weight/bias/gamma/beta."""
    specs = []

    def dense(name, n_in, n_out):
        specs.append((f"{name}.weight", (n_in, n_out), n_in, "weight"))
        specs.append((f"{name}.bias", (n_out,), n_in, "bias"))

    def bn(name, c):
        specs.append((f"{name}.gamma", (c,), c, "gamma"))
        specs.append((f"{name}.beta", (c,), c, "beta"))

    k3 = CONV_K ** 3
    u3 = UP_K ** 3
    c_in = config.image_channels
    for i in range(config.encoder_stages):
        c_out = config.width(i)
        specs.append((f"encoder.conv{i}.weight", (c_out, c_in, CONV_K, CONV_K), c_in * CONV_K * CONV_K, "weight"))
        bn(f"encoder.bn{i}", c_out)
        c_in = c_out
    dense("encoder.fc", c_in * 16, config.latent_dim)

    n_dec = config.decoder_stages
    dec_ch = [config.width(n_dec - 1 - j) for j in range(n_dec)] + [max(config.width(0) // 2, 4)]
    dense("decoder.fc", config.latent_dim, dec_ch[0] * 8)
    for j in range(n_dec):
        specs.append((f"decoder.deconv{j}.weight", (dec_ch[j], dec_ch[j + 1], UP_K, UP_K, UP_K),
                      dec_ch[j] * u3, "weight"))
        bn(f"decoder.bn{j}", dec_ch[j + 1])
    specs.append(("decoder.out.weight", (1, dec_ch[-1], 1, 1, 1), dec_ch[-1], "weight"))
    specs.append(("decoder.out.bias", (1,), dec_ch[-1], "bias"))

    if config.refiner_enabled:
        rc = config.refiner_channels
        specs.append(("refiner.down.weight", (rc, 1, CONV_K, CONV_K, CONV_K), k3, "weight"))
        bn("refiner.bn_down", rc)
        specs.append(("refiner.up.weight", (rc, rc, UP_K, UP_K, UP_K), rc * u3, "weight"))
        bn("refiner.bn_up", rc)
        specs.append(("refiner.out.weight", (1, rc + 1, 1, 1, 1), rc + 1, "weight"))
        specs.append(("refiner.out.bias", (1,), rc + 1, "bias"))

    dense("domain_head.fc0", config.latent_dim, DOMAIN_HIDDEN)
    dense("domain_head.fc1", DOMAIN_HIDDEN, 1)

    widths = [config.voxel_size ** 3, *CLASS_HIDDEN, config.num_classes]
    for i in range(len(widths) - 1):
        dense(f"class_head.fc{i}", widths[i], widths[i + 1])
    return specs


def _bn_names(config: NetworkConfig) -> List[Tuple[str, int]]:
    return [(name[: -len(".gamma")], shape[0]) for name, shape, _, kind in _layer_specs(config)
            if kind == "gamma"]


def init_params(config: NetworkConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform weights (bound ``sqrt(6 / fan_in)``), zero biases, BN gamma=1 beta=0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in, kind in _layer_specs(config):
        if kind == "weight":
            bound = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif kind == "gamma":
            arr = np.ones(shape, np.float32)
        else:
            arr = np.zeros(shape, np.float32)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=np.float32)
    buffers = {}
    for name, c in _bn_names(config):
        buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        buffers[f"{name}.running_var"] = np.ones(c, np.float32)
    return ModelParams(tensors, buffers)


def fan_in_bounds(config: NetworkConfig) -> Dict[str, float]:
    return {name: math.sqrt(6.0 / fan_in) for name, _, fan_in, kind in _layer_specs(config) if kind == "weight"}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _dense(x: Tensor, params: ModelParams, name: str, frozen: bool = False) -> Tensor:
    w = params.tensors[f"{name}.weight"]
    b = params.tensors[f"{name}.bias"]
    if frozen:
        w, b = w.detach(), b.detach()
    y = T.matmul(x, w)
    return y + T.expand(T.reshape(b, (1, b.shape[0])), y.shape)


def _bn(x: Tensor, params: ModelParams, name: str, mode: str, stat_rows: Optional[int] = None) -> Tensor:
    return T.batchnorm(
        x, params.tensors[f"{name}.gamma"], params.tensors[f"{name}.beta"], mode,
        params.buffers[f"{name}.running_mean"], params.buffers[f"{name}.running_var"],
        stat_rows=stat_rows if mode == "train" else None)


def _add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    shape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    return x + T.expand(T.reshape(b, shape), x.shape)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def encode(images, params: ModelParams, config: NetworkConfig, mode: str = "eval",
           stat_rows: Optional[int] = None) -> Tensor:
    """Images (n, C, H, W) -> latent features (n, d).

    ``stat_rows`` restricts train-mode batch statistics to the leading rows.
    """
    _check_mode(mode)
    x = _as_input(images)
    expected = (config.image_channels, config.image_size, config.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise T.ShapeError(f"encode: expected images of shape (n, {', '.join(map(str, expected))}), got {x.shape}")
    for i in range(config.encoder_stages):
        x = T.conv2d(x, params.tensors[f"encoder.conv{i}.weight"], stride=2, pad=1)
        x = T.elu(_bn(x, params, f"encoder.bn{i}", mode, stat_rows))
    x = T.reshape(x, (x.shape[0], -1))
    z = _dense(x, params, "encoder.fc")
    # a bounded latent keeps the reversed domain gradient from inflating features without limit
    if config.latent_activation == "tanh":
        return T.tanh(z)
    if config.latent_activation == "l2":
        return T.scale(T.l2_normalize(z, axis=1), math.sqrt(config.latent_dim))
    return z


def _decode_logits(latent: Tensor, params: ModelParams, config: NetworkConfig, mode: str,
                   stat_rows: Optional[int]) -> Tensor:
    _check_mode(mode)
    if latent.ndim != 2 or latent.shape[1] != config.latent_dim:
        raise T.ShapeError(f"decode: expected latent of width {config.latent_dim}, got {latent.shape}")
    n = latent.shape[0]
    seed = T.relu(_dense(latent, params, "decoder.fc"))
    x = T.reshape(seed, (n, -1, 2, 2, 2))
    for j in range(config.decoder_stages):
        x = T.conv_transpose3d(x, params.tensors[f"decoder.deconv{j}.weight"], stride=2)
        x = T.relu(_bn(x, params, f"decoder.bn{j}", mode, stat_rows))
    x = T.conv3d(x, params.tensors["decoder.out.weight"])
    x = _add_channel_bias(x, params.tensors["decoder.out.bias"])
    v = config.voxel_size
    return T.reshape(x, (n, v, v, v))


def decode(latent: Tensor, params: ModelParams, config: NetworkConfig, mode: str = "eval",
           stat_rows: Optional[int] = None) -> Tensor:
    """Latent (n, d) -> voxel occupancy probabilities (n, V, V, V)."""
    return T.sigmoid(_decode_logits(latent, params, config, mode, stat_rows))


def refine(voxel: Tensor, params: ModelParams, config: NetworkConfig, mode: str = "eval",
           stat_rows: Optional[int] = None) -> Tensor:
    """Single-level U-Net style refinement; identity when the refiner is disabled.

    The skip path concatenates the input grid with the upsampled features, and the
    predicted correction is added in logit space before the final sigmoid.
    """
    _check_mode(mode)
    v = config.voxel_size
    if voxel.ndim != 4 or voxel.shape[1:] != (v, v, v):
        raise T.ShapeError(f"refine: expected (n, {v}, {v}, {v}) grid, got {voxel.shape}")
    if not config.refiner_enabled:
        return voxel
    n = voxel.shape[0]
    x0 = T.reshape(voxel, (n, 1, v, v, v))
    h = T.conv3d(x0, params.tensors["refiner.down.weight"], stride=2, pad=1)
    h = T.relu(_bn(h, params, "refiner.bn_down", mode, stat_rows))
    h = T.conv_transpose3d(h, params.tensors["refiner.up.weight"], stride=2)
    h = T.relu(_bn(h, params, "refiner.bn_up", mode, stat_rows))
    h = T.concat([h, x0], axis=1)
    delta = _add_channel_bias(T.conv3d(h, params.tensors["refiner.out.weight"]),
                              params.tensors["refiner.out.bias"])
    p = T.clip(x0, PROB_EPS, 1.0 - PROB_EPS)
    logit = T.log(p) - T.log(1.0 - p)
    return T.reshape(T.sigmoid(logit + delta), (n, v, v, v))


def classify_domain(latent: Tensor, params: ModelParams, config: NetworkConfig, grl_lambda: float) -> Tensor:
    """GRL -> dense(64) -> ReLU -> dense(1); returns (n, 1) logits."""
    if latent.ndim != 2 or latent.shape[1] != config.latent_dim:
        raise T.ShapeError(f"classify_domain: expected latent width {config.latent_dim}, got {latent.shape}")
    h = T.grl(latent, grl_lambda)
    h = T.relu(_dense(h, params, "domain_head.fc0"))
    return _dense(h, params, "domain_head.fc1")


def classify_voxel(voxel: Tensor, params: ModelParams, config: NetworkConfig, frozen: bool = False) -> Tensor:
    """Flattened grid -> dense(100) -> ReLU -> dense(20) -> ReLU -> dense(K).

    With ``frozen=True`` the head weights are treated as constants, so the
    gradient only reaches ``voxel``.
    """
    v = config.voxel_size
    if voxel.ndim != 4 or voxel.shape[1:] != (v, v, v):
        raise T.ShapeError(f"classify_voxel: expected (n, {v}, {v}, {v}) grid, got {voxel.shape}")
    h = T.reshape(voxel, (voxel.shape[0], v ** 3))
    n_layers = len(CLASS_HIDDEN) + 1
    for i in range(n_layers):
        h = _dense(h, params, f"class_head.fc{i}", frozen)
        if i < n_layers - 1:
            h = T.relu(h)
    return h


def forward_full(images, params: ModelParams, config: NetworkConfig, grl_lambda: float = 1.0,
                 mode: str = "eval", heads: bool = True) -> ForwardOutputs:
    """Encoder, decoder, refiner and (unless ``heads=False``) both classifier heads."""
    latent = encode(images, params, config, mode)
    raw = decode(latent, params, config, mode)
    refined = refine(raw, params, config, mode)
    out = ForwardOutputs(latent=latent, voxel_raw=raw, voxel_refined=refined)
    if heads:
        out.domain_logits = classify_domain(latent, params, config, grl_lambda)
        out.class_logits = classify_voxel(refined, params, config)
    return out


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"VXDA"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or of an unsupported version."""


def checkpoint_bytes(config: NetworkConfig, params: ModelParams) -> bytes:
    """Serialize to the VXDA container (all integers little-endian uint32)."""
    buf = io.BytesIO()
    cfg = config.to_json().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    arrays = params.arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, config: NetworkConfig, params: ModelParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(config, params))


def _read(buf: memoryview, pos: int, n: int) -> Tuple[memoryview, int]:
    if pos + n > len(buf):
        raise CheckpointError(f"checkpoint truncated at byte {pos} (wanted {n} more)")
    return buf[pos:pos + n], pos + n


def parse_checkpoint(data: bytes) -> Tuple[NetworkConfig, ModelParams]:
    buf = memoryview(data)
    magic, pos = _read(buf, 0, 4)
    if bytes(magic) != MAGIC:
        raise CheckpointError(f"bad magic {bytes(magic)!r}")
    head, pos = _read(buf, pos, 8)
    version, cfg_len = struct.unpack("<II", head)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg, pos = _read(buf, pos, cfg_len)
    config = NetworkConfig.from_dict(json.loads(bytes(cfg).decode("utf-8")))
    raw, pos = _read(buf, pos, 4)
    (count,) = struct.unpack("<I", raw)
    arrays = {}
    for _ in range(count):
        raw, pos = _read(buf, pos, 4)
        (nlen,) = struct.unpack("<I", raw)
        name, pos = _read(buf, pos, nlen)
        raw, pos = _read(buf, pos, 4)
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _read(buf, pos, 4 * rank)
        shape = struct.unpack(f"<{rank}I", raw)
        payload, pos = _read(buf, pos, 4 * int(np.prod(shape, dtype=np.int64)))
        arrays[bytes(name).decode("utf-8")] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last record")

    expected = init_params(config, 0)
    missing = set(expected.arrays()) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    params = ModelParams(
        {k: Tensor(arrays[k], requires_grad=True, dtype=np.float32) for k in expected.tensors},
        {k: arrays[k].copy() for k in expected.buffers},
    )
    return config, params


def load_checkpoint(path) -> Tuple[NetworkConfig, ModelParams]:
    return parse_checkpoint(Path(path).read_bytes())
