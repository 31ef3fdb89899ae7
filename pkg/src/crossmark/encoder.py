"""The twin patch encoder: six conv/group-norm/leaky-ReLU blocks + two MLPs.

Both volumes get an encoder of identical architecture but independent
parameters. Input is a 42x42 image with the 3 series slices as channels;
output is a 32-dimensional feature vector (not unit-normalized; cosine
similarity normalizes downstream).

Committed downsampling plan: strides (1, 2, 1, 2, 1, 2) with 3x3 kernels
and padding 1, so spatial sizes run 42 -> 42 -> 21 -> 21 -> 11 -> 11 -> 6
and the flattened 32*6*6 = 1152 features feed a 64-then-32 MLP.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .patches import PatchSeries

IN_CHANNELS = 3
BLOCKS = (
    # (in_channels, out_channels, stride)
    (3, 64, 1),
    (64, 64, 2),
    (64, 64, 1),
    (64, 32, 2),
    (32, 32, 1),
    (32, 32, 2),
)
GN_GROUPS = 8
LEAKY_SLOPE = 0.01
PATCH_HW = 42
FLAT_FEATURES = 32 * 6 * 6
MLP_SIZES = (64, 32)
FEATURE_DIM = 32


def layer_shapes() -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor."""
    shapes: dict[str, tuple[int, ...]] = {}
    for i, (c_in, c_out, _stride) in enumerate(BLOCKS, start=1):
        shapes[f"block{i}.conv.weight"] = (c_out, c_in, 3, 3)
        shapes[f"block{i}.conv.bias"] = (c_out,)
        shapes[f"block{i}.norm.scale"] = (c_out,)
        shapes[f"block{i}.norm.shift"] = (c_out,)
    shapes["mlp1.weight"] = (MLP_SIZES[0], FLAT_FEATURES)
    shapes["mlp1.bias"] = (MLP_SIZES[0],)
    shapes["mlp2.weight"] = (MLP_SIZES[1], MLP_SIZES[0])
    shapes["mlp2.bias"] = (MLP_SIZES[1],)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith("conv.weight"):
        return shape[1] * shape[2] * shape[3]
    return shape[1]  # linear weight


@dataclass
class EncoderParams:
    """All learnable tensors of one encoder, keyed by layer name."""

    tensors: dict[str, ad.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        expected = layer_shapes()
        if list(self.tensors) != list(expected):
            raise ValueError("EncoderParams: layer names do not match the architecture")
        for name, t in self.tensors.items():
            if tuple(t.data.shape) != expected[name]:
                raise ValueError(f"EncoderParams: {name} has shape {t.data.shape}, expected {expected[name]}")
            if not np.isfinite(t.data).all():
                raise ValueError(f"EncoderParams: {name} contains non-finite values")

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "EncoderParams":
        out = {}
        for name, t in self.tensors.items():
            c = ad.Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out[name] = c
        return EncoderParams(out)


def init_encoder_params(seed: int, dtype=np.float32) -> EncoderParams:
    """Fan-in-scaled uniform weights (bound sqrt(6/fan_in)), zero biases and
    shifts, unit scales; the draw order is the layer order, so the result is
    fully determined by the seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layer_shapes().items():
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(".norm.scale"):
            data = np.ones(shape, dtype=dtype)
        else:  # conv/linear bias, norm shift
            data = np.zeros(shape, dtype=dtype)
        tensors[name] = ad.Tensor(data, requires_grad=True)
    return EncoderParams(tensors)


def encoder_forward(params: EncoderParams, x: ad.Tensor) -> ad.Tensor:
    """Encode a batch of series: (N, 3, 42, 42) -> (N, 32)."""
    if x.data.ndim != 4 or x.data.shape[1:] != (IN_CHANNELS, PATCH_HW, PATCH_HW):
        raise ValueError(f"encoder_forward: input must be (N, 3, 42, 42), got {x.data.shape}")
    h = x
    for i, (_c_in, _c_out, stride) in enumerate(BLOCKS, start=1):
        h = ad.conv2d(h, params[f"block{i}.conv.weight"], params[f"block{i}.conv.bias"], stride=stride)
        h = ad.group_norm(h, params[f"block{i}.norm.scale"], params[f"block{i}.norm.shift"], groups=GN_GROUPS)
        h = ad.leaky_relu(h, LEAKY_SLOPE)
    h = ad.reshape(h, (h.data.shape[0], FLAT_FEATURES))
    h = ad.leaky_relu(ad.linear(h, params["mlp1.weight"], params["mlp1.bias"]), LEAKY_SLOPE)
    return ad.linear(h, params["mlp2.weight"], params["mlp2.bias"])


def encode_batch(params: EncoderParams, pixels: np.ndarray) -> np.ndarray:
    """Inference helper: (N, 3, 42, 42) array -> (N, 32) features, no graph."""
    with ad.no_grad():
        return encoder_forward(params, ad.Tensor(pixels)).data


def encode_series(params: EncoderParams, series: PatchSeries) -> np.ndarray:
    """Feature vector (32,) of one patch series."""
    return encode_batch(params, series.channels_first()[None])[0]


# -- checkpoint persistence ---------------------------------------------------

MANIFEST_NAME = "model.manifest"
PAYLOAD_NAME = "model.bin"


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be loaded or fails validation."""


def _payload_checksum(payload: bytes) -> str:
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def save_checkpoint(directory, params_mri: EncoderParams, params_us: EncoderParams, meta: dict) -> Path:
    """Write `model.manifest` + `model.bin` (concatenated LE float32 payload).

    The manifest records per-layer byte offsets and a 64-bit checksum of the
    payload; ``meta`` holds run provenance (seed, epoch, loss, ...).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks = []
    lines = []
    offset = 0
    for prefix, params in (("mri", params_mri), ("us", params_us)):
        for name, t in params.tensors.items():
            blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            shape = ",".join(str(s) for s in t.data.shape)
            lines.append(f"layer {prefix}/{name} shape={shape} offset={offset} dtype=float32")
            chunks.append(blob)
            offset += len(blob)
    payload = b"".join(chunks)
    header = ["format = crossmark-checkpoint-v1"]
    for key in sorted(meta):
        header.append(f"meta.{key} = {meta[key]}")
    header.append(f"payload_bytes = {len(payload)}")
    header.append(f"checksum = {_payload_checksum(payload)}")
    (directory / PAYLOAD_NAME).write_bytes(payload)
    (directory / MANIFEST_NAME).write_text("\n".join(header + lines) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[EncoderParams, EncoderParams, dict]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    payload_path = directory / PAYLOAD_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest: {manifest_path}")
    if not payload_path.exists():
        raise CheckpointError(f"missing payload: {payload_path}")
    meta: dict = {}
    layers: list[tuple[str, tuple[int, ...], int]] = []
    declared_bytes = None
    checksum = None
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("layer "):
            fields = line.split()
            name = fields[1]
            attrs = dict(f.split("=", 1) for f in fields[2:])
            shape = tuple(int(v) for v in attrs["shape"].split(","))
            if attrs.get("dtype", "float32") != "float32":
                raise CheckpointError(f"{name}: unsupported dtype {attrs.get('dtype')}")
            layers.append((name, shape, int(attrs["offset"])))
        elif line.startswith("meta."):
            key, _, value = line.partition("=")
            meta[key.strip()[5:]] = value.strip()
        elif line.startswith("payload_bytes"):
            declared_bytes = int(line.partition("=")[2])
        elif line.startswith("checksum"):
            checksum = line.partition("=")[2].strip()

    payload = payload_path.read_bytes()
    if declared_bytes is not None and len(payload) < declared_bytes:
        raise CheckpointError(f"truncated payload: {len(payload)} bytes, manifest declares {declared_bytes}")
    if checksum is not None and _payload_checksum(payload) != checksum:
        raise CheckpointError("payload checksum mismatch")

    expected = layer_shapes()
    halves: dict[str, dict[str, ad.Tensor]] = {"mri": {}, "us": {}}
    for full_name, shape, offset in layers:
        prefix, _, name = full_name.partition("/")
        if prefix not in halves or name not in expected:
            raise CheckpointError(f"unknown layer {full_name!r}")
        if shape != expected[name]:
            raise CheckpointError(f"layer {full_name}: shape {shape} does not match architecture {expected[name]}")
        count = int(np.prod(shape))
        blob = payload[offset : offset + 4 * count]
        if len(blob) < 4 * count:
            raise CheckpointError(f"layer {full_name}: truncated payload")
        halves[prefix][name] = ad.Tensor(
            np.frombuffer(blob, dtype="<f4").reshape(shape).copy(), requires_grad=True
        )
    try:
        params_mri = EncoderParams({n: halves["mri"][n] for n in expected})
        params_us = EncoderParams({n: halves["us"][n] for n in expected})
    except KeyError as exc:
        raise CheckpointError(f"manifest is missing layer {exc}") from None
    return params_mri, params_us, meta
