"""3D-SepNet and a plain 3D U-Net baseline built from :mod:`sepseg.tensor` ops.

A separable block applies three in-plane 1x3x3 convolutions followed by one
cross-slice 3x1x1 convolution (each with instance norm and ReLU) and adds a
1x1x1 convolution of the block input.  Encoder scales are joined to the
decoder by channel concatenation; a final 1x1x1 convolution and channel
softmax give per-class probabilities.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SEP_CONVS = ((1, 3, 3), (1, 3, 3), (1, 3, 3), (3, 1, 1))
PLAIN_CONVS = ((3, 3, 3), (3, 3, 3))

MAGIC = b"SEPN"
FORMAT_VERSION = 1


@dataclass
class NetworkSpec:
    num_classes: int = 4
    base_channels: int = 48
    num_scales: int = 4
    encoder_blocks: tuple[int, ...] | None = None
    decoder_blocks: tuple[int, ...] | None = None
    block: str = "sep"
    in_channels: int = 1
    pool: tuple[int, int, int] = (1, 2, 2)
    init_seed: int = 0

    def __post_init__(self):
        s = self.num_scales
        if self.encoder_blocks is None:
            self.encoder_blocks = (1,) + (2,) * (s - 1)
        if self.decoder_blocks is None:
            self.decoder_blocks = (2,) * (s - 2) + (1,) if s >= 2 else ()
        self.encoder_blocks = tuple(int(b) for b in self.encoder_blocks)
        self.decoder_blocks = tuple(int(b) for b in self.decoder_blocks)
        self.pool = tuple(int(p) for p in self.pool)
        problems = self.validate()
        if problems:
            raise ValueError("invalid network spec: " + "; ".join(problems))

    def validate(self) -> list[str]:
        problems = []
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.base_channels < 1:
            problems.append("base_channels must be >= 1")
        if self.num_scales < 1:
            problems.append("num_scales must be >= 1")
        if len(self.encoder_blocks) != self.num_scales:
            problems.append(f"encoder_blocks needs {self.num_scales} entries, got {len(self.encoder_blocks)}")
        if len(self.decoder_blocks) != self.num_scales - 1:
            problems.append(f"decoder_blocks needs {self.num_scales - 1} entries, got {len(self.decoder_blocks)}")
        if any(b < 1 for b in self.encoder_blocks + self.decoder_blocks):
            problems.append("every scale needs at least one block")
        if self.block not in ("sep", "plain"):
            problems.append(f"block must be 'sep' or 'plain', got {self.block!r}")
        if len(self.pool) != 3 or any(p < 1 for p in self.pool):
            problems.append(f"pool must be three positive factors, got {self.pool}")
        return problems

    def channels(self, scale: int) -> int:
        return self.base_channels * 2 ** scale

    @property
    def num_blocks(self) -> int:
        return sum(self.encoder_blocks) + sum(self.decoder_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_blocks"] = list(self.encoder_blocks)
        d["decoder_blocks"] = list(self.decoder_blocks)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class Model:
    """Named parameter tensors plus the forward graph of one network."""

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray], dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {
            name: Tensor(np.asarray(a, dtype=self.dtype), requires_grad=True) for name, a in params.items()}
        self._out: Tensor | None = None
        self._check_params()

    def _check_params(self):
        expected = dict(_param_shapes(self.spec))
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter names do not match spec (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    # --- bookkeeping ---------------------------------------------------
    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        return Model(self.spec, self.named_arrays(), dtype)

    # --- computation ----------------------------------------------------
    def check_input(self, shape: tuple) -> None:
        if len(shape) != 5 or shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected input (N, {self.spec.in_channels}, D, H, W), got {shape}")
        factor = [p ** (self.spec.num_scales - 1) for p in self.spec.pool]
        if any(n % f for n, f in zip(shape[2:], factor)):
            raise ShapeError(f"spatial dims {shape[2:]} must be divisible by {tuple(factor)}")

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        self.check_input(x.shape)
        spec, p = self.spec, self.params
        h = x
        skips = []
        for s in range(spec.num_scales):
            if s > 0:
                h = T.max_pool(h, spec.pool)
            for b in range(spec.encoder_blocks[s]):
                h = _block(h, p, f"enc{s}.{b}", spec.block)
            skips.append(h)
        for j, s in enumerate(range(spec.num_scales - 2, -1, -1)):
            h = T.upsample_nearest(h, spec.pool)
            h = T.concat_channels(skips[s], h)
            for b in range(spec.decoder_blocks[j]):
                h = _block(h, p, f"dec{s}.{b}", spec.block)
        return T.conv3d(h, p["head.weight"], p["head.bias"])

    def forward(self, x) -> Tensor:
        """Class probabilities (N, C, D, H, W); the graph is kept for backward."""
        self._out = T.softmax_channels(self.logits(x))
        return self._out

    def backward(self, grad_probs: np.ndarray) -> None:
        """Accumulate parameter gradients given dLoss/dProbs of the last forward."""
        if self._out is None:
            raise RuntimeError("backward() called before forward()")
        self._out.backward(np.asarray(grad_probs, dtype=self.dtype))

    def predict_probs(self, x) -> np.ndarray:
        out = T.softmax_channels(self.logits(Tensor(np.asarray(x, dtype=self.dtype))))
        return out.data


def _block(h: Tensor, p: dict, prefix: str, kind: str) -> Tensor:
    convs = SEP_CONVS if kind == "sep" else PLAIN_CONVS
    x = h
    for i in range(len(convs)):
        h = T.conv3d(h, p[f"{prefix}.conv{i}.weight"], p[f"{prefix}.conv{i}.bias"])
        h = T.relu(T.instance_norm(h, p[f"{prefix}.norm{i}.gamma"], p[f"{prefix}.norm{i}.beta"]))
    if kind == "sep":
        h = h + T.conv3d(x, p[f"{prefix}.skip.weight"], p[f"{prefix}.skip.bias"])
    return h


def _block_shapes(prefix: str, cin: int, cout: int, kind: str):
    convs = SEP_CONVS if kind == "sep" else PLAIN_CONVS
    c = cin
    for i, k in enumerate(convs):
        yield f"{prefix}.conv{i}.weight", (cout, c) + k
        yield f"{prefix}.conv{i}.bias", (cout,)
        yield f"{prefix}.norm{i}.gamma", (cout,)
        yield f"{prefix}.norm{i}.beta", (cout,)
        c = cout
    if kind == "sep":
        yield f"{prefix}.skip.weight", (cout, cin, 1, 1, 1)
        yield f"{prefix}.skip.bias", (cout,)


def _param_shapes(spec: NetworkSpec):
    c = spec.in_channels
    for s in range(spec.num_scales):
        for b in range(spec.encoder_blocks[s]):
            yield from _block_shapes(f"enc{s}.{b}", c, spec.channels(s), spec.block)
            c = spec.channels(s)
    for j, s in enumerate(range(spec.num_scales - 2, -1, -1)):
        c = spec.channels(s) + c
        for b in range(spec.decoder_blocks[j]):
            yield from _block_shapes(f"dec{s}.{b}", c, spec.channels(s), spec.block)
            c = spec.channels(s)
    yield "head.weight", (spec.num_classes, c, 1, 1, 1)
    yield "head.bias", (spec.num_classes,)


def init_params(spec: NetworkSpec, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.init_seed if seed is None else seed)
    params = {}
    for name, shape in _param_shapes(spec):
        if name.endswith(".weight"):
            bound = np.sqrt(1.0 / int(np.prod(shape[1:])))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def build_sepnet(spec: NetworkSpec, dtype=np.float32, seed: int | None = None) -> Model:
    if spec.block != "sep":
        spec = NetworkSpec(**{**spec.to_dict(), "block": "sep"})
    return Model(spec, init_params(spec, seed), dtype)


def unet_spec_for(spec: NetworkSpec, blocks_per_position: int = 2) -> NetworkSpec:
    """Plain-block spec matched layer for layer to ``spec``.

    A separable block holds four convolution layers and a plain block two, so
    by default every separable block position becomes two plain blocks.
    """
    d = spec.to_dict()
    d["block"] = "plain"
    d["encoder_blocks"] = [b * blocks_per_position for b in spec.encoder_blocks]
    d["decoder_blocks"] = [b * blocks_per_position for b in spec.decoder_blocks]
    return NetworkSpec.from_dict(d)


def build_unet_baseline(spec: NetworkSpec, dtype=np.float32, seed: int | None = None,
                        blocks_per_position: int = 2) -> Model:
    if spec.block != "plain":
        spec = unet_spec_for(spec, blocks_per_position)
    return Model(spec, init_params(spec, seed), dtype)


def param_count(m: Model | NetworkSpec) -> int:
    if isinstance(m, NetworkSpec):
        return sum(int(np.prod(shape)) for _, shape in _param_shapes(m))
    return sum(int(p.data.size) for p in m.params.values())


# --- checkpoints -------------------------------------------------------------

def _encode_records(arrays: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    for name, a in arrays.items():
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    return bytes(out)


def save_checkpoint(m: Model, path) -> None:
    """Binary parameter file plus ``<path>.json`` holding the network spec."""
    path = Path(path)
    records = _encode_records(m.named_arrays())
    blob = MAGIC + struct.pack("<I", FORMAT_VERSION) + records + struct.pack("<I", zlib.crc32(records))
    path.write_bytes(blob)
    Path(str(path) + ".json").write_text(json.dumps(m.spec.to_dict(), indent=2, sort_keys=True) + "\n")


def read_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a SEPN checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    records = blob[8:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(records) != crc:
        raise ValueError(f"{path}: CRC mismatch, checkpoint is corrupt")
    arrays, pos = {}, 0
    while pos < len(records):
        (n,) = struct.unpack_from("<I", records, pos)
        pos += 4
        name = records[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", records, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", records, pos)
        pos += 8 * rank
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(records, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    return arrays


def load_checkpoint(path) -> Model:
    spec = NetworkSpec.from_dict(json.loads(Path(str(path) + ".json").read_text()))
    return Model(spec, read_checkpoint_arrays(path), np.float32)
