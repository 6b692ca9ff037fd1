"""Block-structured residual classifiers.

input projection -> N residual blocks -> linear head. Each block's nonlinear
part is a two-layer ReLU MLP ``D -> hidden_mult*D -> D``; the residual
combination is chosen by :class:`~laurel.layers.Variant`.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from laurel.layers import (
    NORMALIZATIONS,
    ResidualParams,
    ResidualStream,
    Variant,
    apply_residual,
    init_params,
)
from laurel.tensor import ShapeError, Tensor, add, matmul, relu

CHECKPOINT_MAGIC = b"LAURELCK"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    width: int
    num_blocks: int
    num_classes: int
    hidden_mult: int = 4
    variant: Variant = Variant.VANILLA
    rank: int | None = None
    rw_norm: str = "softmax"
    pa_literal: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        for name in ("input_dim", "width", "num_blocks", "num_classes", "hidden_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.variant.has_rank and (self.rank is None or not 1 <= self.rank <= self.width):
            raise ValueError(f"rank must satisfy 1 <= r <= D={self.width} for "
                             f"{self.variant.value}, got {self.rank}")
        if self.rw_norm not in NORMALIZATIONS:
            raise ValueError(f"unknown rw_norm {self.rw_norm!r}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Model:
    """A built network: backbone tensors plus the residual parameter bundle."""

    def __init__(self, config: ModelConfig, backbone: dict[str, Tensor], residual: ResidualParams):
        self.config = config
        self.backbone = backbone
        self.residual = residual

    def parameters(self) -> dict[str, Tensor]:
        """All learned tensors by name, backbone first, in a fixed order."""
        return {**self.backbone, **self.residual.named_tensors()}

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.parameters().values()])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for t in self.parameters().values():
            n = t.size
            t.data[...] = np.asarray(vec[off:off + n]).reshape(t.shape)
            off += n


def _gaussian(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)


def build(config: ModelConfig) -> Model:
    """Construct a model deterministically from ``config.seed``.

    Every part draws from its own child stream of the seed, so a vanilla model
    and a LAuReL model with the same seed share identical backbone weights, and
    a naively scaled model shares its first N blocks with the baseline.
    """
    D, H = config.width, config.hidden_mult * config.width
    seed = config.seed
    backbone: dict[str, Tensor] = {}

    rng = np.random.default_rng([seed, 0])
    backbone["proj.W"] = _gaussian(rng, config.input_dim, (config.input_dim, D))
    backbone["proj.b"] = Tensor(np.zeros(D), True)
    for i in range(config.num_blocks):
        rng = np.random.default_rng([seed, 1, i])
        backbone[f"block{i}.W1"] = _gaussian(rng, D, (D, H))
        backbone[f"block{i}.b1"] = Tensor(np.zeros(H), True)
        # output layer of each branch is shrunk by 1/sqrt(N) so the stream's
        # variance stays bounded as blocks are summed
        W2 = _gaussian(rng, H, (H, D))
        W2.data /= np.sqrt(config.num_blocks)
        backbone[f"block{i}.W2"] = W2
        backbone[f"block{i}.b2"] = Tensor(np.zeros(D), True)
    rng = np.random.default_rng([seed, 2])
    backbone["head.W"] = _gaussian(rng, D, (D, config.num_classes))
    backbone["head.b"] = Tensor(np.zeros(config.num_classes), True)

    residual = init_params(config.variant, D, config.num_blocks, config.rank, [seed, 3],
                           normalization=config.rw_norm, literal_mode=config.pa_literal)
    return Model(config, backbone, residual)


def block_mlp(model: Model, i: int, x: Tensor) -> Tensor:
    p = model.backbone
    h = relu(add(matmul(x, p[f"block{i}.W1"]), p[f"block{i}.b1"]))
    return add(matmul(h, p[f"block{i}.W2"]), p[f"block{i}.b2"])


def forward(model: Model, batch) -> Tensor:
    """Logits for a ``b x input_dim`` batch."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = model.config
    if x.data.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"forward: expected batch of shape (b, {cfg.input_dim}), got {x.shape}")
    p = model.backbone
    stream = ResidualStream(add(matmul(x, p["proj.W"]), p["proj.b"]))
    for i in range(cfg.num_blocks):
        f_out = block_mlp(model, i, stream.last)
        stream.append(apply_residual(cfg.variant, f_out, stream, model.residual))
    return add(matmul(stream.last, p["head.W"]), p["head.b"])


def count_params(model: Model) -> int:
    return sum(t.size for t in model.parameters().values())


def vanilla_param_count(config: ModelConfig) -> int:
    """Closed-form parameter total of the vanilla twin of ``config``."""
    D, H, N = config.width, config.hidden_mult * config.width, config.num_blocks
    block = D * H + H + H * D + D
    return config.input_dim * D + D + N * block + D * config.num_classes + config.num_classes


def naive_scale(config: ModelConfig) -> ModelConfig:
    """The same network with one extra block and a plain residual connection."""
    return config.replace(num_blocks=config.num_blocks + 1, variant=Variant.VANILLA, rank=None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON header,
# then every tensor as float64 little-endian, row-major. Header offsets are in
# bytes from the start of the payload.


def save_checkpoint(model: Model, path) -> None:
    manifest, offset = [], 0
    params = model.parameters()
    for name, t in params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += 8 * t.size
    header = json.dumps({"config": model.config.to_dict(), "tensors": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for t in params.values():
            f.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    payload = raw[16 + hlen:]
    model = build(ModelConfig.from_dict(header["config"]))
    params = model.parameters()
    for entry in header["tensors"]:
        t = params[entry["name"]]
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * n > len(payload):
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        t.data[...] = np.frombuffer(payload, "<f8", n, start).reshape(entry["shape"])
    return model
