"""The hybrid ConvNet-Transformer classifier and its ablation variants.

Data flow for the full model, with ``S`` sensors and segment length ``p``::

    (batch, S, p)
      -> per-sensor 1D ConvNet        (batch, S, L', F)
      -> + positional encoding, temporal encoder blocks
      -> global average pool, dropout (batch, S, F)
      -> per-sensor dense reduction   (batch, S, R)
      -> + positional encoding, spatial encoder blocks
      -> flatten, two SeLU dense layers, softmax output

Per-sensor weights are stacked along a leading stream axis, so streams never
mix before the spatial encoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from . import layers as L
from .numerics import ShapeError, Tensor, as_tensor, reshape, selu, transpose

ABLATIONS = ("full", "A", "B", "C", "D")

# The softmax layer feeds no SeLU, so self-normalising scale buys nothing
# there; shrinking it makes the untrained model predict near-uniformly.
OUTPUT_INIT_SCALE = 0.1


class InvalidConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("invalid model config: " + "; ".join(problems))


@dataclass(frozen=True)
class ModelConfig:
    sensor_count: int = 18
    segment_length: int = 100
    conv_blocks: int = 2
    temporal_blocks: int = 1
    spatial_blocks: int = 1
    head_count: int = 2
    reduced_dim: int = 10
    classifier_hidden: Tuple[int, int] = (64, 32)
    class_count: int = 4
    dropout_rate: float = 0.1
    ablation: str = "full"
    # filters per conv block; blocks past the listed ones reuse the last entry
    conv_filters: Tuple[Tuple[int, int], ...] = ((8, 16), (16, 16))
    kernel_width: int = 3
    pool_window: int = 2
    pool_stride: int = 2
    ffn_multiplier: int = 4

    def __post_init__(self):
        object.__setattr__(self, "classifier_hidden", tuple(self.classifier_hidden))
        object.__setattr__(self, "conv_filters", tuple(tuple(f) for f in self.conv_filters))

    @property
    def uses_conv(self) -> bool:
        return self.ablation != "D"

    @property
    def uses_temporal(self) -> bool:
        return self.ablation in ("full", "B", "D")

    @property
    def uses_spatial(self) -> bool:
        return self.ablation in ("full", "A", "D")

    def block_filters(self, block: int) -> Tuple[int, int]:
        return self.conv_filters[min(block, len(self.conv_filters) - 1)]

    @property
    def feature_dim(self) -> int:
        """Channel width entering the temporal encoder."""
        return self.block_filters(self.conv_blocks - 1)[1]

    def conv_lengths(self) -> List[int]:
        """Sequence length after every conv/pool layer of one stream."""
        out, n = [], self.segment_length
        for _ in range(self.conv_blocks):
            for _ in range(2):
                n = L.conv_output_length(n, self.kernel_width)
                out.append(n)
            n = L.conv_output_length(n, self.pool_window, self.pool_stride)
            out.append(n)
        return out

    @property
    def temporal_length(self) -> int:
        if not self.uses_conv:
            return self.segment_length
        return self.conv_lengths()[-1]

    def problems(self) -> List[str]:
        found = []
        if self.sensor_count < 1:
            found.append(f"sensor_count must be >= 1 (got {self.sensor_count})")
        if self.class_count < 2:
            found.append(f"class_count must be >= 2 (got {self.class_count})")
        if self.ablation not in ABLATIONS:
            found.append(f"ablation must be one of {ABLATIONS} (got {self.ablation!r})")
        if not 0.0 <= self.dropout_rate < 1.0:
            found.append(f"dropout_rate must lie in [0, 1) (got {self.dropout_rate})")
        if self.conv_blocks < 1 and self.ablation != "D":
            found.append("conv_blocks must be >= 1")
        if self.temporal_blocks < 1 or self.spatial_blocks < 1:
            found.append("temporal_blocks and spatial_blocks must be >= 1")
        if len(self.classifier_hidden) != 2 or min(self.classifier_hidden) < 1:
            found.append(f"classifier_hidden must be two positive widths (got {self.classifier_hidden})")
        if min(self.kernel_width, self.pool_window, self.pool_stride, self.reduced_dim,
               self.head_count, self.ffn_multiplier) < 1:
            found.append("widths, strides and head_count must be positive")
        if self.segment_length < 1:
            found.append("segment_length must be positive")
        elif self.conv_blocks >= 1 and self.kernel_width >= 1 and self.pool_window >= 1 \
                and self.pool_stride >= 1 and min(self.conv_lengths()) < 1:
            found.append(
                f"segment_length {self.segment_length} too short for "
                f"{self.conv_blocks} conv blocks of width {self.kernel_width}"
            )
        if self.head_count >= 1:
            if self.uses_temporal and self.feature_dim % self.head_count:
                found.append(f"temporal dim {self.feature_dim} not divisible by head_count {self.head_count}")
            if self.uses_spatial and self.reduced_dim % self.head_count:
                found.append(f"reduced_dim {self.reduced_dim} not divisible by head_count {self.head_count}")
        return found

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise InvalidConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classifier_hidden"] = list(self.classifier_hidden)
        d["conv_filters"] = [list(f) for f in self.conv_filters]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError([f"unknown model config keys: {sorted(unknown)}"])
        return cls(**d)


def apply_ablation(config: ModelConfig, variant: str) -> ModelConfig:
    """Config for ablation ``variant``.

    A drops the temporal encoders, B drops the spatial encoder and the
    per-sensor reductions feeding it, C drops both encoders, D drops the
    ConvNet and feeds raw segments to the temporal encoders.
    """
    if variant not in ABLATIONS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")
    return replace(config, ablation=variant)


class HybridModel(L.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.dropout_rate = config.dropout_rate
        self.dropout_rng = L.counter_rng(seed)
        rng = np.random.default_rng(seed)
        S = config.sensor_count
        F = config.feature_dim

        self.convs: List[L.Conv1dLayer] = []
        if config.uses_conv:
            in_ch = 1
            for b in range(config.conv_blocks):
                for out_ch in config.block_filters(b):
                    self.convs.append(L.Conv1dLayer(in_ch, out_ch, config.kernel_width, rng, streams=S))
                    in_ch = out_ch
        else:
            self.embed = L.Dense(1, F, rng, streams=S)

        self.temporal: List[L.AttentionBlock] = []
        if config.uses_temporal:
            self.temporal_pe = L.PositionalEncoding(config.temporal_length, F)
            self.temporal = [
                L.AttentionBlock(F, config.head_count, rng, streams=S, dropout_rate=config.dropout_rate,
                                 ffn_multiplier=config.ffn_multiplier)
                for _ in range(config.temporal_blocks)
            ]

        self.spatial: List[L.AttentionBlock] = []
        if config.uses_spatial:
            R = config.reduced_dim
            self.reduce = L.Dense(F, R, rng, streams=S)
            self.spatial_pe = L.PositionalEncoding(S, R)
            self.spatial = [
                L.AttentionBlock(R, config.head_count, rng, dropout_rate=config.dropout_rate,
                                 ffn_multiplier=config.ffn_multiplier)
                for _ in range(config.spatial_blocks)
            ]
            flat = S * R
        else:
            flat = S * F

        h1, h2 = config.classifier_hidden
        self.classifier = [L.Dense(flat, h1, rng), L.Dense(h1, h2, rng)]
        self.output = L.Dense(h2, config.class_count, rng)
        self.output.weight.data *= OUTPUT_INIT_SCALE

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # -- forward pieces ---------------------------------------------------
    def _dropout(self, x: Tensor, training: bool) -> Tensor:
        return L.dropout(x, self.dropout_rate, training, self.dropout_rng)

    def stream_features(self, batch: Tensor, training: bool = False) -> Tensor:
        """Per-sensor feature vectors after pooling: ``(batch, S, F)``."""
        batch = as_tensor(batch)
        cfg = self.config
        if batch.ndim != 3 or batch.shape[1:] != (cfg.sensor_count, cfg.segment_length):
            raise ShapeError(
                f"expected input (batch, {cfg.sensor_count}, {cfg.segment_length}), got {batch.shape}"
            )
        n = batch.shape[0]
        if cfg.uses_conv:
            h = reshape(batch, (n, cfg.sensor_count, 1, cfg.segment_length))
            for i, conv in enumerate(self.convs):
                h = selu(conv(h))
                if i % 2 == 1:
                    h = L.maxpool1d(h, cfg.pool_window, cfg.pool_stride)
            h = transpose(h, (0, 1, 3, 2))
        else:
            h = self.embed(reshape(batch, (n, cfg.sensor_count, cfg.segment_length, 1)))
        if cfg.uses_temporal:
            h = self.temporal_pe(h)
            for block in self.temporal:
                h = block(h, training, self.dropout_rng)
        return self._dropout(L.global_average_pool(h), training)

    def reduced_tokens(self, batch: Tensor, training: bool = False) -> Tensor:
        """Per-sensor reduced tokens entering the spatial encoder: ``(batch, S, R)``."""
        feats = self.stream_features(batch, training)
        n, S, F = feats.shape
        tokens = selu(self.reduce(reshape(feats, (n, S, 1, F))))
        return reshape(tokens, (n, S, self.config.reduced_dim))

    def spatial_features(self, batch: Tensor, training: bool = False) -> Tensor:
        h = self.spatial_pe(self.reduced_tokens(batch, training))
        for block in self.spatial:
            h = block(h, training, self.dropout_rng)
        return h

    def __call__(self, batch: Tensor, training: bool = False) -> Tensor:
        if self.config.uses_spatial:
            h = self.spatial_features(batch, training)
        else:
            h = self.stream_features(batch, training)
        n = h.shape[0]
        h = reshape(h, (n, h.shape[1] * h.shape[2]))
        for fc in self.classifier:
            h = self._dropout(selu(fc(h)), training)
        return L.softmax(self.output(h), axis=-1)


def build_model(config: ModelConfig, seed: int = 0) -> HybridModel:
    return HybridModel(config, seed)


def forward(model: HybridModel, batch, training: bool = False) -> Tensor:
    """Class probabilities ``(batch, class_count)``."""
    return model(as_tensor(batch), training)


def get_state(model: HybridModel) -> Dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.parameters().items()}


def set_state(model: HybridModel, state: Dict[str, np.ndarray]) -> None:
    params = model.parameters()
    if set(params) != set(state):
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if p.shape != state[name].shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {state[name].shape}")
        p.data[...] = state[name]


# ----------------------------------------------------------------------------
# checkpoint container
#
# layout: 8-byte magic | uint32 version | uint64 header length | JSON header
# | raw little-endian float64 tensor data, in header order

CHECKPOINT_MAGIC = b"PDSTAGE\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: HybridModel, path: Union[str, Path]) -> None:
    entries, offset, blobs = [], 0, []
    for name, p in model.parameters().items():
        blob = p.data.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps(
        {"byte_order": "little", "dtype": "float64", "config": model.config.to_dict(),
         "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path: Union[str, Path]) -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    body = memoryview(raw)[start + hlen:]
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        state[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return ModelConfig.from_dict(header["config"]), state


def load_checkpoint(path: Union[str, Path]) -> HybridModel:
    config, state = read_checkpoint(path)
    model = HybridModel(config)
    set_state(model, state)
    return model
