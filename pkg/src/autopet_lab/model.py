"""Residual-encoder 3D U-Net and its checkpoint format.

Checkpoint layout (little-endian)::

    8 bytes   magic  b"APLCKPT1"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: format_version, config, training_strategy_id,
              normalization, fold_index, n_folds, tensors
    ...       raw tensor payload; header["tensors"] lists, in order,
              {name, dtype, shape, offset, nbytes} with offsets relative to
              the start of the payload
"""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .preprocessing import NormalizationRecord

FEATURE_CAP = 320
LEAKY_SLOPE = 0.01
MAGIC = b"APLCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    out_channels: int = 2
    n_stages: int = 4
    features_per_stage: tuple = (8, 16, 32, 64)
    blocks_per_stage_encoder: tuple = (1, 1, 1, 1)
    patch_size: tuple = (32, 32, 32)
    deep_supervision: bool = False
    rng_seed: int = 0
    feature_cap: int = FEATURE_CAP

    def __post_init__(self):
        for name in ("features_per_stage", "blocks_per_stage_encoder", "patch_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.n_stages < 2:
            raise ValueError("n_stages must be >= 2")
        if len(self.features_per_stage) != self.n_stages or len(self.blocks_per_stage_encoder) != self.n_stages:
            raise ValueError("features_per_stage and blocks_per_stage_encoder need one entry per stage")
        if any(f < 1 for f in self.features_per_stage) or any(b < 1 for b in self.blocks_per_stage_encoder):
            raise ValueError("features and block counts must be positive")
        if any(b > a for a, b in zip(self.features_per_stage[1:], self.features_per_stage)):
            raise ValueError("features_per_stage must be non-decreasing")
        if max(self.features_per_stage) > self.feature_cap:
            raise ValueError(f"features exceed the cap of {self.feature_cap}")
        if len(self.patch_size) != 3:
            raise ValueError("patch_size needs three components")
        div = 2 ** (self.n_stages - 1)
        if any(p % div for p in self.patch_size) or any(p < 1 for p in self.patch_size):
            raise ValueError(f"patch_size {self.patch_size} must be divisible by {div}")
        if np.prod([p // div for p in self.patch_size]) < 2:
            raise ValueError("the bottleneck needs more than one voxel for instance normalization")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_config(**overrides):
    """Desk-scale preset: patch 32^3, four stages, features (8, 16, 32, 64)."""
    return ModelConfig(**overrides)


def full_scale_config(**overrides):
    """Full-size residual encoder at a 192^3 patch (dry-run only on CPU)."""
    kwargs = dict(n_stages=6, features_per_stage=(32, 64, 128, 256, 320, 320),
                  blocks_per_stage_encoder=(1, 3, 4, 6, 6, 6), patch_size=(192, 192, 192))
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def conv_norm_act(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride, 1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


class ResidualBlock(nn.Module):
    """conv-norm-act, conv-norm, plus identity or 1x1 projection skip, then act."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride, 1)
        self.norm1 = nn.InstanceNorm3d(cout, affine=True)
        self.conv2 = nn.Conv3d(cout, cout, 3, 1, 1)
        self.norm2 = nn.InstanceNorm3d(cout, affine=True)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv3d(cin, cout, 1, stride), nn.InstanceNorm3d(cout, affine=True))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.skip(x))


class ResidualEncoderUNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        f = config.features_per_stage
        self.encoder = nn.ModuleList()
        cin = config.in_channels
        for s in range(config.n_stages):
            blocks = [ResidualBlock(cin, f[s], stride=1 if s == 0 else 2)]
            blocks += [ResidualBlock(f[s], f[s]) for _ in range(config.blocks_per_stage_encoder[s] - 1)]
            self.encoder.append(nn.Sequential(*blocks))
            cin = f[s]
        self.upsample = nn.ModuleList(
            [nn.ConvTranspose3d(f[s + 1], f[s], 2, 2) for s in range(config.n_stages - 1)])
        self.decoder = nn.ModuleList(
            [nn.Sequential(conv_norm_act(2 * f[s], f[s]), conv_norm_act(f[s], f[s]))
             for s in range(config.n_stages - 1)])
        self.head = nn.Conv3d(f[0], config.out_channels, 1)
        if config.deep_supervision:
            # one auxiliary head per lower-resolution decoder level
            self.aux_heads = nn.ModuleList(
                [nn.Conv3d(f[s], config.out_channels, 1) for s in range(1, config.n_stages - 1)])

    def forward(self, x):
        if tuple(x.shape[2:]) != self.config.patch_size or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected input (B, {self.config.in_channels}, *{self.config.patch_size}), "
                             f"got {tuple(x.shape)}")
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        x = skips[-1]
        decoded = {}
        for s in reversed(range(self.config.n_stages - 1)):
            x = self.decoder[s](torch.cat([self.upsample[s](x), skips[s]], dim=1))
            decoded[s] = x
        logits = self.head(x)
        if self.config.deep_supervision and self.training:
            aux = [head(decoded[s + 1]) for s, head in enumerate(self.aux_heads)]
            return [logits] + aux
        return logits

    def predict_proba(self, batch):
        """Softmax probabilities for a numpy batch ``(B, 2, *patch)``; eval mode, no grad."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                dtype = next(self.parameters()).dtype
                logits = self(torch.as_tensor(np.asarray(batch), dtype=dtype))
                return torch.softmax(logits, dim=1).double().numpy()
        finally:
            self.train(was_training)


def build_model(config):
    """Fresh model with weights drawn from ``config.rng_seed`` only."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.rng_seed)
        return ResidualEncoderUNet(config)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def expected_parameter_count(config):
    """Closed-form parameter count.

    conv k^3 cin->cout with bias: k^3*cin*cout + cout; affine instance norm: 2*c;
    transposed 2^3 conv: 8*cin*cout + cout.
    """
    def conv(k, cin, cout):
        return k ** 3 * cin * cout + cout

    def norm(c):
        return 2 * c

    f = config.features_per_stage
    total = 0
    cin = config.in_channels
    for s in range(config.n_stages):
        for b in range(config.blocks_per_stage_encoder[s]):
            bin_ = cin if b == 0 else f[s]
            total += conv(3, bin_, f[s]) + norm(f[s]) + conv(3, f[s], f[s]) + norm(f[s])
            if bin_ != f[s] or (b == 0 and s > 0):
                total += conv(1, bin_, f[s]) + norm(f[s])
        cin = f[s]
    for s in range(config.n_stages - 1):
        total += conv(2, f[s + 1], f[s])
        total += conv(3, 2 * f[s], f[s]) + norm(f[s]) + conv(3, f[s], f[s]) + norm(f[s])
    total += conv(1, f[0], config.out_channels)
    if config.deep_supervision:
        total += sum(conv(1, f[s], config.out_channels) for s in range(1, config.n_stages - 1))
    return total


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: dict
    training_strategy_id: str
    normalization: NormalizationRecord
    fold_index: int
    n_folds: int = 5
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.normalization is None:
            raise CheckpointError("checkpoint is missing its normalization record")
        if not 0 <= self.fold_index < self.n_folds:
            raise CheckpointError(f"fold_index {self.fold_index} outside [0, {self.n_folds - 1}]")

    @classmethod
    def from_model(cls, model, training_strategy_id, normalization, fold_index, n_folds=5, extra=None):
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.config, params, training_strategy_id, normalization, fold_index, n_folds, extra or {})

    def build(self):
        model = ResidualEncoderUNet(self.config)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in self.parameters.items()}
        if expected != got:
            missing = sorted(set(expected) ^ set(got)) or sorted(k for k in expected if expected[k] != got[k])
            raise CheckpointError(f"parameter shapes do not match the config: {missing[:5]}")
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()})
        model.eval()
        return model


def save_checkpoint(checkpoint, path):
    tensors, chunks, offset = [], [], 0
    for name in sorted(checkpoint.parameters):
        arr = np.ascontiguousarray(checkpoint.parameters[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": checkpoint.config.to_dict(),
        "training_strategy_id": checkpoint.training_strategy_id,
        "normalization": checkpoint.normalization.to_dict(),
        "fold_index": checkpoint.fold_index,
        "n_folds": checkpoint.n_folds,
        "extra": checkpoint.extra,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if not header.get("normalization"):
        raise CheckpointError(f"{path}: checkpoint is missing its normalization record")
    payload = raw[16 + hlen:]
    params = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor payload")
        params[t["name"]] = np.frombuffer(payload[t["offset"]:end], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
    try:
        normalization = NormalizationRecord.from_dict(header["normalization"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid normalization record: {exc}") from exc
    ckpt = ModelCheckpoint(ModelConfig.from_dict(header["config"]), params, header["training_strategy_id"],
                           normalization, header["fold_index"], header["n_folds"], header.get("extra", {}))
    ckpt.build()  # validates shapes against the config
    return ckpt


class FoldModel:
    """A loaded checkpoint ready for sliding-window prediction."""

    def __init__(self, checkpoint):
        self.checkpoint = checkpoint
        self.network = checkpoint.build()
        self.normalization = checkpoint.normalization
        self.patch_size = checkpoint.config.patch_size

    @classmethod
    def load(cls, path):
        return cls(load_checkpoint(path))

    def predict_proba(self, batch):
        return self.network.predict_proba(batch)
