"""The U-Mamba2 network: residual encoder, SSD bottleneck, decoder, segmentation head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import (Conv3d, ConvNormAct, ConvTranspose3d, LayerNorm, Module, ModuleList,
                 ResidualBlock)
from .prompts import ClickEncoder, ClickPrompt, TwoWayFusion, encode_clicks, two_way_fusion
from .ssd import Mamba2, SsdConfig
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    num_stages: int = 3
    base_channels: int = 8
    channel_cap: int = 64
    kernel_sizes: list = field(default_factory=lambda: [3, 3, 3])
    strides: list = field(default_factory=lambda: [2, 2])
    num_classes: int = 12
    in_channels: int = 1
    patch_size: list = field(default_factory=lambda: [32, 32, 32])
    ssd: SsdConfig = field(default_factory=SsdConfig)
    click_branch: bool = False
    attention_heads: int = 4
    deep_supervision: bool = False
    bottleneck_residual: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.ssd, dict):
            self.ssd = SsdConfig(**self.ssd)
        self.kernel_sizes = [list(T._triple(k)) for k in self.kernel_sizes]
        self.strides = [list(T._triple(s)) for s in self.strides]
        self.patch_size = list(T._triple(self.patch_size))

    def validate(self) -> None:
        if self.num_stages < 2:
            raise ConfigError("num_stages must be >= 2")
        if len(self.kernel_sizes) != self.num_stages:
            raise ConfigError(f"need {self.num_stages} kernel sizes, got {len(self.kernel_sizes)}")
        if len(self.strides) != self.num_stages - 1:
            raise ConfigError(f"need {self.num_stages - 1} downsampling strides, got {len(self.strides)}")
        if any(k % 2 == 0 for ks in self.kernel_sizes for k in ks):
            raise ConfigError("kernel sizes must be odd")
        check_extents(self.patch_size, self.strides)

    def stage_channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** s, self.channel_cap) for s in range(self.num_stages)]

    def to_dict(self) -> dict:
        return asdict(self)


def check_extents(extents: Sequence[int], strides: Sequence[Sequence[int]]) -> None:
    """Raise if some stage's stride does not divide the extents reaching it."""
    ext = list(extents)
    for stage, stride in enumerate(strides):
        for axis, (n, s) in enumerate(zip(ext, stride)):
            if s < 1 or n % s:
                raise ConfigError(f"stage {stage}: stride {tuple(stride)} does not divide extents "
                                  f"{tuple(ext)} (axis {axis})")
        ext = [n // s for n, s in zip(ext, stride)]


class EncoderStage(Module):
    """Two residual blocks, then (except for the deepest stage) a strided downsampling conv."""

    def __init__(self, c: int, kernel, rng, c_next: int | None, stride) -> None:
        self.blocks = ModuleList([ResidualBlock(c, c, kernel, rng), ResidualBlock(c, c, kernel, rng)])
        self.down = ConvNormAct(c, c_next, kernel, rng, stride=stride) if c_next is not None else None

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        for block in self.blocks:
            x = block(x)
        return x, (self.down(x) if self.down is not None else None)


class UMamba2Block(Module):
    """Flatten to (B, T, C), layer-norm, Mamba2, optional click fusion, unflatten, residual."""

    def __init__(self, channels: int, cfg: ArchConfig, rng) -> None:
        self.norm = LayerNorm(channels)
        self.mamba = Mamba2(channels, cfg.ssd, rng)
        self.residual = cfg.bottleneck_residual
        self.click_branch = cfg.click_branch
        if cfg.click_branch:
            self.click_encoder = ClickEncoder(channels, cfg.num_classes, rng, fourier_seed=cfg.seed)
            self.fusion = TwoWayFusion(channels, rng, num_heads=cfg.attention_heads)

    def forward(self, x: Tensor, clicks=None, extents=None) -> Tensor:
        b, c, h, w, d = x.shape
        seq = flatten_features(x)
        seq = self.mamba(self.norm(seq))
        batches = normalize_clicks(clicks, b)
        if batches is not None:
            if not self.click_branch:
                raise ConfigError("clicks supplied but the network was built without the click branch")
            seq = fuse_batch(seq, batches, self, extents)
        out = unflatten_features(seq, (h, w, d))
        return x + out if self.residual else out


def normalize_clicks(clicks, batch: int):
    """None, a flat click list (shared by all samples) or one list per sample."""
    if clicks is None:
        return None
    clicks = list(clicks)
    if clicks and isinstance(clicks[0], ClickPrompt) or not clicks:
        return [clicks] * batch
    if len(clicks) != batch:
        raise ValueError(f"got click lists for {len(clicks)} samples, batch has {batch}")
    return [list(c) for c in clicks]


def fuse_batch(seq: Tensor, batches, block: UMamba2Block, extents) -> Tensor:
    outs = []
    for i, clicks in enumerate(batches):
        item = seq[i:i + 1]
        if clicks:
            item = two_way_fusion(item, encode_clicks(clicks, extents, block.click_encoder), block.fusion)
        outs.append(item)
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=0)


def flatten_features(x: Tensor) -> Tensor:
    """(B, C, H, W, D) -> (B, T, C), row-major over H, W, D."""
    b, c = x.shape[:2]
    return T.transpose(T.reshape(x, (b, c, -1)), (0, 2, 1))


def unflatten_features(seq: Tensor, extents: Sequence[int]) -> Tensor:
    b, _, c = seq.shape
    return T.reshape(T.transpose(seq, (0, 2, 1)), (b, c) + tuple(extents))


class DecoderStage(Module):
    def __init__(self, c_low: int, c: int, kernel, stride, rng) -> None:
        self.up = ConvTranspose3d(c_low, c, stride, rng)
        self.fuse = ConvNormAct(2 * c, c, 1, rng)
        self.block = ResidualBlock(c, c, kernel, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = self.up(x)
        x = self.fuse(T.concat([x, skip], axis=1))
        return self.block(x)


class UMamba2Net(Module):
    def __init__(self, cfg: ArchConfig) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        chans = cfg.stage_channels()
        ks = cfg.kernel_sizes
        self.stem = ConvNormAct(cfg.in_channels, chans[0], ks[0], rng)
        self.encoder = ModuleList(
            EncoderStage(chans[s], ks[s], rng,
                         chans[s + 1] if s < cfg.num_stages - 1 else None,
                         cfg.strides[s] if s < cfg.num_stages - 1 else None)
            for s in range(cfg.num_stages))
        self.bottleneck = UMamba2Block(chans[-1], cfg, rng)
        self.decoder = ModuleList(
            DecoderStage(chans[s + 1], chans[s], ks[s], cfg.strides[s], rng)
            for s in reversed(range(cfg.num_stages - 1)))
        self.head = Conv3d(chans[0], cfg.num_classes, 1, rng, bias=True)
        if cfg.deep_supervision:
            self.aux_heads = ModuleList(Conv3d(chans[s], cfg.num_classes, 1, rng, bias=True)
                                        for s in reversed(range(1, cfg.num_stages - 1)))

    # -- stages ---------------------------------------------------------------
    def encoder_stage(self, stage: int, x: Tensor) -> tuple[Tensor, Tensor | None]:
        stride = self.cfg.strides[stage] if stage < self.cfg.num_stages - 1 else (1, 1, 1)
        for axis, (n, s) in enumerate(zip(x.shape[2:], stride)):
            if n % s:
                raise ConfigError(f"stage {stage}: extent {n} on axis {axis} not divisible by stride {s}")
        return self.encoder[stage](x)

    def umamba2_bottleneck(self, x: Tensor, clicks=None, extents=None) -> Tensor:
        return self.bottleneck(x, clicks, extents or x.shape[2:])

    def forward(self, x, clicks=None, return_aux: bool = False):
        x = T.as_tensor(x)
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise T.ShapeError(f"expected (B, {self.cfg.in_channels}, H, W, D) input, got {x.shape}")
        extents = x.shape[2:]
        check_extents(extents, self.cfg.strides)
        h = self.stem(x)
        skips = []
        for stage in range(self.cfg.num_stages):
            skip, down = self.encoder_stage(stage, h)
            skips.append(skip)
            h = down if down is not None else skip
        h = self.umamba2_bottleneck(h, clicks, extents)
        aux = []
        for i, stage in enumerate(self.decoder):
            h = stage(h, skips[-2 - i])
            if return_aux and self.cfg.deep_supervision and i < len(self.decoder) - 1:
                aux.append(self.aux_heads[i](h))
        logits = self.head(h)
        return (logits, aux) if return_aux else logits

    def predict_proba(self, x, clicks=None) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.forward(x, clicks), axis=1).data

    # -- parameter groups -------------------------------------------------------
    def transferable(self, name: str) -> bool:
        """True for weights carried over from self-supervised pretraining."""
        return not (name.startswith("head.") or name.startswith("aux_heads.")
                    or name.startswith("bottleneck.click_encoder.") or name.startswith("bottleneck.fusion."))

    def prompt_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters()
                if n.startswith("bottleneck.click_encoder.") or n.startswith("bottleneck.fusion.")]


def build_network(cfg: ArchConfig) -> UMamba2Net:
    """Deterministically initialized network; parameters depend only on ``cfg``."""
    return UMamba2Net(cfg)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.bin (flat little-endian payload) + <stem>.json manifest
# ---------------------------------------------------------------------------

def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_checkpoint(path: str | Path, state: dict, config: dict, extra: dict | None = None) -> Path:
    bin_path, manifest_path = _paths(path)
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, arr in state.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f64"})
            offset += arr.nbytes
    manifest = {"format_version": CHECKPOINT_VERSION, "config": config, "tensors": entries,
                "payload": bin_path.name}
    if extra:
        manifest["extra"] = extra
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return ``(state, manifest)``."""
    bin_path, manifest_path = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format version {manifest.get('format_version')} != {CHECKPOINT_VERSION}")
    payload = bin_path.read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f64":
            raise ValueError(f"unsupported checkpoint dtype {entry['dtype']}")
        count = math.prod(entry["shape"])
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise ValueError(f"checkpoint payload truncated: need {end} bytes, have {len(payload)}")
        state[entry["name"]] = np.frombuffer(payload[entry["offset"]:end], dtype="<f8").reshape(entry["shape"]).copy()
    return state, manifest


def arch_from_dict(d: dict) -> ArchConfig:
    return ArchConfig(**d)
