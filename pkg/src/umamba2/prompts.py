"""Interactive click branch: click encoding and two-way cross-attention fusion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, ModuleList, parameter
from .tensor import Tensor


@dataclass(frozen=True)
class ClickPrompt:
    coord: tuple[int, int, int]
    class_label: int

    def mirrored(self, axes: Sequence[int], extents: Sequence[int], partner=None) -> "ClickPrompt":
        """The same click after flipping the volume along ``axes``.

        ``partner`` maps class ids to their laterality partner and is applied
        when the left/right axis (2) is flipped.
        """
        coord = list(self.coord)
        for ax in axes:
            coord[ax] = extents[ax] - 1 - coord[ax]
        label = self.class_label
        if 2 in axes and partner is not None:
            label = int(partner[label])
        return ClickPrompt(tuple(coord), label)


def load_clicks(path: str | Path) -> list[ClickPrompt]:
    """Read a JSON array of ``{x, y, z, class_id}`` voxel-index clicks."""
    with open(path) as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise ValueError(f"{path}: click file must hold a JSON array")
    clicks = []
    for item in items:
        try:
            clicks.append(ClickPrompt((int(item["x"]), int(item["y"]), int(item["z"])), int(item["class_id"])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: malformed click entry {item!r}") from exc
    return clicks


def save_clicks(path: str | Path, clicks: Sequence[ClickPrompt]) -> None:
    items = [{"x": c.coord[0], "y": c.coord[1], "z": c.coord[2], "class_id": c.class_label} for c in clicks]
    Path(path).write_text(json.dumps(items, indent=1))


def sample_clicks(gt: np.ndarray, classes: Sequence[int], n: int, rng_seed: int) -> list[ClickPrompt]:
    """Draw ``n`` foreground voxels per requested class, uniformly without replacement."""
    if n == 0:
        return []
    rng = np.random.default_rng(rng_seed)
    clicks = []
    for cls in classes:
        where = np.argwhere(gt == cls)
        if len(where) == 0:
            raise ValueError(f"class {cls} is absent from the ground truth; cannot sample clicks")
        picks = rng.choice(len(where), size=min(n, len(where)), replace=False)
        clicks.extend(ClickPrompt(tuple(int(v) for v in where[i]), int(cls)) for i in sorted(picks))
    return clicks


class ClickEncoder(Module):
    """Random-Fourier coordinate features with a learned projection plus a learned class embedding."""

    def __init__(self, d_embed: int, num_classes: int, rng: np.random.Generator, fourier_seed: int = 0) -> None:
        if d_embed % 2:
            raise ValueError("click embedding width must be even")
        self.d_embed = d_embed
        self.num_classes = num_classes
        # fixed, not trained
        self.gaussian = np.random.default_rng(fourier_seed).normal(size=(3, d_embed // 2))
        self.pos_proj = Linear(d_embed, d_embed, rng)
        self.class_embed = parameter(rng.normal(0.0, 0.02, size=(num_classes, d_embed)))

    def fourier(self, coords01: np.ndarray) -> np.ndarray:
        proj = 2.0 * math.pi * (2.0 * coords01 - 1.0) @ self.gaussian
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)

    def forward(self, clicks: Sequence[ClickPrompt], extents: Sequence[int]) -> Tensor:
        return encode_clicks(clicks, extents, self)


def encode_clicks(clicks: Sequence[ClickPrompt], volume_extents: Sequence[int], encoder: ClickEncoder) -> Tensor:
    """(N, d_embed) embedding; each row depends only on its own click."""
    if not clicks:
        return Tensor(np.zeros((0, encoder.d_embed)))
    extents = np.asarray(volume_extents, dtype=np.int64)
    coords = np.array([c.coord for c in clicks], dtype=np.int64)
    labels = np.array([c.class_label for c in clicks], dtype=np.int64)
    if np.any(coords < 0) or np.any(coords >= extents):
        bad = [c.coord for c in clicks if any(v < 0 or v >= e for v, e in zip(c.coord, extents))]
        raise ValueError(f"click coordinate out of bounds for extents {tuple(extents)}: {bad[0]}")
    if np.any(labels < 0) or np.any(labels >= encoder.num_classes):
        raise ValueError(f"unknown click class in {labels.tolist()} (num_classes={encoder.num_classes})")
    coords01 = coords / np.maximum(extents - 1, 1)
    pos = encoder.pos_proj(Tensor(encoder.fourier(coords01)))
    return pos + encoder.class_embed[labels]


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator) -> None:
        if dim % num_heads:
            raise ValueError(f"attention width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = Linear(dim, dim, rng, bias=True)
        self.k = Linear(dim, dim, rng, bias=True)
        self.v = Linear(dim, dim, rng, bias=True)
        self.o = Linear(dim, dim, rng, bias=True)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return T.transpose(T.reshape(x, (b, n, self.num_heads, d // self.num_heads)), (0, 2, 1, 3))

    def forward(self, queries: Tensor, keys: Tensor) -> Tensor:
        b, nq, d = queries.shape
        q, k, v = self._split(self.q(queries)), self._split(self.k(keys)), self._split(self.v(keys))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.num_heads))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, nq, d))
        return self.o(out)


class TwoWayLayer(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator) -> None:
        self.prompt_to_image = MultiHeadAttention(dim, num_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.mlp_in = Linear(dim, 2 * dim, rng, bias=True)
        self.mlp_out = Linear(2 * dim, dim, rng, bias=True)
        self.norm2 = LayerNorm(dim)
        self.image_to_prompt = MultiHeadAttention(dim, num_heads, rng)
        self.norm3 = LayerNorm(dim)

    def forward(self, image: Tensor, prompts: Tensor) -> tuple[Tensor, Tensor]:
        prompts = self.norm1(prompts + self.prompt_to_image(prompts, image))
        prompts = self.norm2(prompts + self.mlp_out(T.silu(self.mlp_in(prompts))))
        image = self.norm3(image + self.image_to_prompt(image, prompts))
        return image, prompts


class TwoWayFusion(Module):
    def __init__(self, dim: int, rng: np.random.Generator, num_heads: int = 4, depth: int = 2) -> None:
        self.layers = ModuleList(TwoWayLayer(dim, num_heads, rng) for _ in range(depth))

    def forward(self, image_feats: Tensor, prompts: Tensor) -> Tensor:
        return two_way_fusion(image_feats, prompts, self)


def two_way_fusion(image_feats: Tensor, prompts: Tensor, fusion: TwoWayFusion) -> Tensor:
    """Fuse (N, C) click embeddings into (B, T, C) image features.

    With no clicks the image features are returned untouched.
    """
    image_feats, prompts = T.as_tensor(image_feats), T.as_tensor(prompts)
    if prompts.shape[0] == 0:
        return image_feats
    if prompts.shape[-1] != image_feats.shape[-1]:
        raise T.ShapeError(f"prompt width {prompts.shape} does not match image features {image_feats.shape}")
    bsz = image_feats.shape[0]
    tokens = T.broadcast_to(T.expand_dims(prompts, 0), (bsz,) + prompts.shape) if prompts.ndim == 2 else prompts
    image = image_feats
    for layer in fusion.layers:
        image, tokens = layer(image, tokens)
    return image
