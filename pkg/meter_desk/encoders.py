"""Text and vision transformer encoders.

Both encoders are stacks of pre-norm layers (self-attention then feed-forward,
each wrapped in a residual) over learned absolute positional embeddings, and
return every intermediate state so the multi-scale gates can read them. All
encoder parameters belong to the "bottom" learning-rate group.
"""

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from meter_desk import numcore as nc
from meter_desk import settings
from meter_desk.datagen import extract_patches
from meter_desk.exceptions import ShapeError

logger = logging.getLogger(__name__)


@contextmanager
def stage_timer(timings, key):
    """Accumulate the wall-clock milliseconds of the block into ``timings[key]`` (no-op for None)."""
    if timings is None:
        yield
        return
    start = time.perf_counter()
    yield
    timings[key] = timings.get(key, 0.0) + (time.perf_counter() - start) * 1000.0


@dataclass
class LayerOutputs:
    """h(x^0) .. h(x^N): the embedding output followed by every layer output."""

    states: list

    def __len__(self):
        return len(self.states)

    @property
    def top(self) -> nc.Tensor:
        return self.states[-1]


def _split_heads(x: nc.Tensor, heads: int) -> nc.Tensor:
    b, t, h = x.shape
    return nc.transpose(nc.reshape(x, (b, t, heads, h // heads)), (0, 2, 1, 3))


def _merge_heads(x: nc.Tensor) -> nc.Tensor:
    b, heads, t, dh = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, t, heads * dh))


def attention_fill_mask(batch: int, tq: int, tk: int, key_mask=None, causal: bool = False):
    """Boolean [B, 1, Tq, Tk] array, True where a query may not look."""
    fill = np.zeros((batch, 1, tq, tk), dtype=bool)
    if key_mask is not None:
        fill |= (np.asarray(key_mask) == 0)[:, None, None, :]
    if causal:
        fill |= np.triu(np.ones((tq, tk), dtype=bool), k=1)[None, None]
    return fill


class Attention(nc.Module):
    """Multi-head scaled dot-product attention; queries and keys may come from different sequences."""

    def __init__(self, prefix, group, hidden, heads, rng, zero_output=False):
        super().__init__(prefix, group)
        if hidden % heads:
            raise ShapeError("attention", [("hidden", (hidden,)), ("heads", (heads,))])
        self.heads = heads
        self.scale = 1.0 / math.sqrt(hidden // heads)
        self.wq = self.child(nc.Linear(f"{prefix}.wq", group, hidden, hidden, rng))
        self.wk = self.child(nc.Linear(f"{prefix}.wk", group, hidden, hidden, rng))
        self.wv = self.child(nc.Linear(f"{prefix}.wv", group, hidden, hidden, rng))
        self.wo = self.child(nc.Linear(f"{prefix}.wo", group, hidden, hidden, rng, zero=zero_output))

    def __call__(self, query, context, key_mask=None, causal=False):
        if query.shape[-1] != context.shape[-1]:
            raise ShapeError("attention", [("query", query.shape), ("context", context.shape)])
        b, tq, _ = query.shape
        tk = context.shape[1]
        q = _split_heads(self.wq(query), self.heads)
        k = _split_heads(self.wk(context), self.heads)
        v = _split_heads(self.wv(context), self.heads)
        scores = nc.scale(nc.matmul(q, nc.transpose(k)), self.scale)
        fill = attention_fill_mask(b, tq, tk, key_mask, causal)
        if fill.any():
            scores = nc.mask_fill(scores, fill, settings.MASK_FILL_VALUE)
        weights = nc.softmax(scores, axis=-1)
        out = self.wo(_merge_heads(nc.matmul(weights, v)))
        return out, weights


class FeedForward(nc.Module):
    def __init__(self, prefix, group, hidden, ffn_mult, rng):
        super().__init__(prefix, group)
        inner = int(round(hidden * ffn_mult))
        self.fc1 = self.child(nc.Linear(f"{prefix}.fc1", group, hidden, inner, rng))
        self.fc2 = self.child(nc.Linear(f"{prefix}.fc2", group, inner, hidden, rng))

    def __call__(self, x):
        return self.fc2(nc.gelu(self.fc1(x)))


class TransformerLayer(nc.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, prefix, group, hidden, heads, ffn_mult, rng):
        super().__init__(prefix, group)
        self.ln_attn = self.child(nc.LayerNorm(f"{prefix}.ln_attn", group, hidden))
        self.attn = self.child(Attention(f"{prefix}.self_attn", group, hidden, heads, rng))
        self.ln_ffn = self.child(nc.LayerNorm(f"{prefix}.ln_ffn", group, hidden))
        self.ffn = self.child(FeedForward(f"{prefix}.ffn", group, hidden, ffn_mult, rng))

    def __call__(self, x, key_mask=None, causal=False, record=None):
        normed = self.ln_attn(x)
        attended, weights = self.attn(normed, normed, key_mask=key_mask, causal=causal)
        if record is not None:
            record.append(weights)
        x = nc.add(x, attended)
        return nc.add(x, self.ffn(self.ln_ffn(x)))


def _run_layers(layers, x, key_mask=None, record=None) -> LayerOutputs:
    states = [x]
    for layer in layers:
        x = layer(x, key_mask=key_mask, record=record)
        states.append(x)
    return LayerOutputs(states)


class TextEncoder(nc.Module):
    def __init__(self, config, vocab_size, rng, prefix="text_encoder"):
        super().__init__(prefix, "bottom")
        self.config = config
        self.token_embed = self.child(nc.Embedding(f"{prefix}.token_embed", "bottom", vocab_size, config.hidden, rng))
        self.pos = self.param("pos_embed", rng.normal(0.0, 0.02, size=(config.max_positions, config.hidden)))
        self.layers = [
            self.child(TransformerLayer(f"{prefix}.layer{i}", "bottom", config.hidden, config.heads, config.ffn_mult, rng))
            for i in range(config.layers)
        ]

    def embed(self, token_ids) -> nc.Tensor:
        token_ids = np.asarray(token_ids)
        t = token_ids.shape[1]
        if t > self.config.max_positions:
            raise ShapeError("text_embed", [("token_ids", token_ids.shape), ("pos_embed", self.pos.shape)])
        return nc.add(self.token_embed(token_ids), nc.slice_(self.pos, slice(0, t)))

    def encode(self, token_ids, mask, record=None) -> LayerOutputs:
        """All N+1 hidden states; padded positions are hidden from attention."""
        return _run_layers(self.layers, self.embed(token_ids), key_mask=mask, record=record)


class VisionEncoder(nc.Module):
    """ViT-style encoder over a square patch grid with a prepended [CLS_V] slot."""

    def __init__(self, config, grid, rng, prefix="vision_encoder"):
        super().__init__(prefix, "bottom")
        self.config = config
        self.grid = grid
        patch_dim = config.patch_size * config.patch_size * 3
        self.projection = self.child(nc.Linear(f"{prefix}.patch_proj", "bottom", patch_dim, config.hidden, rng))
        self.cls = self.param("cls_embed", rng.normal(0.0, 0.02, size=(1, 1, config.hidden)))
        self.mask_embed = self.param("mask_patch_embed", rng.normal(0.0, 0.02, size=(config.hidden,)))
        self.pos = self.param("pos_embed", rng.normal(0.0, 0.02, size=(grid * grid + 1, config.hidden)))
        self.layers = [
            self.child(TransformerLayer(f"{prefix}.layer{i}", "bottom", config.hidden, config.heads, config.ffn_mult, rng))
            for i in range(config.layers)
        ]

    def project(self, patches) -> nc.Tensor:
        """c(v): linear projection of raw patch vectors, [B, N, hidden]."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape[1] != self.grid * self.grid:
            raise ShapeError("patch_projection", [("patches", patches.shape), ("pos_embed", self.pos.shape)])
        return self.projection(nc.Tensor(patches))

    def add_cls_and_positions(self, patch_embeds: nc.Tensor) -> nc.Tensor:
        b, _, h = patch_embeds.shape
        cls = nc.add(nc.Tensor(np.zeros((b, 1, h))), self.cls)
        return nc.add(nc.concat([cls, patch_embeds], axis=1), self.pos)

    def encode(self, embeds: nc.Tensor, record=None) -> LayerOutputs:
        return _run_layers(self.layers, embeds, record=record)

    def resize_grid(self, new_grid: int) -> None:
        """Resample the grid positional embeddings for a new resolution (the [CLS_V] slot is kept)."""
        if new_grid == self.grid:
            return
        table = self.pos.data
        resized = interpolate_pos_embed(table[1:], new_grid)
        self.pos.data = np.concatenate([table[:1], resized], axis=0)
        self.pos.grad = None
        logger.info(f"Resized vision positional grid {self.grid}x{self.grid} -> {new_grid}x{new_grid}")
        self.grid = new_grid


def patchify_project(images, patch_size: int, encoder: VisionEncoder) -> nc.Tensor:
    """Patch-embedding sequence for a batch of H x W x 3 images: [B, N + 1, hidden]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    patches = np.stack([extract_patches(img, patch_size) for img in images])
    return encoder.add_cls_and_positions(encoder.project(patches))


def interpolate_pos_embed(pos, new_grid: int) -> np.ndarray:
    """Align-corners bilinear resampling of a g x g grid of embeddings to ``new_grid`` x ``new_grid``.

    ``pos`` is [g*g, hidden] (row-major) or [g, g, hidden] and must not include the
    [CLS_V] slot. Returns [new_grid*new_grid, hidden].
    """
    if new_grid < 1:
        raise ShapeError("interpolate_pos_embed", [("new_grid", (new_grid,))])
    pos = np.asarray(pos, dtype=np.float64)
    if pos.ndim == 2:
        g = int(round(math.sqrt(pos.shape[0])))
        if g * g != pos.shape[0]:
            raise ShapeError("interpolate_pos_embed", [("pos", pos.shape)])
        pos = pos.reshape(g, g, -1)
    g = pos.shape[0]
    hidden = pos.shape[-1]
    if g == new_grid:
        return pos.reshape(g * g, hidden).copy()
    if g == 1:
        return np.repeat(pos.reshape(1, hidden), new_grid * new_grid, axis=0)
    axis = np.arange(g, dtype=np.float64)
    interp = RegularGridInterpolator((axis, axis), pos, method="linear")
    coords = np.linspace(0.0, g - 1.0, new_grid)
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    points = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    return interp(points)


class MultiScaleFusion(nc.Module):
    """o = h(x^N) + sum_j g_j(h(x^j)) h(x^j) with scalar linear gates (top group, zero-initialised)."""

    def __init__(self, prefix, hidden, layers, rng):
        super().__init__(prefix, "top")
        self.gates = [
            self.child(nc.Linear(f"{prefix}.gate{j}", "top", hidden, 1, rng, zero=True))
            for j in range(layers)
        ]

    def __call__(self, outputs: LayerOutputs) -> nc.Tensor:
        return multiscale_fuse(outputs, self.gates)


def multiscale_fuse(outputs: LayerOutputs, gates) -> nc.Tensor:
    if len(gates) != len(outputs) - 1:
        raise ShapeError("multiscale_fuse", [("gates", (len(gates),)), ("layer_outputs", (len(outputs),))])
    fused = outputs.top
    for gate, state in zip(gates, outputs.states[:-1]):
        fused = nc.add(fused, nc.mul(gate(state), state))
    return fused
