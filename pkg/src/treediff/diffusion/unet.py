"""Noise-prediction U-Net with hierarchical cluster conditioning.

The leaf reconstruction (when enabled) is concatenated channel-wise with the
noisy input; hierarchy embeddings are projected and added to the time
embedding, so a zeroed projection reduces exactly to the unconditional path.
Path embeddings get one projection per tree depth and the projections are
summed, which keeps differently shaped (pruned) trees conditionable.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..conditioning import CondVariant, ConditioningSignal
from ..errors import ValidationError
from ..tree.networks import _gn, _zero_init, sinusoidal_embedding


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, dropout: float):
        super().__init__()
        self.norm1 = _gn(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = _gn(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = _zero_init(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _gn(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = _zero_init(nn.Conv2d(channels, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q = q.reshape(n, c, h * w).transpose(1, 2)
        k = k.reshape(n, c, h * w)
        v = v.reshape(n, c, h * w).transpose(1, 2)
        attn = torch.softmax(q @ k / (c**0.5), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ConditionalUNet(nn.Module):
    """Predicts the injected noise given the noisy image, step, and signal."""

    def __init__(
        self,
        *,
        data_channels: int,
        resolution: int,
        base_channels: int,
        channel_multipliers: tuple[int, ...],
        res_blocks: int,
        attention_resolutions: tuple[int, ...] = (),
        dropout: float = 0.0,
        variant: CondVariant = CondVariant(),
        max_leaves: int = 4,
        latent_channels: int = 4,
        repr_size: int = 4,
        max_depth: int = 3,
    ):
        super().__init__()
        levels = len(channel_multipliers)
        if resolution % (2 ** (levels - 1)) != 0:
            raise ValidationError("resolution must halve cleanly once per level")
        self.variant = variant
        self.data_channels = data_channels
        in_ch = data_channels * (2 if variant.recon else 1)
        temb_dim = base_channels * 4
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.base_channels = base_channels

        flat = latent_channels * repr_size * repr_size
        self.leaf_table = nn.Embedding(max_leaves, temb_dim) if variant.leaf else None
        self.embed_proj = nn.Linear(flat, temb_dim) if variant.embed else None
        self.path_projs = (
            nn.ModuleList([nn.Linear(flat, temb_dim) for _ in range(max_depth + 1)])
            if variant.path
            else None
        )

        self.conv_in = nn.Conv2d(in_ch, base_channels, 3, padding=1)
        ch = base_channels
        skip_chs = [ch]
        res = resolution
        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        self.level_res = []
        for level, mult in enumerate(channel_multipliers):
            out_ch = base_channels * mult
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(res_blocks):
                blocks.append(ResBlock(ch, out_ch, temb_dim, dropout))
                attns.append(AttnBlock(out_ch) if res in attention_resolutions else nn.Identity())
                ch = out_ch
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            self.level_res.append(res)
            if level != levels - 1:
                self.downsamples.append(Downsample(ch))
                res //= 2
                skip_chs.append(ch)
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = ResBlock(ch, ch, temb_dim, dropout)
        self.mid_attn = AttnBlock(ch) if attention_resolutions else nn.Identity()
        self.mid_block2 = ResBlock(ch, ch, temb_dim, dropout)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(levels)):
            out_ch = base_channels * channel_multipliers[level]
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(res_blocks + 1):
                blocks.append(ResBlock(ch + skip_chs.pop(), out_ch, temb_dim, dropout))
                attns.append(
                    AttnBlock(out_ch) if self.level_res[level] in attention_resolutions else nn.Identity()
                )
                ch = out_ch
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            self.upsamples.append(Upsample(ch) if level != 0 else nn.Identity())

        self.out_norm = _gn(ch)
        self.out_conv = _zero_init(nn.Conv2d(ch, data_channels, 3, padding=1))

    # -- conditioning ---------------------------------------------------------

    def _check_signal(self, cond: ConditioningSignal | None) -> None:
        if cond is None:
            if self.variant.recon:
                raise ValidationError("this denoiser concatenates a reconstruction; signal required")
            return
        if cond.variant != self.variant:
            raise ValidationError(
                f"conditioning variant {cond.variant.label!r} does not match "
                f"denoiser variant {self.variant.label!r}"
            )

    def cond_vector(self, cond: ConditioningSignal | None, n: int, dtype, device) -> torch.Tensor:
        vec = torch.zeros(n, self.temb_dim, dtype=dtype, device=device)
        if cond is None:
            return vec
        if self.leaf_table is not None:
            if cond.leaf_index is None:
                raise ValidationError("signal lacks leaf indices")
            vec = vec + self.leaf_table(cond.leaf_index.to(device))
        if self.embed_proj is not None:
            if cond.leaf_embedding is None:
                raise ValidationError("signal lacks a leaf embedding")
            vec = vec + self.embed_proj(cond.leaf_embedding.to(dtype).flatten(1))
        if self.path_projs is not None:
            if cond.path_embeddings is None:
                raise ValidationError("signal lacks path embeddings")
            stack = cond.path_embeddings.to(dtype)
            mask = cond.path_mask.to(dtype)
            for depth, proj in enumerate(self.path_projs):
                if depth >= stack.shape[1]:
                    break
                vec = vec + proj(stack[:, depth].flatten(1)) * mask[:, depth : depth + 1]
        return vec

    # -- forward ---------------------------------------------------------------

    def forward(self, x_t: torch.Tensor, t: torch.Tensor | int, cond: ConditioningSignal | None = None) -> torch.Tensor:
        self._check_signal(cond)
        n = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(n)
        h = x_t
        if self.variant.recon:
            recon = cond.recon.to(x_t.dtype)
            h = torch.cat([h, recon * 2.0 - 1.0], dim=1)  # recon arrives in [0, 1]
        temb = self.time_mlp(sinusoidal_embedding(t.to(x_t.dtype), self.base_channels))
        temb = temb + self.cond_vector(cond, n, x_t.dtype, x_t.device)

        h = self.conv_in(h)
        skips = [h]
        for level in range(len(self.down_blocks)):
            for block, attn in zip(self.down_blocks[level], self.down_attns[level]):
                h = attn(block(h, temb))
                skips.append(h)
            if not isinstance(self.downsamples[level], nn.Identity):
                h = self.downsamples[level](h)
                skips.append(h)
        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb)), temb)
        for i in range(len(self.up_blocks)):
            for block, attn in zip(self.up_blocks[i], self.up_attns[i]):
                h = attn(block(torch.cat([h, skips.pop()], dim=1), temb))
            h = self.upsamples[i](h)
        return self.out_conv(F.silu(self.out_norm(h)))


def build_denoiser(config, variant: CondVariant) -> ConditionalUNet:
    """Construct the denoiser for the experiment's data and tree geometry."""
    d = config.diffusion
    return ConditionalUNet(
        data_channels=config.data.channels,
        resolution=config.data.resolution,
        base_channels=d.base_channels,
        channel_multipliers=d.channel_multipliers,
        res_blocks=d.res_blocks,
        attention_resolutions=d.attention_resolutions,
        dropout=d.dropout,
        variant=variant,
        max_leaves=config.tree.max_leaves,
        latent_channels=config.tree.latent_channels,
        repr_size=config.tree.repr_size,
        max_depth=config.tree.max_depth,
    )
