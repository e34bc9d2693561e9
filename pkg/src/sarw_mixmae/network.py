"""Hierarchical shifted-window encoder, dual-reconstruction decoder and task heads.

Tensors are channels-last inside the encoder: ``(B, H, W, C)``.  Mix masks
enter as a ``(B, G, G)`` unit grid (0 = first source, 1 = second); every
stage expands it to its own token grid and attention is blocked between
tokens of different provenance.
"""
from __future__ import annotations

from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import STAGE_STRIDES, ModelConfig
from .errors import NumericDivergenceError, ShapeError


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, ws * ws, C)"""
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


def shift_region_ids(grid: int, ws: int, shift: int) -> torch.Tensor:
    """Region label of each token after a cyclic shift, (nW, ws*ws)."""
    img = torch.zeros(1, grid, grid, 1)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = cnt
            cnt += 1
    return window_partition(img, ws).squeeze(-1)


def expand_mask(unit_mask: torch.Tensor, grid: int) -> torch.Tensor:
    """(B, G, G) unit grid -> (B, grid, grid) by exact replication."""
    factor = grid // unit_mask.shape[-1]
    return unit_mask.repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with relative position bias."""

    def __init__(self, dim, heads, ws):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.register_buffer("relative_position_index", relative_position_index(ws), persistent=False)

    def forward(self, x, blocked: Optional[torch.Tensor] = None):
        # x: (B_, N, C); blocked: (B_, N, N) bool, True where attention is forbidden
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)].view(N, N, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if blocked is not None:
            attn = attn.masked_fill(blocked.unsqueeze(1), float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, grid, ws, shift, mlp_ratio):
        super().__init__()
        self.grid, self.ws, self.shift = grid, ws, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, ws)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if shift:
            ids = shift_region_ids(grid, ws, shift)
            self.register_buffer("shift_blocked", ids[:, :, None] != ids[:, None, :], persistent=False)
        else:
            self.shift_blocked = None

    def forward(self, x, token_mask: Optional[torch.Tensor] = None):
        B, H, W, C = x.shape
        h = self.norm1(x)
        if self.shift:
            h = torch.roll(h, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = window_partition(h, self.ws)
        blocked = None
        if token_mask is not None:
            m = token_mask
            if self.shift:
                m = torch.roll(m, shifts=(-self.shift, -self.shift), dims=(1, 2))
            mw = window_partition(m.unsqueeze(-1), self.ws).squeeze(-1)
            blocked = mw[:, :, None] != mw[:, None, :]
        if self.shift_blocked is not None:
            sb = self.shift_blocked.repeat(B, 1, 1)
            blocked = sb if blocked is None else blocked | sb
        out = self.attn(windows, blocked)
        out = window_reverse(out, self.ws, H, W)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift, self.shift), dims=(1, 2))
        x = x + out
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat, then LayerNorm and a linear map to the next width."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x):
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        return self.reduction(self.norm(torch.cat([x0, x1, x2, x3], dim=-1)))


class PatchEmbed(nn.Module):
    """Non-overlapping 4x4 patch projection plus a learned absolute position embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.stage_grids[0]
        self.proj = nn.Conv2d(cfg.in_channels, cfg.stage_channels[0], cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, g, g, cfg.stage_channels[0]))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        c = self.cfg
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.in_channels, c.input_size, c.input_size):
            raise ShapeError(
                f"patch_embed expects (B, {c.in_channels}, {c.input_size}, {c.input_size}), got {tuple(x.shape)}"
            )
        return self.proj(x).permute(0, 2, 3, 1) + self.pos_embed


class SwinEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.embed_norm = nn.LayerNorm(cfg.stage_channels[0])
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(4):
            grid, ws = cfg.stage_grids[i], cfg.effective_window(i)
            shift = ws // 2 if grid > ws else 0
            self.stages.append(nn.ModuleList(
                SwinBlock(cfg.stage_channels[i], cfg.stage_heads[i], grid, ws, shift if j % 2 else 0, cfg.mlp_ratio)
                for j in range(cfg.stage_depths[i])
            ))
            if i < 3:
                self.merges.append(PatchMerging(cfg.stage_channels[i], cfg.stage_channels[i + 1]))
        self.norm = nn.LayerNorm(cfg.stage_channels[-1])

    def forward(self, x, unit_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Return the final ``(B, g, g, C4)`` grid and the per-stage outputs.

        ``unit_mask`` is ``None`` (or all zeros) for ordinary inference.
        """
        x = self.embed_norm(self.patch_embed(x))
        feats = []
        for i, blocks in enumerate(self.stages):
            tm = None
            if unit_mask is not None:
                tm = expand_mask(unit_mask, self.cfg.stage_grids[i])
            for blk in blocks:
                x = blk(x, tm)
            if i == 3:
                x = self.norm(x)
            if not torch.isfinite(x).all():
                raise NumericDivergenceError(f"non-finite activation in encoder stage {i + 1}")
            feats.append(x)
            if i < 3:
                x = self.merges[i](x)
        return x, feats

    def pooled(self, x) -> torch.Tensor:
        """Global-average-pooled final feature, ``(B, C4)``."""
        final, _ = self.forward(x)
        return final.mean(dim=(1, 2))


class DecoderBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class MixDecoder(nn.Module):
    """Unmix final tokens into one sequence per source and predict pixels.

    The sequence for source ``a`` keeps tokens at 0-units and puts a learned
    placeholder at 1-units; the one for ``b`` the reverse.  Both pass through
    the same full-attention decoder.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.stage_grids[-1]
        self.token_px = STAGE_STRIDES[-1]
        self.embed = nn.Linear(cfg.stage_channels[-1], cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, cfg.decoder_dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(cfg.decoder_dim)
        self.pred = nn.Linear(cfg.decoder_dim, cfg.in_channels * self.token_px ** 2)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        B, L, _ = tokens.shape
        g, p, c = self.cfg.stage_grids[-1], self.token_px, self.cfg.in_channels
        x = tokens.reshape(B, g, g, c, p, p).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(B, c, g * p, g * p)

    def forward(self, final_tokens: torch.Tensor, unit_mask: torch.Tensor):
        B, g, _, _ = final_tokens.shape
        z = self.embed(final_tokens.reshape(B, g * g, -1))
        m = expand_mask(unit_mask, g).reshape(B, g * g, 1).to(z.dtype)
        za = z * (1 - m) + self.mask_token * m
        zb = z * m + self.mask_token * (1 - m)
        x = torch.cat([za, zb], dim=0) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        pix = self.unpatchify(self.pred(self.norm(x)))
        return pix[:B], pix[B:]


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class MixAutoencoder(nn.Module):
    """Encoder plus dual-reconstruction decoder used for pretraining."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg)
        self.decoder = MixDecoder(cfg)
        self.apply(_init_weights)

    def forward(self, mixed: torch.Tensor, unit_mask: torch.Tensor):
        final, _ = self.encoder(mixed, unit_mask)
        return self.decoder(final, unit_mask)


class MultiLabelClassifier(nn.Module):
    """Encoder, global average pooling and one linear layer to label logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg)
        self.head = nn.Linear(cfg.stage_channels[-1], cfg.label_count)
        self.apply(_init_weights)

    def forward(self, x):
        return self.head(self.encoder.pooled(x))


FLOOD_TILES = 4  # tiles per side of a flood image


class FloodPairClassifier(nn.Module):
    """Two-class head on the mean per-tile feature difference of an image pair.

    Each 512x512 image is cut into a 4x4 grid of 128x128 tiles; tiles go
    through the encoder, the pooled feature of each reference tile is
    subtracted from its query counterpart and the 16 differences averaged.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg)
        self.head = nn.Linear(cfg.stage_channels[-1], 2)
        self.apply(_init_weights)

    @property
    def image_size(self) -> int:
        return self.cfg.input_size * FLOOD_TILES

    def tiles(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, 4s, 4s) -> (B * 16, C, s, s), row-major tile order."""
        s, n = self.cfg.input_size, FLOOD_TILES
        if x.dim() != 4 or x.shape[-1] != s * n or x.shape[-2] != s * n:
            raise ShapeError(f"flood images must be {s * n}x{s * n}, got {tuple(x.shape)}")
        B, C = x.shape[:2]
        x = x.reshape(B, C, n, s, n, s).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(B * n * n, C, s, s)

    def pair_feature(self, reference: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        # separate, identically shaped encoder calls keep self-pairs exactly zero
        B = reference.shape[0]
        fr = self.encoder.pooled(self.tiles(reference)).view(B, FLOOD_TILES ** 2, -1)
        fq = self.encoder.pooled(self.tiles(query)).view(B, FLOOD_TILES ** 2, -1)
        return (fq - fr).mean(dim=1)

    def forward(self, reference, query):
        return self.head(self.pair_feature(reference, query))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
