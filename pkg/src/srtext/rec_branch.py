"""Recognition branch: patch embedding, transformer blocks, and the
clue-fused encoder stage.

Token features are (B, num_tokens, token_dim) throughout.
"""
from __future__ import annotations

import torch
import torch.nn as nn


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection with a learned positional embedding.

    The patch size is chosen so that the token count comes out to the grid
    given at construction; the input is checked against it at call time.
    """

    def __init__(
        self,
        in_channels: int,
        patch_size: tuple[int, int],
        grid_size: tuple[int, int],
        dim: int,
    ):
        super().__init__()
        self.patch_size = patch_size
        self.grid_size = grid_size
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)
        self.pos = nn.Parameter(torch.zeros(1, grid_size[0] * grid_size[1], dim))
        nn.init.trunc_normal_(self.pos, std=0.02)

    @property
    def num_tokens(self) -> int:
        return self.grid_size[0] * self.grid_size[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        ph, pw = self.patch_size
        if (h // ph, w // pw) != self.grid_size or h % ph or w % pw:
            raise ValueError(
                f"input {h}x{w} does not tile into a {self.grid_size} grid "
                f"of {ph}x{pw} patches"
            )
        tokens = self.proj(x).flatten(2).transpose(1, 2)
        return tokens + self.pos


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block; optionally returns attention weights."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(
        self, x: torch.Tensor, need_attn: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        y = self.norm1(x)
        attn_out, attn_weights = self.attn(
            y, y, y, need_weights=need_attn, average_attn_weights=True
        )
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, attn_weights


class FusionEncoderStage(nn.Module):
    """Transformer stage over the previous tokens concatenated with the clue.

    The pixel clue tokens are appended after the carried tokens along the
    sequence axis; after the blocks run, only the leading positions (the
    carried-token slots) are returned, so the stage maps
    (B, M, D) x (B, M, D) -> (B, M, D).
    """

    def __init__(self, dim: int, heads: int, depth: int):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))

    def forward(
        self,
        h_prev: torch.Tensor,
        clue: torch.Tensor,
        need_attn: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if h_prev.shape != clue.shape:
            raise ValueError(
                f"token feature {tuple(h_prev.shape)} and pixel clue "
                f"{tuple(clue.shape)} must have the same shape"
            )
        m = h_prev.shape[1]
        x = torch.cat([h_prev, clue], dim=1)
        maps = []
        for block in self.blocks:
            x, attn = block(x, need_attn=need_attn)
            if attn is not None:
                maps.append(attn)
        return x[:, :m], maps
