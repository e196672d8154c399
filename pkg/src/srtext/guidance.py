"""Cross-branch guidance: each iteration turns the recognition tokens into a
spatial semantic clue for the SR branch, and the pixel features into token
pixel clues for the recognition branch, emitting an intermediate SR image and
two token distributions along the way.

Routing is strict: the semantic clue is a function of the token feature only,
and the pixel clue is a function of the pixel feature only.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .rec_branch import PatchEmbed
from .sr_branch import SrImageDecoder


@dataclass
class GuidanceOutput:
    """Everything one guidance pass produces.

    semantic_clue: (B, hidden_channels, H, W), consumed by the next SRB stage
    pixel_clue:    (B, num_tokens, token_dim), consumed by the next encoder stage
    sr_image:      (B, channels, 2H, 2W) intermediate super-resolved image
    p:             (B, num_tokens, num_classes) token logits from the carried tokens
    p_hat:         (B, num_tokens, num_classes) token logits from the pixel clue
    """

    semantic_clue: torch.Tensor
    pixel_clue: torch.Tensor
    sr_image: torch.Tensor
    p: torch.Tensor
    p_hat: torch.Tensor


class ClueProjector(nn.Module):
    """Lifts a token-level class distribution to a spatial semantic clue.

    The distribution (B, M, K) is reshaped to a (K, 1, M) map, upsampled by
    four transposed convolutions (each followed by batch norm), and finally
    bilinearly resized to the pixel-feature geometry (hidden_channels, H, W).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.out_size = (cfg.height, cfg.width)
        k = cfg.num_classes
        ch = cfg.hidden_channels
        layers: list[nn.Module] = []
        in_ch = k
        for i, ws in enumerate(cfg.projector_width_strides):
            # Height always doubles; width follows the configured stride.
            layers.append(
                nn.ConvTranspose2d(
                    in_ch,
                    ch,
                    kernel_size=(4, 4 if ws == 2 else 3),
                    stride=(2, ws),
                    padding=1,
                    bias=False,
                )
            )
            layers.append(nn.BatchNorm2d(ch))
            if i < len(cfg.projector_width_strides) - 1:
                layers.append(nn.ReLU(inplace=True))
            in_ch = ch
        self.net = nn.Sequential(*layers)

    def forward(self, p_logits: torch.Tensor) -> torch.Tensor:
        b, m, k = p_logits.shape
        dist = torch.softmax(p_logits, dim=-1)
        x = dist.permute(0, 2, 1).reshape(b, k, 1, m)
        x = self.net(x)
        return F.interpolate(x, size=self.out_size, mode="bilinear", align_corners=False)


class GuidanceStage(nn.Module):
    """One mutual-guidance pass between the two branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, k = cfg.token_dim, cfg.num_classes
        self.to_distribution = nn.Linear(d, k)
        self.project = ClueProjector(cfg)
        self.decode = SrImageDecoder(cfg)
        self.embed = PatchEmbed(
            cfg.hidden_channels // 4,
            (2 * cfg.height, cfg.width // 16),
            (1, cfg.num_tokens),
            d,
        )
        self.from_pixels = nn.Linear(d, k)

    # The five sub-operations, exposed individually so the composition in
    # forward can be cross-checked piecewise.
    def ctc1(self, h_token: torch.Tensor) -> torch.Tensor:
        return self.to_distribution(h_token)

    def project_clue(self, p: torch.Tensor) -> torch.Tensor:
        return self.project(p)

    def conv_decode(self, h_pixel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.decode(h_pixel)

    def vit_clue(self, h_hat: torch.Tensor) -> torch.Tensor:
        return self.embed(h_hat)

    def ctc2(self, clue: torch.Tensor) -> torch.Tensor:
        return self.from_pixels(clue)

    def forward(self, h_pixel: torch.Tensor, h_token: torch.Tensor) -> GuidanceOutput:
        if h_pixel.dim() != 4:
            raise ValueError(f"pixel feature must be 4-d, got {tuple(h_pixel.shape)}")
        if h_token.dim() != 3:
            raise ValueError(f"token feature must be 3-d, got {tuple(h_token.shape)}")
        p = self.ctc1(h_token)
        semantic = self.project_clue(p)
        shuffled, sr = self.conv_decode(h_pixel)
        pixel = self.vit_clue(shuffled)
        p_hat = self.ctc2(pixel)
        return GuidanceOutput(
            semantic_clue=semantic,
            pixel_clue=pixel,
            sr_image=sr,
            p=p,
            p_hat=p_hat,
        )
