"""Deterministic synthetic LR/HR text-image pairs and the on-disk dataset format.

Every tensor is float32, channel-first, with values in [0, 1]. A pair holds an
LR image of (channels, height, width) and its HR counterpart at exactly 2x per
axis. Images are stored as 8-bit PNGs, so a disk round trip is only exact to
1/255 per pixel.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from .charset import Label, encode_text, fits_frame_budget, normalize_text
from .config import ModelConfig

_FONT_CANDIDATES = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
]
_MIN_FONT_SIZE = 8

# Sub-stream tags so layout draws and degradation noise never share a stream.
_NOISE_STREAM = 1
_TEXT_STREAM = 2


class DatasetError(RuntimeError):
    """Raised for malformed manifests, missing files, or unusable labels."""


@dataclass
class ImagePair:
    lr: torch.Tensor  # (C, H, W) in [0, 1]
    hr: torch.Tensor  # (C, 2H, 2W) in [0, 1]
    label: Label


@dataclass
class DegradeParams:
    blur_sigma: float = 1.2  # Gaussian blur at HR scale, in pixels
    noise_sigma: float = 0.01  # additive Gaussian noise after downsampling
    downsample_factor: int = 2  # fixed by the 2x SR geometry
    contrast_jitter: float = 0.05  # strength of random fg/bg contrast reduction

    def __post_init__(self):
        if self.downsample_factor != 2:
            raise ValueError("downsample_factor must be 2")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")
        if not 0.0 <= self.contrast_jitter <= 1.0:
            raise ValueError("contrast_jitter must be in [0, 1]")


def _load_font(size: int) -> ImageFont.ImageFont:
    for path in _FONT_CANDIDATES:
        if Path(path).exists():
            return ImageFont.truetype(path, size)
    return ImageFont.load_default(size)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_channel(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation with symmetric (edge-repeating) padding."""
    r = len(kernel) // 2
    padded = np.pad(img, ((r, r), (0, 0)), mode="symmetric")
    rows = sum(kernel[i] * padded[i : i + img.shape[0], :] for i in range(len(kernel)))
    padded = np.pad(rows, ((0, 0), (r, r)), mode="symmetric")
    return sum(kernel[i] * padded[:, i : i + img.shape[1]] for i in range(len(kernel)))


def degrade(hr: torch.Tensor, params: DegradeParams, seed: int) -> torch.Tensor:
    """Gaussian blur -> 2x box-average downsample -> additive noise -> clamp.

    The blur kernel is the sampled Gaussian truncated at ceil(3*sigma) with
    symmetric edge padding; the noise field is drawn in float64 from
    numpy's default_rng seeded with [seed, 1]. Both are part of the format
    contract so the pipeline can be reproduced independently.
    """
    if hr.dim() != 3:
        raise ValueError(f"expected (C, 2H, 2W) image, got shape {tuple(hr.shape)}")
    c, h2, w2 = hr.shape
    if h2 % 2 != 0 or w2 % 2 != 0:
        raise ValueError("HR spatial dims must be even")
    x = hr.detach().cpu().numpy().astype(np.float64)
    if params.blur_sigma > 0:
        kernel = _gaussian_kernel(params.blur_sigma)
        x = np.stack([_blur_channel(x[i], kernel) for i in range(c)])
    x = x.reshape(c, h2 // 2, 2, w2 // 2, 2).mean(axis=(2, 4))
    if params.noise_sigma > 0:
        rng = np.random.default_rng([seed, _NOISE_STREAM])
        x = x + rng.normal(0.0, params.noise_sigma, size=x.shape)
    return torch.from_numpy(np.clip(x, 0.0, 1.0)).to(torch.float32)


def render_pair(
    text: str, seed: int, cfg: ModelConfig, params: DegradeParams | None = None
) -> ImagePair:
    """Render `text` onto a randomized HR canvas and degrade it to the LR side.

    Deterministic: identical arguments give bit-identical tensors.
    """
    if params is None:
        params = DegradeParams()
    norm = normalize_text(text, cfg.charset)
    if not norm:
        raise DatasetError(f"text {text!r} has no charset characters")
    label = encode_text(norm, cfg)
    if not fits_frame_budget(label, cfg):
        raise DatasetError(
            f"label {norm!r} needs more than {cfg.num_tokens} CTC frames"
        )

    hr_h, hr_w = cfg.hr_size
    rng = np.random.default_rng(seed)

    # Largest font size whose rendered bbox fits with a 2px margin.
    margin = 2
    max_size = None
    for size in range(hr_h, _MIN_FONT_SIZE - 1, -1):
        font = _load_font(size)
        x0, y0, x1, y1 = font.getbbox(norm)
        if x1 - x0 <= hr_w - 2 * margin and y1 - y0 <= hr_h - 2 * margin:
            max_size = size
            break
    if max_size is None:
        raise DatasetError(f"text {norm!r} does not fit at minimum font scale")

    size = max(_MIN_FONT_SIZE, int(round(max_size * rng.uniform(0.9, 1.0))))
    font = _load_font(size)
    x0, y0, x1, y1 = font.getbbox(norm)
    tw, th = x1 - x0, y1 - y0
    px = margin + rng.integers(0, max(1, hr_w - 2 * margin - tw + 1))
    py = margin + rng.integers(0, max(1, hr_h - 2 * margin - th + 1))

    # Near-black text over a near-white background with a gentle random
    # shading ramp. The ramp keeps the target's intensity gradient nonzero
    # nearly everywhere (as in camera imagery), and the wide black-to-white
    # span means a reconstruction matching those gradients can only carry a
    # small intensity offset before saturation distorts it.
    bg0 = rng.uniform(0.82, 0.95, size=3)
    bg1 = rng.uniform(0.82, 0.95, size=3)
    fg = rng.uniform(0.01, 0.06, size=3)
    shrink = 1.0 - params.contrast_jitter * rng.uniform(0.0, 1.0)
    bg0 = 0.5 + (bg0 - 0.5) * shrink
    bg1 = 0.5 + (bg1 - 0.5) * shrink
    fg = 0.5 + (fg - 0.5) * shrink

    angle = rng.uniform(0.0, 2.0 * math.pi)
    ys, xs = np.mgrid[0:hr_h, 0:hr_w].astype(np.float64)
    proj = (xs / max(hr_w - 1, 1)) * math.cos(angle) + (
        ys / max(hr_h - 1, 1)
    ) * math.sin(angle)
    lo, hi = proj.min(), proj.max()
    t = (proj - lo) / (hi - lo) if hi > lo else np.zeros_like(proj)
    background = bg0[:, None, None] + (bg1 - bg0)[:, None, None] * t[None]

    mask_img = Image.new("L", (hr_w, hr_h), 0)
    ImageDraw.Draw(mask_img).text((int(px) - x0, int(py) - y0), norm, font=font, fill=255)
    mask = np.asarray(mask_img, dtype=np.float64)[None] / 255.0
    composed = background * (1.0 - mask) + fg[:, None, None] * mask
    hr = torch.from_numpy(composed.astype(np.float32))
    lr = degrade(hr, params, seed)
    return ImagePair(lr=lr, hr=hr, label=label)


def random_text(rng: np.random.Generator, charset: str, min_len: int, max_len: int) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(charset[int(i)] for i in rng.integers(0, len(charset), size=n))


def generate_dataset(
    n: int,
    seed: int,
    cfg: ModelConfig,
    params: DegradeParams | None = None,
    min_len: int = 3,
    max_len: int = 6,
) -> list[ImagePair]:
    """Draw n random strings and render a deterministic pair for each."""
    if params is None:
        params = DegradeParams()
    text_rng = np.random.default_rng([seed, _TEXT_STREAM])
    pairs = []
    for i in range(n):
        text = random_text(text_rng, cfg.charset, min_len, max_len)
        render_seed = int(text_rng.integers(0, 2**31 - 1))
        pairs.append(render_pair(text, render_seed, cfg, params))
    return pairs


def save_image_tensor(t: torch.Tensor, path: str | Path) -> None:
    arr = np.clip(np.round(t.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def load_image_tensor(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def write_manifest(pairs: list[ImagePair], out_dir: str | Path) -> Path:
    """Store pairs as PNGs plus one JSON line per sample; paths are relative."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for i, pair in enumerate(pairs):
            lr_name = f"sample_{i:05d}_lr.png"
            hr_name = f"sample_{i:05d}_hr.png"
            save_image_tensor(pair.lr, out_dir / lr_name)
            save_image_tensor(pair.hr, out_dir / hr_name)
            f.write(
                json.dumps({"lr_path": lr_name, "hr_path": hr_name, "text": pair.label.text})
                + "\n"
            )
    return manifest


def load_dataset(data_dir: str | Path, cfg: ModelConfig | None = None) -> list[ImagePair]:
    """Reconstruct pairs in manifest order; a missing manifest is an empty dataset."""
    if cfg is None:
        cfg = ModelConfig()
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        return []
    pairs = []
    with open(manifest) as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"manifest line {lineno}: malformed JSON ({e})") from e
            for key in ("lr_path", "hr_path", "text"):
                if key not in rec:
                    raise DatasetError(f"manifest line {lineno}: missing field '{key}'")
            lr_path = data_dir / rec["lr_path"]
            hr_path = data_dir / rec["hr_path"]
            for p in (lr_path, hr_path):
                if not p.exists():
                    raise DatasetError(f"manifest line {lineno}: file not found: {p}")
            norm = normalize_text(rec["text"], cfg.charset)
            if not norm:
                raise DatasetError(
                    f"manifest line {lineno}: label {rec['text']!r} normalizes to empty"
                )
            label = encode_text(norm, cfg)
            if not fits_frame_budget(label, cfg):
                raise DatasetError(
                    f"manifest line {lineno}: label {norm!r} exceeds the CTC frame budget"
                )
            pairs.append(
                ImagePair(lr=load_image_tensor(lr_path), hr=load_image_tensor(hr_path), label=label)
            )
    return pairs
