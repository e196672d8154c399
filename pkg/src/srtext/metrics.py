"""Evaluation: image fidelity (PSNR/SSIM), greedy CTC decoding, word
accuracy, and compute profiling (analytic MAC counts, parameter census,
warm latency).
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .charset import normalize_text
from .config import ModelConfig
from .datagen import ImagePair, save_image_tensor

_PSNR_CAP_DB = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _to_numpy(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical inputs return inf; use mean_psnr for aggregation, which caps
    the sentinel at 100 dB unless every pair is identical.
    """
    x, y = _to_numpy(a), _to_numpy(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def mean_psnr(values: Sequence[float]) -> float:
    """Mean PSNR with the inf sentinel capped at 100 dB, unless all values
    are inf (then the mean is inf)."""
    if not values:
        raise ValueError("no PSNR values to aggregate")
    if all(np.isinf(v) for v in values):
        return float("inf")
    return float(np.mean([min(v, _PSNR_CAP_DB) for v in values]))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a, b) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, data range 1.0; valid windows only, averaged over channels."""
    x, y = _to_numpy(a), _to_numpy(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W) images, got {x.shape}")
    h, w = x.shape[-2:]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} is smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    window = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2

    def filt(img: np.ndarray) -> np.ndarray:
        patches = np.lib.stride_tricks.sliding_window_view(
            img, (_SSIM_WINDOW, _SSIM_WINDOW), axis=(-2, -1)
        )
        return np.tensordot(patches, window, axes=([-2, -1], [0, 1]))

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def greedy_ctc_decode(p, cfg: ModelConfig) -> str:
    """Best-path decoding: per-frame argmax, collapse adjacent repeats, drop
    blanks. Ties break toward the lowest class index."""
    arr = _to_numpy(p)
    if arr.ndim != 2 or arr.shape[1] != cfg.num_classes:
        raise ValueError(
            f"expected ({cfg.num_tokens}, {cfg.num_classes}) scores, got {arr.shape}"
        )
    ids = np.argmax(arr, axis=1)
    keep = np.concatenate([[True], ids[1:] != ids[:-1]])
    ids = ids[keep]
    ids = ids[ids != cfg.blank_index]
    return "".join(cfg.charset[i - 1] for i in ids)


def word_accuracy(preds: Sequence[str], gts: Sequence[str], charset: str | None = None) -> float:
    """Fraction of exact matches after normalizing both sides."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("nothing to score")
    hits = sum(
        normalize_text(p, charset) == normalize_text(g, charset)
        for p, g in zip(preds, gts)
    )
    return hits / len(preds)


def bicubic_upscale(lr: torch.Tensor) -> torch.Tensor:
    """2x bicubic upsampling baseline, clamped to [0, 1]."""
    batched = lr.dim() == 4
    x = lr if batched else lr.unsqueeze(0)
    up = F.interpolate(x, scale_factor=2, mode="bicubic", align_corners=False)
    up = up.clamp(0.0, 1.0)
    return up if batched else up.squeeze(0)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    word_accuracy: float
    psnr_db: float
    ssim: float
    n_samples: int
    per_sample: list[tuple[str, str, float, float]] | None = None
    per_iteration: dict | None = None

    def to_dict(self) -> dict:
        def enc(v: float):
            return "inf" if np.isinf(v) else float(v)

        out = {
            "word_accuracy": self.word_accuracy,
            "psnr_db": enc(self.psnr_db),
            "ssim": self.ssim,
            "n_samples": self.n_samples,
        }
        if self.per_sample is not None:
            out["per_sample"] = [
                {"gt": gt, "pred": pred, "psnr_db": enc(p), "ssim": s}
                for gt, pred, p, s in self.per_sample
            ]
        if self.per_iteration is not None:
            out["per_iteration"] = {
                key: ["inf" if isinstance(v, float) and np.isinf(v) else v for v in vals]
                for key, vals in self.per_iteration.items()
            }
        return out


def evaluate(
    model,
    dataset: Sequence[ImagePair],
    cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    per_iteration: bool = False,
    batch_size: int = 16,
) -> EvalReport:
    """Scores a model (or checkpoint) on labeled pairs.

    Word accuracy is decoded from the final token distribution; PSNR/SSIM
    compare the final SR image with HR. With per_iteration, every
    intermediate distribution and SR image is scored too. SR images and the
    report are written when out_dir is given.
    """
    if not isinstance(model, nn.Module):
        from .pipeline import model_from_checkpoint

        model = model_from_checkpoint(model)
    if cfg is None:
        cfg = model.cfg
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    from .pipeline import make_batch

    model.eval()
    gts: list[str] = []
    preds: list[str] = []
    psnrs: list[float] = []
    ssims: list[float] = []
    per_sample: list[tuple[str, str, float, float]] = []
    iter_preds: list[list[str]] | None = None
    iter_hat_preds: list[list[str]] | None = None
    iter_psnrs: list[list[float]] | None = None
    iter_ssims: list[list[float]] | None = None

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    sample_idx = 0
    with torch.no_grad():
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            lr, hr, labels = make_batch(chunk, cfg)
            trace = model(lr)
            if per_iteration and iter_preds is None:
                iter_preds = [[] for _ in trace.p_list]
                iter_hat_preds = [[] for _ in trace.p_hat_list]
                iter_psnrs = [[] for _ in trace.sr_images]
                iter_ssims = [[] for _ in trace.sr_images]
            for j, label in enumerate(labels):
                gt = label.text
                pred = greedy_ctc_decode(trace.p_list[-1][j], cfg)
                sr = trace.sr_images[-1][j]
                p_db = psnr(sr, hr[j])
                s_val = ssim(sr, hr[j])
                gts.append(gt)
                preds.append(pred)
                psnrs.append(p_db)
                ssims.append(s_val)
                per_sample.append((gt, pred, p_db, s_val))
                if per_iteration:
                    for k, p in enumerate(trace.p_list):
                        iter_preds[k].append(greedy_ctc_decode(p[j], cfg))
                    for k, p in enumerate(trace.p_hat_list):
                        iter_hat_preds[k].append(greedy_ctc_decode(p[j], cfg))
                    for k, img in enumerate(trace.sr_images):
                        iter_psnrs[k].append(psnr(img[j], hr[j]))
                        iter_ssims[k].append(ssim(img[j], hr[j]))
                if out_path is not None:
                    for k, img in enumerate(trace.sr_images, start=1):
                        save_image_tensor(
                            img[j], out_path / f"sample_{sample_idx:05d}_iter{k}.png"
                        )
                sample_idx += 1

    breakdown = None
    if per_iteration:
        breakdown = {
            "p_accuracy": [word_accuracy(p, gts, cfg.charset) for p in iter_preds],
            "p_hat_accuracy": [
                word_accuracy(p, gts, cfg.charset) for p in iter_hat_preds
            ],
            "sr_psnr_db": [mean_psnr(vals) for vals in iter_psnrs],
            "sr_ssim": [float(np.mean(vals)) for vals in iter_ssims],
        }
    report = EvalReport(
        word_accuracy=word_accuracy(preds, gts, cfg.charset),
        psnr_db=mean_psnr(psnrs),
        ssim=float(np.mean(ssims)),
        n_samples=len(pairs),
        per_sample=per_sample,
        per_iteration=breakdown,
    )
    if out_path is not None:
        try:
            (out_path / "report.json").write_text(
                json.dumps(report.to_dict(), indent=2) + "\n"
            )
        except OSError as exc:
            raise OSError(f"cannot write report to {out_path}: {exc}") from exc
    return report


# ---------------------------------------------------------------------------
# Profiling


@dataclass
class ProfileReport:
    macs: int
    params: int
    latency_ms: float
    per_module: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "macs": self.macs,
            "params": self.params,
            "latency_ms": self.latency_ms,
            "per_module": dict(self.per_module),
        }


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _conv2d_macs(mod: nn.Conv2d, args, output) -> int:
    out_elems = output.numel()
    per_elem = (mod.in_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]
    return out_elems * per_elem


def _conv_transpose2d_macs(mod: nn.ConvTranspose2d, args, output) -> int:
    in_elems = args[0].numel()
    per_elem = (mod.out_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]
    return in_elems * per_elem


def _linear_macs(mod: nn.Linear, args, output) -> int:
    rows = output.numel() // mod.out_features
    return rows * mod.in_features * mod.out_features


def _gru_macs(mod: nn.GRU, args, output) -> int:
    x = args[0]
    steps = x.shape[0] * x.shape[1]  # batch x time in either layout
    dirs = 2 if mod.bidirectional else 1
    total = 0
    in_size = mod.input_size
    for _ in range(mod.num_layers):
        total += steps * 3 * (in_size * mod.hidden_size + mod.hidden_size**2) * dirs
        in_size = mod.hidden_size * dirs
    return total


def _attention_macs(mod: nn.MultiheadAttention, args, output) -> int:
    q, k = args[0], args[1]
    if mod.batch_first:
        b, tq, d = q.shape
        tk = k.shape[1]
    else:
        tq, b, d = q.shape
        tk = k.shape[0]
    proj = b * (2 * tq * d * d + 2 * tk * d * d)  # q and out; k and v
    scores = b * 2 * tq * tk * d
    return proj + scores


_MAC_RULES = {
    nn.Conv2d: _conv2d_macs,
    nn.ConvTranspose2d: _conv_transpose2d_macs,
    nn.Linear: _linear_macs,
    nn.GRU: _gru_macs,
    nn.MultiheadAttention: _attention_macs,
}


def module_macs(module: nn.Module, *inputs) -> tuple[int, dict[str, int]]:
    """Analytic multiply-accumulate count for one forward pass.

    Counts convolutions, transposed convolutions, affine maps, recurrences,
    and attention (projections plus the two score/mix terms); element-wise
    and normalization work is excluded. Returns the total and a per-module
    breakdown keyed by qualified name; the total is their sum.
    """
    counts: dict[str, int] = {}
    handles = []

    def make_hook(name, rule):
        def hook(mod, args, output):
            counts[name] = counts.get(name, 0) + rule(mod, args, output)

        return hook

    for name, sub in module.named_modules():
        rule = _MAC_RULES.get(type(sub))
        if rule is not None:
            handles.append(sub.register_forward_hook(make_hook(name or "self", rule)))
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in handles:
            h.remove()
    return sum(counts.values()), counts


def profile(model: nn.Module, cfg: ModelConfig, runs: int = 11) -> ProfileReport:
    """MACs, parameter count, and median warm latency for one LR image."""
    model.eval()
    torch.manual_seed(0)
    x = torch.rand(1, cfg.channels, cfg.height, cfg.width)
    macs, per_module = module_macs(model, x)
    with torch.no_grad():
        for _ in range(3):
            model(x)
        times = []
        for _ in range(max(runs, 10)):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1000.0)
    return ProfileReport(
        macs=macs,
        params=count_params(model),
        latency_ms=statistics.median(times),
        per_module=per_module,
    )


def iteration_stage_parameter_count(cfg: ModelConfig) -> int:
    """Parameters added by one more iteration: one SRB stage, one encoder
    stage, and one guidance stage."""
    from .guidance import GuidanceStage
    from .rec_branch import FusionEncoderStage
    from .sr_branch import ClueGuidedSrb

    stage = nn.ModuleList(
        [
            ClueGuidedSrb(cfg),
            FusionEncoderStage(cfg.token_dim, cfg.encoder_heads, cfg.encoder_depth),
            GuidanceStage(cfg),
        ]
    )
    return count_params(stage)
