"""End-to-end model, training loop, and checkpointing.

The forward pass alternates guidance and branch updates: starting from the
encoded pixel feature and the embedded tokens, each iteration produces both
clues (plus an intermediate SR image and two token-distribution readouts),
then advances the SR branch one SRB stage and the recognition branch one
fused encoder stage. A final decoder and a final token head close the trace,
giving L+1 SR images and 2L+1 distributions for L iterations.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .charset import Label, encode_text, fits_frame_budget
from .config import ModelConfig, validate_config
from .datagen import ImagePair
from .guidance import GuidanceStage
from .losses import LossReport, NumericsError, total_loss
from .rec_branch import FusionEncoderStage, PatchEmbed
from .sr_branch import AffineRectifier, ClueGuidedSrb, PixelEncoder, SrImageDecoder

_CHECKPOINT_VERSION = 1


@dataclass
class IterationTrace:
    """Everything a forward pass emits, indexed by iteration.

    sr_images: L+1 images (B, C, 2H, 2W); the first L come from the guidance
    stages, the last from the final decoder. p_list: L+1 token logits
    (B, M, K); the first L from the guidance stages, the last from the final
    head. p_hat_list: L pixel-clue logits (B, M, K). The final branch
    features are kept for inspection.
    """

    sr_images: list[torch.Tensor]
    p_list: list[torch.Tensor]
    p_hat_list: list[torch.Tensor]
    final_feature_p: torch.Tensor
    final_feature_s: torch.Tensor


class SrTextNet(nn.Module):
    """Joint SR + recognition network with iterative cross-branch guidance."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        validate_config(cfg)
        self.cfg = cfg
        self.rectifier = AffineRectifier(cfg)
        self.pixel_encoder = PixelEncoder(cfg)
        self.token_embed = PatchEmbed(
            cfg.channels,
            (cfg.height, cfg.width // 32),
            (1, cfg.num_tokens),
            cfg.token_dim,
        )
        self.guidance_stages = nn.ModuleList(
            GuidanceStage(cfg) for _ in range(cfg.iterations)
        )
        self.srb_stages = nn.ModuleList(
            ClueGuidedSrb(cfg) for _ in range(cfg.iterations)
        )
        self.rec_stages = nn.ModuleList(
            FusionEncoderStage(cfg.token_dim, cfg.encoder_heads, cfg.encoder_depth)
            for _ in range(cfg.iterations)
        )
        self.sr_decoder = SrImageDecoder(cfg)
        self.ctc_head = nn.Linear(cfg.token_dim, cfg.num_classes)

    def _check_input(self, lr: torch.Tensor) -> None:
        cfg = self.cfg
        if lr.dim() != 4 or lr.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise ValueError(
                f"expected LR batch of shape (B, {cfg.channels}, {cfg.height}, "
                f"{cfg.width}), got {tuple(lr.shape)}"
            )

    def forward(self, lr: torch.Tensor) -> IterationTrace:
        self._check_input(lr)
        h_pixel = self.pixel_encoder(self.rectifier(lr))
        h_token = self.token_embed(lr)

        sr_images: list[torch.Tensor] = []
        p_list: list[torch.Tensor] = []
        p_hat_list: list[torch.Tensor] = []
        for i, (guide, srb, fuse) in enumerate(
            zip(self.guidance_stages, self.srb_stages, self.rec_stages), start=1
        ):
            try:
                out = guide(h_pixel, h_token)
                h_pixel = srb(h_pixel, out.semantic_clue)
                h_token, _ = fuse(h_token, out.pixel_clue)
            except Exception as exc:
                raise RuntimeError(f"iteration {i}: {exc}") from exc
            sr_images.append(out.sr_image)
            p_list.append(out.p)
            p_hat_list.append(out.p_hat)
        _, sr_final = self.sr_decoder(h_pixel)
        sr_images.append(sr_final)
        p_list.append(self.ctc_head(h_token))
        return IterationTrace(
            sr_images=sr_images,
            p_list=p_list,
            p_hat_list=p_hat_list,
            final_feature_p=h_pixel,
            final_feature_s=h_token,
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> SrTextNet:
    """Constructs a model with seeded parameter initialization."""
    torch.manual_seed(seed)
    return SrTextNet(cfg)


@dataclass
class Checkpoint:
    cfg: ModelConfig
    model_state: dict
    optimizer_state: dict
    step: int
    seed: int


@dataclass
class TrainOptions:
    """Knobs for fit. steps is the total step count, including any steps
    already recorded in a resumed checkpoint."""

    steps: int
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    log_path: str | Path | None = None
    checkpoint_path: str | Path | None = None
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_samples: int = 16


def _label_of(pair: ImagePair, cfg: ModelConfig) -> Label:
    label = pair.label
    if isinstance(label, str):
        label = encode_text(label, cfg)
    return label


def make_batch(
    pairs: Sequence[ImagePair],
    cfg: ModelConfig,
    indices: Iterable[int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, list[Label]]:
    """Stacks image pairs into (lr, hr, labels) tensors, checking labels."""
    chosen = list(pairs) if indices is None else [pairs[i] for i in indices]
    if not chosen:
        raise ValueError("batch is empty")
    labels = []
    for pair in chosen:
        label = _label_of(pair, cfg)
        if not fits_frame_budget(label, cfg):
            raise ValueError(
                f"label {label.text!r} does not fit the {cfg.num_tokens}-frame budget"
            )
        labels.append(label)
    lr = torch.stack([torch.as_tensor(p.lr) for p in chosen])
    hr = torch.stack([torch.as_tensor(p.hr) for p in chosen])
    return lr, hr, labels


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic batch composition as a pure function of (seed, step).

    Sampling without replacement inside a step; when the batch is larger
    than the dataset, whole shuffled copies are concatenated (cycling).
    """
    rng = np.random.default_rng([seed, step])
    if batch_size <= n:
        return rng.choice(n, size=batch_size, replace=False)
    parts = [rng.permutation(n) for _ in range(-(-batch_size // n))]
    return np.concatenate(parts)[:batch_size]


def make_optimizer(
    model: nn.Module, lr: float = 1e-4, weight_decay: float = 0.01
) -> torch.optim.AdamW:
    """AdamW with decay on weight matrices only; biases, norm scales, and
    other one-dimensional parameters are exempt (decaying an output bias
    would drag every prediction toward a fixed point regardless of data).

    beta2 is 0.99 rather than the 0.999 default: the recognition terms
    dominate the early gradient mix, and a thousand-step second-moment
    memory of that era keeps scaling down the image-loss direction long
    after those terms have converged.
    """
    decay, no_decay = [], []
    for p in model.parameters():
        (no_decay if p.dim() <= 1 else decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=lr,
        betas=(0.9, 0.99),
    )


def train_step(
    model: SrTextNet,
    optimizer: torch.optim.Optimizer,
    batch: tuple[torch.Tensor, torch.Tensor, Sequence[Label]],
) -> LossReport:
    """One optimization step on a batch; returns the detached loss report."""
    lr, hr, labels = batch
    model.train()
    trace = model(lr)
    report = total_loss(trace, hr, labels)
    if not torch.isfinite(report.total):
        for term in report.terms:
            if not np.isfinite(term.value):
                raise NumericsError(
                    f"non-finite loss: term {term.name!r} at iteration "
                    f"{term.iteration} is {term.value}"
                )
        raise NumericsError("non-finite total loss")
    optimizer.zero_grad()
    report.total.backward()
    optimizer.step()
    return report.detached()


def _log_line(stream: IO[str] | None, record: dict) -> None:
    if stream is not None:
        stream.write(json.dumps(record) + "\n")
        stream.flush()


def fit(
    dataset: Sequence[ImagePair],
    cfg: ModelConfig,
    opts: TrainOptions,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Trains with AdamW (decoupled weight decay) and returns the final state.

    Fully deterministic for a fixed seed: initialization is seeded, and each
    step's batch is a pure function of (seed, step), so resuming from a
    checkpoint reproduces the uninterrupted run exactly.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    if resume is not None:
        _compare_cfg(resume.cfg, cfg)
    model = build_model(cfg, opts.seed)
    optimizer = make_optimizer(model, opts.lr, opts.weight_decay)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        start = resume.step

    log_stream = None
    if opts.log_path is not None:
        log_stream = open(opts.log_path, "a" if resume is not None else "w")
    try:
        for step in range(start, opts.steps):
            idx = batch_indices(opts.seed, step, len(pairs), opts.batch_size)
            batch = make_batch(pairs, cfg, idx)
            report = train_step(model, optimizer, batch)
            _log_line(log_stream, {"step": step + 1, **report.to_dict()})
            done = step + 1
            if (
                opts.checkpoint_path
                and opts.checkpoint_every
                and done % opts.checkpoint_every == 0
            ):
                save_checkpoint(_snapshot(cfg, model, optimizer, done, opts.seed),
                                opts.checkpoint_path)
            if opts.eval_every and done % opts.eval_every == 0:
                from .metrics import evaluate

                sample = pairs[: opts.eval_samples]
                rep = evaluate(model, sample, cfg)
                _log_line(
                    log_stream,
                    {
                        "step": done,
                        "eval_word_accuracy": rep.word_accuracy,
                        "eval_psnr_db": rep.psnr_db,
                        "eval_ssim": rep.ssim,
                    },
                )
    finally:
        if log_stream is not None:
            log_stream.close()

    final = _snapshot(cfg, model, optimizer, opts.steps, opts.seed)
    if opts.checkpoint_path:
        save_checkpoint(final, opts.checkpoint_path)
    return final


def _snapshot(
    cfg: ModelConfig,
    model: SrTextNet,
    optimizer: torch.optim.Optimizer,
    step: int,
    seed: int,
) -> Checkpoint:
    return Checkpoint(
        cfg=cfg,
        model_state=copy.deepcopy(model.state_dict()),
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        step=step,
        seed=seed,
    )


def _compare_cfg(found: ModelConfig, expected: ModelConfig) -> None:
    a, b = found.to_dict(), expected.to_dict()
    for key in a:
        if a[key] != b[key]:
            raise ValueError(
                f"{key} mismatch: checkpoint has {a[key]!r}, expected {b[key]!r}"
            )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "version": _CHECKPOINT_VERSION,
        "cfg": ckpt.cfg.to_dict(),
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "step": ckpt.step,
        "seed": ckpt.seed,
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path, expected_cfg: ModelConfig | None = None) -> Checkpoint:
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}")
    version = payload.get("version")
    if version != _CHECKPOINT_VERSION:
        raise ValueError(
            f"version mismatch: checkpoint has {version!r}, "
            f"expected {_CHECKPOINT_VERSION!r}"
        )
    cfg = ModelConfig.from_dict(payload["cfg"])
    # Compare against the expected config before validating, so a checkpoint
    # trained with a different charset reports the mismatch rather than a
    # generic validity error.
    if expected_cfg is not None:
        _compare_cfg(cfg, expected_cfg)
    validate_config(cfg)
    return Checkpoint(
        cfg=cfg,
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        step=int(payload["step"]),
        seed=int(payload["seed"]),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SrTextNet:
    """Rebuilds the model and restores parameters; returned in eval mode."""
    model = build_model(ckpt.cfg, ckpt.seed)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model
