"""Text normalization and the character/index codec used by the CTC heads.

Class indexing convention: blank = 0, then 'a'=1 .. 'z'=26, '0'=27 .. '9'=36.
"""
from __future__ import annotations

from dataclasses import dataclass

from .config import ModelConfig


@dataclass(frozen=True)
class Label:
    """A normalized ground-truth string and its class indices (all in 1..36)."""

    text: str
    indices: tuple[int, ...]


def normalize_text(raw: str, charset: str | None = None) -> str:
    """Lowercase and drop every character outside the charset.

    Returns "" when nothing survives; the caller decides whether to skip
    the sample.
    """
    if charset is None:
        charset = ModelConfig().charset
    allowed = set(charset)
    return "".join(ch for ch in raw.lower() if ch in allowed)


def encode_text(text: str, cfg: ModelConfig) -> Label:
    """Map a normalized, non-empty string to 1-based class indices."""
    if not text:
        raise ValueError("cannot encode an empty string")
    indices = []
    for ch in text:
        pos = cfg.charset.find(ch)
        if pos < 0:
            raise ValueError(f"unknown character {ch!r}")
        indices.append(pos + 1)
    return Label(text=text, indices=tuple(indices))


def decode_indices(indices, cfg: ModelConfig) -> str:
    """Inverse of encode_text; blank (0) is not a legal label index."""
    chars = []
    for i in indices:
        if not 1 <= i <= len(cfg.charset):
            raise ValueError(f"class index {i} outside 1..{len(cfg.charset)}")
        chars.append(cfg.charset[i - 1])
    return "".join(chars)


def ctc_min_frames(indices) -> int:
    """Minimum frame count a CTC alignment of these indices needs.

    Equal adjacent indices force a separating blank, so the bound is
    len + (number of adjacent repeats).
    """
    indices = tuple(indices)
    repeats = sum(1 for a, b in zip(indices, indices[1:]) if a == b)
    return len(indices) + repeats


def fits_frame_budget(label: Label, cfg: ModelConfig) -> bool:
    """True when a CTC alignment of the label fits in num_tokens frames."""
    return 0 < len(label.indices) and ctc_min_frames(label.indices) <= cfg.num_tokens
