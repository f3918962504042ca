"""Read learned prompt vectors back as their nearest words in the token table."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ShipGenerator, assemble_prompt, vae_encode
from .encoders import DualEncoder


@dataclass(frozen=True)
class Interpretation:
    """Nearest word and its Euclidean distance for each prompt position."""

    words: tuple
    distances: tuple

    def __post_init__(self):
        if len(self.words) != len(self.distances):
            raise ValueError("one distance per word required")
        if any(d < 0 for d in self.distances):
            raise ValueError("distances must be nonnegative")

    def __len__(self):
        return len(self.words)

    def to_records(self) -> list[dict]:
        return [{"position": i, "word": w, "distance": float(d)}
                for i, (w, d) in enumerate(zip(self.words, self.distances))]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), indent=2)


def load_wordlist(path) -> list[str]:
    """One word per line; blank lines are skipped."""
    words = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    words = [w for w in words if w]
    if not words:
        raise ValueError("empty wordlist")
    return words


def nearest_words(prompt, enc: DualEncoder, wordlist: Sequence[str]) -> Interpretation:
    """For each row of ``prompt`` ``(L, d_tok)`` pick the closest wordlist entry.

    Ties go to the earliest entry in ``wordlist``.
    """
    wordlist = list(wordlist)
    if not wordlist:
        raise ValueError("empty wordlist")
    P = np.asarray(prompt.detach().cpu() if hasattr(prompt, "detach") else prompt, dtype=np.float64)
    if P.ndim == 1:
        P = P[None]
    if P.ndim != 2 or P.shape[1] != enc.d_tok:
        raise ValueError(f"prompt must have shape (L, {enc.d_tok}), got {P.shape}")
    E = np.stack([enc.vocabulary_table(w).cpu().numpy().astype(np.float64) for w in wordlist])
    dist = np.sqrt(((P[:, None, :] - E[None, :, :]) ** 2).sum(-1))
    best = dist.argmin(axis=1)  # first minimum wins
    return Interpretation(tuple(wordlist[j] for j in best),
                          tuple(float(dist[i, j]) for i, j in enumerate(best)))


def interpret_instance(gen: ShipGenerator, enc: DualEncoder, x, wordlist: Sequence[str]) -> Interpretation:
    """Nearest words for the prompts built from the posterior mean of ``x``."""
    if enc is not gen.encoder:
        raise ValueError("generator is bound to a different encoder")
    mu, _ = vae_encode(gen, x)
    return nearest_words(assemble_prompt(gen, mu), enc, wordlist)
