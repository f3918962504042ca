"""Frozen dual-encoder contract and a small deterministic reference encoder.

Any object exposing the attributes and methods of :class:`DualEncoder` can be
handed to the generator and the heads; the toy encoder is the one used for
tests and desk-scale experiments.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .datastore import DataError, LabeledFeatureSet

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
DEFAULT_TABLE_SIZE = 4096
DEFAULT_LOGIT_SCALE = 100.0


def fnv1a_64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(text: str) -> list[str]:
    """Whitespace word split; case is preserved."""
    return text.split()


@dataclass(frozen=True)
class PromptTemplate:
    """Words around a single ``{class}`` placeholder, e.g. ``"a photo of a {class}"``."""

    text: str = "a photo of a {class}"

    def __post_init__(self):
        if self.text.count("{class}") != 1:
            raise ValueError(f"template must contain exactly one '{{class}}' placeholder: {self.text!r}")

    @property
    def prefix_words(self) -> list[str]:
        return tokenize(self.text.split("{class}")[0])

    @property
    def suffix_words(self) -> list[str]:
        return tokenize(self.text.split("{class}")[1])

    def fill(self, class_name: str) -> list[str]:
        return self.prefix_words + tokenize(class_name) + self.suffix_words


class DualEncoder:
    """Frozen dual encoder.

    Subclasses provide ``d``, ``d_tok``, ``logit_scale``, ``dtype``,
    :meth:`word_vectors`, :meth:`encode_text` and :meth:`encode_item`.
    """

    d: int
    d_tok: int
    logit_scale: float
    dtype: torch.dtype

    def word_vectors(self, words: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Map token embeddings ``(..., n, d_tok)`` to unit-norm features ``(..., d)``.

        ``mask`` (``(..., n)`` bool) marks real tokens when sequences are padded.
        Must be differentiable with respect to ``tokens``.
        """
        raise NotImplementedError

    def encode_item(self, item) -> np.ndarray:
        raise NotImplementedError

    def vocabulary_table(self, word: str) -> torch.Tensor:
        return self.word_vectors([word])[0]

    def embed_tokens(self, text: str) -> torch.Tensor:
        words = tokenize(text)
        if not words:
            raise ValueError("cannot embed an empty string")
        return self.word_vectors(words)

    def parameter_bytes(self) -> bytes:
        raise NotImplementedError

    def config(self) -> dict:
        return {}


class ToyDualEncoder(DualEncoder):
    """Mean-pool -> fixed affine map -> tanh -> L2 normalize.

    Words hash (FNV-1a, 64 bit) into a seeded Gaussian token table; distinct
    words may collide on the same row.
    """

    def __init__(self, seed: int = 0, d: int = 32, d_tok: int = 32, *,
                 table_size: int = DEFAULT_TABLE_SIZE, token_std: float = 1.0,
                 logit_scale: float = DEFAULT_LOGIT_SCALE, dtype=torch.float32):
        if d < 2 or d_tok < 2:
            raise ValueError(f"d and d_tok must be >= 2, got d={d}, d_tok={d_tok}")
        self.seed, self.d, self.d_tok = int(seed), int(d), int(d_tok)
        self.table_size = int(table_size)
        self.token_std = float(token_std)
        self.logit_scale = float(logit_scale)
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x7E47]))
        table = rng.standard_normal((self.table_size, self.d_tok)) * self.token_std
        # orthonormal rows/columns keep the map well conditioned; 1/token_std puts
        # pre-activations of mean-pooled tokens at O(1)
        q, r = np.linalg.qr(rng.standard_normal((max(self.d, self.d_tok), min(self.d, self.d_tok))))
        q = q * np.sign(np.diag(r))
        weight = (q if self.d >= self.d_tok else q.T) / self.token_std
        bias = rng.standard_normal(self.d) * 0.1
        self._table = torch.tensor(table, dtype=dtype)
        self._weight = torch.tensor(weight, dtype=dtype)
        self._bias = torch.tensor(bias, dtype=dtype)
        for t in (self._table, self._weight, self._bias):
            t.requires_grad_(False)

    def config(self) -> dict:
        return {"kind": "toy", "seed": self.seed, "d": self.d, "d_tok": self.d_tok,
                "table_size": self.table_size, "token_std": self.token_std,
                "logit_scale": self.logit_scale}

    def row_of(self, word: str) -> int:
        return fnv1a_64(word) % self.table_size

    def word_vectors(self, words: Sequence[str]) -> torch.Tensor:
        idx = torch.tensor([self.row_of(w) for w in words], dtype=torch.long)
        return self._table[idx].clone()

    def encode_text(self, tokens, mask=None):
        tokens = torch.as_tensor(tokens, dtype=self.dtype)
        if tokens.shape[-1] != self.d_tok:
            raise ValueError(f"token dimension {tokens.shape[-1]} != d_tok {self.d_tok}")
        if tokens.shape[-2] < 1:
            raise ValueError("token sequence must have length >= 1")
        if mask is None:
            pooled = tokens.mean(dim=-2)
        else:
            m = mask.to(tokens.dtype).unsqueeze(-1)
            pooled = (tokens * m).sum(dim=-2) / m.sum(dim=-2)
        h = torch.tanh(pooled @ self._weight.T + self._bias)
        return h / h.norm(dim=-1, keepdim=True)

    def encode_item(self, item) -> np.ndarray:
        v = np.asarray(item, dtype=np.float64)
        if v.shape != (self.d,):
            raise ValueError(f"raw item must be a {self.d}-vector, got shape {v.shape}")
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError("cannot normalize a zero vector")
        return (v / n).astype(np.float32)

    def parameter_bytes(self) -> bytes:
        return b"".join(t.detach().cpu().numpy().tobytes() for t in (self._table, self._weight, self._bias))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.parameter_bytes()).hexdigest()


def make_toy_encoder(seed: int = 0, d: int = 32, d_tok: int = 32, **kwargs) -> ToyDualEncoder:
    return ToyDualEncoder(seed, d, d_tok, **kwargs)


def encoder_from_config(cfg: dict, dtype=torch.float32) -> DualEncoder:
    kind = cfg.get("kind", "toy")
    if kind != "toy":
        raise ValueError(f"unknown encoder kind {kind!r}; inject external encoders programmatically")
    extra = {k: cfg[k] for k in ("table_size", "token_std", "logit_scale") if k in cfg}
    return ToyDualEncoder(cfg.get("seed", 0), cfg.get("d", 32), cfg.get("d_tok", 32), dtype=dtype, **extra)


def pad_sequences(seqs: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad a list of ``(n_i, d_tok)`` tensors into a batch plus mask."""
    n = max(s.shape[0] for s in seqs)
    out = seqs[0].new_zeros((len(seqs), n, seqs[0].shape[1]))
    mask = torch.zeros((len(seqs), n), dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def class_text_feature(enc: DualEncoder, template: PromptTemplate | str, class_name: str) -> np.ndarray:
    return class_text_features(enc, template, [class_name])[0]


def class_text_features(enc: DualEncoder, template: PromptTemplate | str, class_names: Sequence[str]) -> np.ndarray:
    """Unit-norm text features for each class name filled into the template, ``(C, d)``."""
    if isinstance(template, str):
        template = PromptTemplate(template)
    seqs = []
    for name in class_names:
        if not name or not tokenize(name):
            raise ValueError("class name must be nonempty")
        seqs.append(enc.word_vectors(template.fill(name)))
    if not seqs:
        return np.zeros((0, enc.d), dtype=np.float32)
    tokens, mask = pad_sequences(seqs)
    with torch.no_grad():
        feats = enc.encode_text(tokens, mask)
    return feats.cpu().numpy().astype(np.float32)


def extract_features(enc: DualEncoder, items: Sequence, labels: Sequence[str]) -> LabeledFeatureSet:
    if len(items) != len(labels):
        raise DataError(f"length mismatch: {len(items)} items, {len(labels)} labels")
    if not len(items):
        return LabeledFeatureSet.empty(enc.d)
    rows = np.stack([enc.encode_item(it) for it in items])
    return LabeledFeatureSet(rows, tuple(labels), "real")
