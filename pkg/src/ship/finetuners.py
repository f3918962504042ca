"""Classifier heads over frozen dual-encoder features.

``ZeroShotHead`` scores features against text features of a template.  The
three trainable heads follow the usual few-shot recipes: a prompt tuner with
shared learnable context tokens, a residual bottleneck adapter on the visual
feature, and a training-free key/value cache.  Each accepts an optional
:class:`~ship.core.ShipGenerator`; classes that appear in ``classes`` but not
in the training labels are then covered with synthetic features.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import read_container, write_container
from .core import ShipGenerator, TrainingError
from .datastore import ClassVocabulary, LabeledFeatureSet, class_rng
from .encoders import DualEncoder, PromptTemplate, class_text_features, encoder_from_config, pad_sequences
from .validation import check_class_list, check_features, check_labels

log = logging.getLogger(__name__)

HEAD_KINDS = ("zero_shot", "prompt_tuner", "adapter", "cache")
SYNTH_MODES = ("per_step", "fixed")


class UnscorableClassError(ValueError):
    """The head has no way to produce a score for a requested class."""


@dataclass(frozen=True)
class HeadTrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-2
    synth_per_class: int = 32
    synth_mode: str = "per_step"
    seed: int = 0
    adapter_ratio: float = 0.2
    cache_alpha: float = 1.0
    cache_beta: float = 5.5
    n_ctx: int = 16

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.synth_per_class < 0:
            raise ValueError(f"invalid head config: {self}")
        if self.synth_mode not in SYNTH_MODES:
            raise ValueError(f"synth_mode must be one of {SYNTH_MODES}, got {self.synth_mode!r}")
        if not 0.0 <= self.adapter_ratio <= 1.0:
            raise ValueError("adapter_ratio must lie in [0, 1]")
        if self.cache_alpha < 0 or self.cache_beta < 0:
            raise ValueError("cache_alpha and cache_beta must be non-negative")


def _as_template(t) -> PromptTemplate:
    return t if isinstance(t, PromptTemplate) else PromptTemplate(t)


class _Head(ClassifierMixin, BaseEstimator):
    kind = "base"

    def _resolve_classes(self, classes):
        if classes is None:
            check_is_fitted(self, "classes_")
            return list(self.classes_)
        return check_class_list(classes)

    def _logits(self, X: torch.Tensor, classes: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def decision_function(self, X, classes: Sequence[str] | None = None) -> np.ndarray:
        """Pre-softmax scores ``(n, C)`` over ``classes`` (default: the fitted label space)."""
        check_is_fitted(self, "classes_")
        classes = self._resolve_classes(classes)
        X = check_features(X, self.encoder.d)
        with torch.no_grad():
            out = self._logits(torch.tensor(X, dtype=self.encoder.dtype), classes)
        return out.numpy().astype(np.float64)

    def predict_proba(self, X, classes=None) -> np.ndarray:
        z = self.decision_function(X, classes)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, classes=None) -> np.ndarray:
        classes = self._resolve_classes(classes)
        # np.argmax returns the first maximum: ties go to the lowest class index
        idx = np.argmax(self.decision_function(X, classes), axis=1)
        return np.array([classes[i] for i in idx], dtype=object)

    def score(self, X, y, classes=None):
        return float(np.mean(self.predict(X, classes) == np.asarray(list(y), dtype=object)))

    # ---- shared helpers ----

    def _text_weights(self, classes):
        return torch.tensor(class_text_features(self.encoder, _as_template(self.template), classes),
                            dtype=self.encoder.dtype)

    def _setup(self, X, y, classes):
        X = check_features(X, self.encoder.d)
        y = check_labels(y, len(X))
        self.classes_ = ClassVocabulary(set(y) | set(classes or ()))
        missing = [c for c in self.classes_ if c not in set(y)]
        return X, y, missing

    def save(self, path) -> None:
        check_is_fitted(self, "classes_")
        header = {"format": "SHIPHEAD1", "kind": self.kind, "classes": list(self.classes_),
                  "encoder": self.encoder.config(), "config": self._header_config()}
        write_container(path, header, self._blobs())

    def _header_config(self) -> dict:
        return {}

    def _blobs(self) -> dict:
        return {}


class ZeroShotHead(_Head):
    """Cosine similarity to templated class-name text features, scaled by the encoder's logit scale."""

    kind = "zero_shot"

    def __init__(self, encoder: DualEncoder, template="a photo of a {class}"):
        self.encoder = encoder
        self.template = template

    def fit(self, X=None, y=None, classes=None):
        labels = set(y) if y is not None else set()
        self.classes_ = ClassVocabulary(labels | set(classes or ()))
        if not self.classes_:
            raise ValueError("empty class list")
        return self

    def _logits(self, X, classes):
        return self.encoder.logit_scale * X @ self._text_weights(classes).T

    def _header_config(self):
        return {"template": _as_template(self.template).text}


class _TrainedHead(_Head):
    """Shared minibatch loop with optional synthetic augmentation."""

    def _synth_batch(self, missing, key):
        k = self.synth_per_class
        if self.generator is None or k == 0 or not missing:
            return None
        return self.generator.sample(missing, k, seed=(self.seed, *key))

    def _train(self, X, y, missing, params, forward, init_arrays):
        n = len(X)
        if n == 0:
            raise ValueError("empty training set")
        classes = list(self.classes_)
        cidx = {c: i for i, c in enumerate(classes)}
        Xt = torch.tensor(X, dtype=self.encoder.dtype)
        yt = torch.tensor([cidx[c] for c in y], dtype=torch.long)
        if self.generator is not None and self.synth_mode == "fixed":
            extra = self._synth_batch(missing, (0xF1,))
            if extra is not None and len(extra):
                Xt = torch.cat([Xt, torch.tensor(extra.features, dtype=self.encoder.dtype)])
                yt = torch.cat([yt, torch.tensor([cidx[c] for c in extra.labels], dtype=torch.long)])
                n = len(yt)
        opt = torch.optim.AdamW(params, lr=self.learning_rate, weight_decay=0.0)
        total_steps = self.epochs * math.ceil(n / self.batch_size)
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / max(total_steps, 1))))
        rng = class_rng(self.seed, 0xC0)
        self.trajectory_ = [init_arrays()] if self.record_trajectory else None
        self.loss_history_ = []
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = torch.as_tensor(order[start : start + self.batch_size])
                xb, yb = Xt[idx], yt[idx]
                if self.synth_mode == "per_step":
                    extra = self._synth_batch(missing, (0x5E7, step))
                    if extra is not None and len(extra):
                        xb = torch.cat([xb, torch.tensor(extra.features, dtype=self.encoder.dtype)])
                        yb = torch.cat([yb, torch.tensor([cidx[c] for c in extra.labels], dtype=torch.long)])
                loss = F.cross_entropy(forward(xb, classes), yb)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {loss.item()}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                self.loss_history_.append(loss.item())
                if self.record_trajectory:
                    self.trajectory_.append(init_arrays())
                step += 1
        for p in params:
            p.grad = None


class PromptTunerHead(_TrainedHead):
    """Learns ``n_ctx`` context vectors shared by all classes.

    The weight of class ``c`` is ``encode_text([ctx_1 .. ctx_M, tokens(c)])``.
    """

    kind = "prompt_tuner"

    def __init__(self, encoder: DualEncoder, n_ctx=16, ctx_init_std=0.02, epochs=50, batch_size=32,
                 learning_rate=1e-2, generator: ShipGenerator | None = None, synth_per_class=32,
                 synth_mode="per_step", seed=0, record_trajectory=False):
        self.encoder = encoder
        self.n_ctx = n_ctx
        self.ctx_init_std = ctx_init_std
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.generator = generator
        self.synth_per_class = synth_per_class
        self.synth_mode = synth_mode
        self.seed = seed
        self.record_trajectory = record_trajectory

    def init_context(self) -> torch.Tensor:
        rng = class_rng(self.seed, 0xC7)
        ctx = rng.standard_normal((self.n_ctx, self.encoder.d_tok)) * self.ctx_init_std
        return torch.tensor(ctx, dtype=self.encoder.dtype)

    def class_weights(self, classes: Sequence[str], ctx: torch.Tensor | None = None) -> torch.Tensor:
        ctx = self.ctx_ if ctx is None else ctx
        seqs = [self.encoder.embed_tokens(c) for c in classes]
        cls_tok, cls_mask = pad_sequences(seqs)
        C = len(classes)
        tokens = torch.cat([ctx.unsqueeze(0).expand(C, -1, -1), cls_tok.to(ctx.dtype)], dim=1)
        mask = torch.cat([torch.ones((C, ctx.shape[0]), dtype=torch.bool), cls_mask], dim=1)
        return self.encoder.encode_text(tokens, mask)

    def _logits(self, X, classes, ctx=None):
        return self.encoder.logit_scale * X @ self.class_weights(classes, ctx).T

    def fit(self, X, y, classes=None):
        if self.synth_mode not in SYNTH_MODES:
            raise ValueError(f"synth_mode must be one of {SYNTH_MODES}")
        X, y, missing = self._setup(X, y, classes)
        self.ctx_ = self.init_context().requires_grad_(True)
        self._train(X, y, missing, [self.ctx_],
                    lambda xb, cl: self._logits(xb, cl, self.ctx_),
                    lambda: {"ctx": self.ctx_.detach().numpy().copy()})
        self.ctx_ = self.ctx_.detach()
        return self

    def _header_config(self):
        return {"n_ctx": self.n_ctx}

    def _blobs(self):
        return {"ctx": self.ctx_.numpy()}


class AdapterHead(_TrainedHead):
    """Residual bottleneck on the visual feature (d -> d/4 -> d, ReLU), blended by ``ratio``."""

    kind = "adapter"

    def __init__(self, encoder: DualEncoder, template="a photo of a {class}", ratio=0.2, reduction=4,
                 epochs=50, batch_size=32, learning_rate=1e-2, generator: ShipGenerator | None = None,
                 synth_per_class=32, synth_mode="per_step", seed=0, record_trajectory=False):
        self.encoder = encoder
        self.template = template
        self.ratio = ratio
        self.reduction = reduction
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.generator = generator
        self.synth_per_class = synth_per_class
        self.synth_mode = synth_mode
        self.seed = seed
        self.record_trajectory = record_trajectory

    def init_adapter(self) -> dict[str, torch.Tensor]:
        d = self.encoder.d
        h = max(1, d // self.reduction)
        rng = class_rng(self.seed, 0xAD)
        w1 = rng.uniform(-1, 1, (h, d)) / math.sqrt(d)
        w2 = rng.uniform(-1, 1, (d, h)) / math.sqrt(h)
        return {"adapter.w1": torch.tensor(w1, dtype=self.encoder.dtype),
                "adapter.w2": torch.tensor(w2, dtype=self.encoder.dtype)}

    def adapt(self, X: torch.Tensor, params=None) -> torch.Tensor:
        P = self.adapter_ if params is None else params
        a = torch.relu(torch.relu(X @ P["adapter.w1"].T) @ P["adapter.w2"].T)
        mixed = self.ratio * a + (1.0 - self.ratio) * X
        return mixed / mixed.norm(dim=-1, keepdim=True)

    def _logits(self, X, classes, params=None, weights=None):
        W = self._text_weights(classes) if weights is None else weights
        return self.encoder.logit_scale * self.adapt(X, params) @ W.T

    def fit(self, X, y, classes=None):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        X, y, missing = self._setup(X, y, classes)
        self.adapter_ = {k: v.requires_grad_(True) for k, v in self.init_adapter().items()}
        W = self._text_weights(list(self.classes_))
        self._train(X, y, missing, list(self.adapter_.values()),
                    lambda xb, cl: self._logits(xb, cl, self.adapter_, W),
                    lambda: {k: v.detach().numpy().copy() for k, v in self.adapter_.items()})
        self.adapter_ = {k: v.detach() for k, v in self.adapter_.items()}
        return self

    def _header_config(self):
        return {"template": _as_template(self.template).text, "ratio": self.ratio, "reduction": self.reduction}

    def _blobs(self):
        return {k: v.numpy() for k, v in self.adapter_.items()}


class CacheHead(_Head):
    """Training-free key/value cache blended with zero-shot logits.

    ``logits(x) = alpha * exp(-beta * (1 - x K^T)) V + logit_scale * x W^T``
    where ``K`` holds the training (then synthetic) features and ``V`` their
    one-hot labels.
    """

    kind = "cache"

    def __init__(self, encoder: DualEncoder, template="a photo of a {class}", alpha=1.0, beta=5.5,
                 generator: ShipGenerator | None = None, synth_per_class=32, seed=0):
        self.encoder = encoder
        self.template = template
        self.alpha = alpha
        self.beta = beta
        self.generator = generator
        self.synth_per_class = synth_per_class
        self.seed = seed

    def fit(self, X, y, classes=None, synth: LabeledFeatureSet | None = None):
        X, y, missing = self._setup(X, y, classes)
        keys, labels = [X], list(y)
        if synth is None and self.generator is not None and missing and self.synth_per_class > 0:
            synth = self.generator.sample(missing, self.synth_per_class, seed=(self.seed, 0xCA))
        if synth is not None and len(synth):
            keys.append(check_features(synth.features, self.encoder.d))
            labels += list(synth.labels)
            self.classes_ = ClassVocabulary(set(self.classes_) | set(synth.labels))
        K = np.concatenate(keys, axis=0)
        if len(K) == 0:
            raise ValueError("empty key set")
        self.keys_ = torch.tensor(K, dtype=self.encoder.dtype)
        self.key_labels_ = tuple(labels)
        self.key_classes_ = ClassVocabulary(set(labels))
        return self

    def values(self, classes: Sequence[str]) -> torch.Tensor:
        unscorable = [c for c in classes if c not in set(self.key_classes_)]
        if unscorable:
            raise UnscorableClassError(f"head cannot score unseen classes: {unscorable}")
        col = {c: i for i, c in enumerate(classes)}
        V = torch.zeros((len(self.key_labels_), len(classes)), dtype=self.encoder.dtype)
        for r, lab in enumerate(self.key_labels_):
            if lab in col:
                V[r, col[lab]] = 1.0
        return V

    def _logits(self, X, classes):
        V = self.values(classes)
        affinity = torch.exp(-self.beta * (1.0 - X @ self.keys_.T))
        zs = self.encoder.logit_scale * X @ self._text_weights(classes).T
        return self.alpha * affinity @ V + zs

    def _header_config(self):
        return {"template": _as_template(self.template).text, "alpha": self.alpha, "beta": self.beta,
                "key_labels": list(self.key_labels_)}

    def _blobs(self):
        return {"cache.keys": self.keys_.numpy(), "cache.values": self.values(list(self.key_classes_)).numpy()}


def load_head(path, encoder: DualEncoder | None = None) -> _Head:
    header, blobs = read_container(path, "SHIPHEAD1")
    enc = encoder or encoder_from_config(header["encoder"])
    cfg = header.get("config", {})
    kind = header["kind"]
    classes = ClassVocabulary(header["classes"])
    if kind == "zero_shot":
        head = ZeroShotHead(enc, cfg["template"])
    elif kind == "prompt_tuner":
        head = PromptTunerHead(enc, n_ctx=cfg["n_ctx"])
        head.ctx_ = torch.tensor(blobs["ctx"], dtype=enc.dtype)
    elif kind == "adapter":
        head = AdapterHead(enc, cfg["template"], ratio=cfg["ratio"], reduction=cfg["reduction"])
        head.adapter_ = {k: torch.tensor(v, dtype=enc.dtype) for k, v in blobs.items()}
    elif kind == "cache":
        head = CacheHead(enc, cfg["template"], alpha=cfg["alpha"], beta=cfg["beta"])
        head.keys_ = torch.tensor(blobs["cache.keys"], dtype=enc.dtype)
        head.key_labels_ = tuple(cfg["key_labels"])
        head.key_classes_ = ClassVocabulary(set(head.key_labels_))
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    head.classes_ = classes
    return head


# --------------------------------------------------------------------------
# functional wrappers


def zero_shot_logits(enc: DualEncoder, template, classes: Sequence[str], x) -> np.ndarray:
    """Class probabilities ``softmax(cos(x, t_c) * logit_scale)`` for a single feature."""
    classes = check_class_list(classes)
    head = ZeroShotHead(enc, template).fit(classes=classes)
    return head.predict_proba(np.asarray(x).reshape(1, -1), classes)[0]


def fit_prompt_tuner(enc, classes, train: LabeledFeatureSet, gen=None, cfg: HeadTrainConfig = HeadTrainConfig(),
                     **kwargs) -> PromptTunerHead:
    if len(train) == 0:
        raise ValueError("empty training set")
    head = PromptTunerHead(enc, n_ctx=cfg.n_ctx, epochs=cfg.epochs, batch_size=cfg.batch_size,
                           learning_rate=cfg.learning_rate, generator=gen, synth_per_class=cfg.synth_per_class,
                           synth_mode=cfg.synth_mode, seed=cfg.seed, **kwargs)
    return head.fit(train.features, train.labels, classes)


def fit_adapter(enc, template, classes, train: LabeledFeatureSet, gen=None,
                cfg: HeadTrainConfig = HeadTrainConfig(), **kwargs) -> AdapterHead:
    if len(train) == 0:
        raise ValueError("empty training set")
    head = AdapterHead(enc, template, ratio=cfg.adapter_ratio, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate, generator=gen, synth_per_class=cfg.synth_per_class,
                       synth_mode=cfg.synth_mode, seed=cfg.seed, **kwargs)
    return head.fit(train.features, train.labels, classes)


def build_cache_head(enc, template, classes, train: LabeledFeatureSet, synth: LabeledFeatureSet | None = None,
                     cfg: HeadTrainConfig = HeadTrainConfig()) -> CacheHead:
    head = CacheHead(enc, template, alpha=cfg.cache_alpha, beta=cfg.cache_beta)
    return head.fit(train.features, train.labels, classes, synth=synth)


def predict(head: _Head, x) -> str:
    return head.predict(np.asarray(x).reshape(1, -1))[0]
