"""Prompt-synthesizing conditional VAE.

A VAE encoder maps a visual feature to a latent code; a small network turns
the code into a bias that is added to learnable global prompt vectors; the
resulting prompt, followed by the class-name tokens, goes through the frozen
text encoder to reconstruct the feature.  Sampling the latent code from the
prior and decoding with an arbitrary class name yields synthetic features for
classes that have no labeled data.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import read_container, write_container
from .datastore import ClassVocabulary, LabeledFeatureSet, class_rng
from .encoders import DualEncoder, encoder_from_config, pad_sequences
from .validation import check_features, check_labels

log = logging.getLogger(__name__)

GENERATOR_KINDS = ("text_encoder", "scratch_mlp")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptConfig:
    L: int = 4
    use_global: bool = True
    sequential_bias: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"prompt length L must be >= 1, got {self.L}")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    hidden_width: int | None = None  # None -> max(64, 4 * d)
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training config: {self}")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        if self.beta < 0 or self.seed < 0:
            raise ValueError("beta and seed must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    kl: float
    total: float
    beta: float


# --------------------------------------------------------------------------
# pure tensor functions


def reparameterize(mu, logvar, eps):
    mu, logvar, eps = (torch.as_tensor(t) for t in (mu, logvar, eps))
    if not (mu.shape == logvar.shape == eps.shape):
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)}, logvar {tuple(logvar.shape)}, eps {tuple(eps.shape)}")
    return mu + torch.exp(0.5 * logvar) * eps


def elbo_terms(x, x_recon, mu, logvar):
    """Per-row reconstruction MSE and closed-form KL(N(mu, exp(logvar)) || N(0, I))."""
    if x.shape != x_recon.shape or mu.shape != logvar.shape:
        raise ValueError(
            f"shape mismatch: x {tuple(x.shape)}, x_recon {tuple(x_recon.shape)}, "
            f"mu {tuple(mu.shape)}, logvar {tuple(logvar.shape)}"
        )
    recon = ((x - x_recon) ** 2).mean(dim=-1)
    kl = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=-1)
    return recon, kl


def elbo_loss(x, x_recon, mu, logvar, beta: float = 1.0) -> LossBreakdown:
    x, x_recon, mu, logvar = (torch.as_tensor(t, dtype=torch.float64) for t in (x, x_recon, mu, logvar))
    recon, kl = elbo_terms(x, x_recon, mu, logvar)
    recon, kl = float(recon.mean()), float(kl.mean())
    return LossBreakdown(recon, kl, recon + beta * kl, beta)


def _linear(x, w, b):
    return x @ w.T + b


def _uniform_init(rng, fan_out, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)


# --------------------------------------------------------------------------
# estimator


class ShipGenerator(TransformerMixin, BaseEstimator):
    """Conditional VAE whose decoder is the frozen text encoder driven by synthesized prompts.

    Parameters
    ----------
    encoder : DualEncoder
        Frozen dual encoder; never modified.
    L : int
        Number of prompt positions.
    use_global, sequential_bias : bool
        Prompt form. The default (global prompts plus one shared bias) gives
        ``[p_1 + r, ..., p_L + r]``.
    kind : {"text_encoder", "scratch_mlp"}
        Decode through the text encoder, or with a three-layer MLP trained
        from scratch (ablation baseline).
    hidden_width : int or None
        Hidden units of every MLP; ``None`` picks ``max(64, 4 * d)``.

    Attributes
    ----------
    params_ : dict[str, torch.Tensor]
        Trainable tensors under their checkpoint names.
    history_ : list[LossBreakdown]
        Epoch-mean losses.
    """

    def __init__(self, encoder: DualEncoder, L=4, use_global=True, sequential_bias=False,
                 init_std=0.02, kind="text_encoder", hidden_width=None, epochs=200,
                 batch_size=64, learning_rate=1e-3, weight_decay=0.01, beta=1.0, seed=0):
        self.encoder = encoder
        self.L = L
        self.use_global = use_global
        self.sequential_bias = sequential_bias
        self.init_std = init_std
        self.kind = kind
        self.hidden_width = hidden_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta = beta
        self.seed = seed

    @classmethod
    def from_configs(cls, encoder, pcfg: PromptConfig, tcfg: TrainConfig, kind="text_encoder"):
        return cls(encoder, L=pcfg.L, use_global=pcfg.use_global, sequential_bias=pcfg.sequential_bias,
                   init_std=pcfg.init_std, kind=kind, **asdict(tcfg))

    # ---- structure ----

    @property
    def d(self):
        return self.encoder.d

    @property
    def d_z(self):
        return self.encoder.d_tok

    @property
    def hidden_(self):
        return self.hidden_width or max(64, 4 * self.encoder.d)

    @property
    def prompt_config(self) -> PromptConfig:
        return PromptConfig(self.L, self.use_global, self.sequential_bias, self.init_std)

    def initialize(self) -> "ShipGenerator":
        """Draw fresh parameters from the seed; used by :meth:`fit` before training."""
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        PromptConfig(self.L, self.use_global, self.sequential_bias, self.init_std)
        d, dz, dt, h = self.d, self.d_z, self.encoder.d_tok, self.hidden_
        rng = class_rng(self.seed, 0x5A1E)
        raw = {}
        raw["vae.w1"], raw["vae.b1"] = _uniform_init(rng, h, d)
        raw["vae.w_mu"], raw["vae.b_mu"] = _uniform_init(rng, dz, h)
        raw["vae.w_logvar"], raw["vae.b_logvar"] = _uniform_init(rng, dz, h)
        if self.kind == "text_encoder":
            out = dt * self.L if self.sequential_bias else dt
            w1, b1 = _uniform_init(rng, h, dz)
            # small input weights: the decoder starts almost independent of z, so
            # decoding at the posterior mean is not far out of distribution
            raw["bias.w1"], raw["bias.b1"] = 0.1 * w1, b1
            raw["bias.w2"], raw["bias.b2"] = _uniform_init(rng, out, h)
            if self.use_global:
                raw["prompts.global"] = rng.standard_normal((self.L, dt)) * self.init_std
        else:
            raw["scratch.w1"], raw["scratch.b1"] = _uniform_init(rng, h, dz + dt)
            raw["scratch.w2"], raw["scratch.b2"] = _uniform_init(rng, h, h)
            raw["scratch.w3"], raw["scratch.b3"] = _uniform_init(rng, d, h)
        self.params_ = {k: torch.tensor(v, dtype=self.encoder.dtype).requires_grad_(True)
                        for k, v in sorted(raw.items())}
        self.history_ = []
        self._class_cache = {}
        return self

    # ---- forward pieces ----

    def _vae(self, x):
        P = self.params_
        h = torch.relu(_linear(x, P["vae.w1"], P["vae.b1"]))
        return _linear(h, P["vae.w_mu"], P["vae.b_mu"]), _linear(h, P["vae.w_logvar"], P["vae.b_logvar"])

    def _prompts(self, z):
        P = self.params_
        r = _linear(torch.relu(_linear(z, P["bias.w1"], P["bias.b1"])), P["bias.w2"], P["bias.b2"])
        dt = self.encoder.d_tok
        if self.sequential_bias:
            r = r.reshape(*z.shape[:-1], self.L, dt)
        else:
            r = r.unsqueeze(-2).expand(*z.shape[:-1], self.L, dt)
        if self.use_global:
            return P["prompts.global"] + r
        return r

    def _class_tokens(self, name):
        cache = self.__dict__.setdefault("_class_cache", {})
        if name not in cache:
            cache[name] = self.encoder.embed_tokens(name)
        return cache[name]

    def _decode(self, z, class_names: Sequence[str]):
        if self.kind == "scratch_mlp":
            P = self.params_
            cond = torch.stack([self._class_tokens(c).mean(dim=0) for c in class_names])
            h = torch.relu(_linear(torch.cat([z, cond], dim=-1), P["scratch.w1"], P["scratch.b1"]))
            h = torch.relu(_linear(h, P["scratch.w2"], P["scratch.b2"]))
            out = _linear(h, P["scratch.w3"], P["scratch.b3"])
            return out / out.norm(dim=-1, keepdim=True)
        prompts = self._prompts(z)
        seqs = [self._class_tokens(c) for c in class_names]
        cls_tok, cls_mask = pad_sequences(seqs)
        tokens = torch.cat([prompts, cls_tok.to(prompts.dtype)], dim=1)
        mask = torch.cat([torch.ones(prompts.shape[:2], dtype=torch.bool), cls_mask], dim=1)
        return self.encoder.encode_text(tokens, mask)

    def loss_tensors(self, x, class_names, eps):
        """Differentiable batch-mean (total, recon, kl) for fixed noise ``eps``."""
        mu, logvar = self._vae(x)
        z = reparameterize(mu, logvar, eps)
        recon, kl = elbo_terms(x, self._decode(z, class_names), mu, logvar)
        recon, kl = recon.mean(), kl.mean()
        return recon + self.beta * kl, recon, kl

    # ---- sklearn API ----

    def fit(self, X, y):
        X = check_features(X, self.d)
        y = check_labels(y, len(X))
        if len(X) == 0:
            raise ValueError("empty training set")
        self.initialize()
        frozen = self.encoder.parameter_bytes()
        params = list(self.params_.values())
        opt = torch.optim.AdamW(params, lr=self.learning_rate, weight_decay=self.weight_decay)
        rng = class_rng(self.seed, 0xF17)
        Xt = torch.tensor(X, dtype=self.encoder.dtype)
        n = len(X)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            sums = np.zeros(3)
            for b, start in enumerate(range(0, n, self.batch_size)):
                idx = order[start : start + self.batch_size]
                eps = torch.tensor(rng.standard_normal((len(idx), self.d_z)), dtype=self.encoder.dtype)
                total, recon, kl = self.loss_tensors(Xt[idx], [y[i] for i in idx], eps)
                if not torch.isfinite(total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b}: "
                        f"recon={recon.item()}, kl={kl.item()}, total={total.item()}"
                    )
                opt.zero_grad()
                total.backward()
                opt.step()
                sums += len(idx) * np.array([recon.item(), kl.item(), total.item()])
            recon_m, kl_m, total_m = sums / n
            self.history_.append(LossBreakdown(recon_m, kl_m, total_m, self.beta))
            log.debug("epoch %d loss %.6f (recon %.6f kl %.6f)", epoch, total_m, recon_m, kl_m)
        for p in params:
            p.grad = None
        if self.encoder.parameter_bytes() != frozen:
            raise TrainingError("encoder parameters changed during training")
        self.classes_ = ClassVocabulary(set(y))
        return self

    def encode(self, X):
        """Posterior mean and log-variance, each ``(n, d_z)``."""
        check_is_fitted(self, "params_")
        X = check_features(X, self.d)
        with torch.no_grad():
            mu, logvar = self._vae(torch.tensor(X, dtype=self.encoder.dtype))
        return mu.numpy(), logvar.numpy()

    def transform(self, X):
        return self.encode(X)[0]

    def reconstruct(self, Z, class_names: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "params_")
        Z = torch.as_tensor(np.asarray(Z), dtype=self.encoder.dtype)
        if Z.ndim != 2 or Z.shape[1] != self.d_z:
            raise ValueError(f"latent codes must have shape (n, {self.d_z}), got {tuple(Z.shape)}")
        if len(class_names) != len(Z):
            raise ValueError("one class name per latent code required")
        if len(Z) == 0:
            return np.zeros((0, self.d), np.float32)
        with torch.no_grad():
            return self._decode(Z, list(class_names)).numpy()

    def sample(self, classes: Sequence[str], per_class: int, seed=0) -> LabeledFeatureSet:
        """Synthesize ``per_class`` features for each class, latent codes drawn from the prior.

        The code for (class index ``c``, draw ``k``) comes from its own PRNG
        stream keyed by ``(seed, c, k)``; ``seed`` may be an int or a tuple.
        """
        check_is_fitted(self, "params_")
        if per_class < 0:
            raise ValueError("per_class must be non-negative")
        names = list(classes)
        for c in names:
            if not isinstance(c, str) or not c.split():
                raise ValueError(f"unknown class: {c!r}")
        if not names:
            raise ValueError("classes must be nonempty")
        if per_class == 0:
            return LabeledFeatureSet.empty(self.d)
        key = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
        Z = np.stack([class_rng(*key, ci, k).standard_normal(self.d_z)
                      for ci in range(len(names)) for k in range(per_class)])
        labels = [c for c in names for _ in range(per_class)]
        feats = self.reconstruct(Z, labels).astype(np.float32)
        return LabeledFeatureSet(feats, tuple(labels), "synthetic")

    # ---- persistence ----

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        header = {
            "format": "SHIPGEN1", "d": self.d, "d_tok": self.encoder.d_tok, "L": self.L,
            "use_global": bool(self.use_global), "sequential": bool(self.sequential_bias),
            "kind": self.kind, "hidden": self.hidden_, "init_std": self.init_std,
            "beta": self.beta, "seed": self.seed, "encoder": self.encoder.config(),
        }
        write_container(path, header, {k: v.detach().cpu().numpy() for k, v in self.params_.items()})

    @classmethod
    def load(cls, path, encoder: DualEncoder | None = None) -> "ShipGenerator":
        header, blobs = read_container(path, "SHIPGEN1")
        if encoder is None:
            encoder = encoder_from_config(header["encoder"])
        if (encoder.d, encoder.d_tok) != (header["d"], header["d_tok"]):
            raise ValueError("encoder dimensions do not match checkpoint")
        gen = cls(encoder, L=header["L"], use_global=header["use_global"],
                  sequential_bias=header["sequential"], init_std=header.get("init_std", 0.02),
                  kind=header["kind"], hidden_width=header["hidden"], beta=header.get("beta", 1.0),
                  seed=header.get("seed", 0))
        gen.params_ = {k: torch.tensor(v, dtype=encoder.dtype).requires_grad_(True)
                       for k, v in sorted(blobs.items())}
        gen.history_ = []
        gen._class_cache = {}
        return gen

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.params_.items()}


# --------------------------------------------------------------------------
# functional wrappers


def _as_row(x, dtype):
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    return t.unsqueeze(0) if t.ndim == 1 else t


def vae_encode(gen: ShipGenerator, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gen.d:
        raise ValueError(f"dimension mismatch: feature has {x.shape[-1]} dims, generator expects {gen.d}")
    check_features(x.reshape(-1, gen.d), gen.d)
    with torch.no_grad():
        mu, logvar = gen._vae(_as_row(x, gen.encoder.dtype))
    if x.ndim == 1:
        return mu[0].numpy(), logvar[0].numpy()
    return mu.numpy(), logvar.numpy()


def assemble_prompt(gen: ShipGenerator, z) -> torch.Tensor:
    if gen.kind != "text_encoder":
        raise ValueError("scratch_mlp generators have no prompts")
    z = torch.as_tensor(np.asarray(z), dtype=gen.encoder.dtype)
    if z.shape[-1] != gen.d_z:
        raise ValueError(f"latent code must have dimension {gen.d_z}")
    with torch.no_grad():
        return gen._prompts(z)


def reconstruct(gen: ShipGenerator, enc: DualEncoder, z, class_name: str) -> np.ndarray:
    if enc is not gen.encoder:
        raise ValueError("generator is bound to a different encoder")
    return gen.reconstruct(np.asarray(z).reshape(1, -1), [class_name])[0]


def train_generator(enc: DualEncoder, base: LabeledFeatureSet, pcfg: PromptConfig = PromptConfig(),
                    tcfg: TrainConfig = TrainConfig(), kind: str = "text_encoder") -> ShipGenerator:
    if len(base) == 0:
        raise ValueError("empty training set")
    return ShipGenerator.from_configs(enc, pcfg, tcfg, kind).fit(base.features, base.labels)


def synthesize(gen: ShipGenerator, enc: DualEncoder, classes: Sequence[str], per_class: int, seed=0) -> LabeledFeatureSet:
    if enc is not gen.encoder:
        raise ValueError("generator is bound to a different encoder")
    return gen.sample(classes, per_class, seed)
