"""Evaluation protocols, metrics and the synthetic toy world."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import PromptConfig, ShipGenerator, TrainConfig
from .datastore import (DatasetManifest, LabeledFeatureSet, class_rng, few_shot_indices, load_manifest,
                        split_base_new, write_feature_store, write_manifest)
from .encoders import DualEncoder, class_text_features, make_toy_encoder
from .finetuners import AdapterHead, CacheHead, HeadTrainConfig, PromptTunerHead, ZeroShotHead

log = logging.getLogger(__name__)

PROTOCOLS = ("b2n", "gzs-setting", "xd", "gzsl")


def harmonic_mean(a: float, b: float) -> float:
    for v in (a, b):
        if not 0.0 <= v <= 100.0 or math.isnan(v):
            raise ValueError(f"accuracy out of range [0, 100]: {v}")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def instance_accuracy(preds: Sequence[str], truth: Sequence[str]) -> float:
    if len(preds) != len(truth):
        raise ValueError("prediction/truth length mismatch")
    if not len(truth):
        raise ValueError("empty evaluation set")
    return 100.0 * float(np.mean([p == t for p, t in zip(preds, truth)]))


def per_class_accuracy(preds: Sequence[str], truth: Sequence[str], classes: Sequence[str]):
    """Per-class top-1 accuracy (percent) and its unweighted mean over classes with items."""
    if len(preds) != len(truth):
        raise ValueError("prediction/truth length mismatch")
    if not len(truth):
        raise ValueError("empty evaluation set")
    known = set(classes)
    table = {}
    for c in classes:
        hits = [p == t for p, t in zip(preds, truth) if t == c]
        if hits:
            table[c] = 100.0 * sum(hits) / len(hits)
    for t in truth:
        if t not in known:
            raise ValueError(f"truth label outside vocabulary: {t!r}")
    return table, float(np.mean(list(table.values())))


# --------------------------------------------------------------------------
# configuration and reports


@dataclass(frozen=True)
class ProtocolConfig:
    template: str = "a photo of a {class}"
    prompt: PromptConfig = PromptConfig()
    # mean-MSE recon is tiny next to a summed KL; at beta 1 the posterior collapses
    # and every synthetic row sits on its class centre
    generator: TrainConfig = TrainConfig(beta=1e-4, epochs=600)
    head: HeadTrainConfig = HeadTrainConfig()
    generator_kind: str = "text_encoder"
    xd_synth_per_class: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        d = dict(d)
        out = cls()
        kw = {k: d[k] for k in ("template", "generator_kind", "xd_synth_per_class") if k in d}
        if "prompt" in d:
            kw["prompt"] = replace(out.prompt, **d["prompt"])
        if "generator" in d:
            kw["generator"] = replace(out.generator, **d["generator"])
        if "head" in d:
            kw["head"] = replace(out.head, **d["head"])
        return replace(out, **kw)


def _r(v):
    return None if v is None else round(float(v), 6)


@dataclass
class EvalReport:
    protocol: str
    accuracies: dict
    harmonic_mean: float | None
    per_class: dict = field(default_factory=dict)
    fingerprint: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "accuracies": {k: _r(v) for k, v in self.accuracies.items()},
            "harmonic_mean": _r(self.harmonic_mean),
            "per_class": {k: _r(v) for k, v in self.per_class.items()},
            "fingerprint": self.fingerprint,
            "per_seed": [{k: (_r(v) if isinstance(v, float) else v) for k, v in s.items()} for s in self.per_seed],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_markdown(self, title: str | None = None) -> str:
        keys = list(self.accuracies)
        head = keys + (["H"] if self.harmonic_mean is not None else [])
        vals = [f"{self.accuracies[k]:.2f}" for k in keys]
        if self.harmonic_mean is not None:
            vals.append(f"{self.harmonic_mean:.2f}")
        label = title or self.fingerprint.get("head_kind", self.protocol)
        lines = ["| Method | " + " | ".join(h.capitalize() if h != "H" else h for h in head) + " |",
                 "|---|" + "---:|" * len(head),
                 f"| {label} | " + " | ".join(vals) + " |"]
        return "\n".join(lines) + "\n"


def markdown_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Several reports with the same protocol as one Base/New/H style table."""
    if not rows:
        return ""
    keys = list(rows[0][1].accuracies)
    cols = [k.capitalize() for k in keys] + ["H"]
    out = ["| Method | " + " | ".join(cols) + " |", "|---|" + "---:|" * len(cols)]
    for name, rep in rows:
        vals = [f"{rep.accuracies[k]:.2f}" for k in keys] + [f"{(rep.harmonic_mean or 0.0):.2f}"]
        out.append(f"| {name} | " + " | ".join(vals) + " |")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# toy world


@dataclass(frozen=True)
class ToyWorldConfig:
    """Synthetic dataset whose visual features scatter around templated text features.

    ``world_template`` is the text prompt whose features act as the visual
    class prototypes; when it differs from the zero-shot head's template the
    world has a systematic image/text shift for fine-tuning to correct.
    """

    num_classes: int = 12
    d: int = 32
    d_tok: int = 32
    samples_per_class: int = 60
    noise_std: float = 0.15
    encoder_seed: int = 0
    data_seed: int = 0
    world_template: str = "a bad photo of the {class}"
    class_prefix: str = "class"
    unseen_classes: int = 0
    train_fraction: float = 0.7
    name: str = "toy"

    def __post_init__(self):
        if self.num_classes < 1 or self.d < 2 or self.d_tok < 2 or self.samples_per_class < 1:
            raise ValueError(f"invalid toy world config: {self}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 <= self.unseen_classes < self.num_classes:
            raise ValueError("unseen_classes must leave at least one seen class")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    def class_names(self) -> list[str]:
        width = len(str(self.num_classes - 1))
        return [f"{self.class_prefix}_{i:0{width}d}" for i in range(self.num_classes)]


def build_toy_world(cfg: ToyWorldConfig, out_dir, encoder: DualEncoder | None = None):
    """Write ``<out_dir>/manifest.json`` and ``features.bin``; return (manifest, encoder)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    enc = encoder or make_toy_encoder(cfg.encoder_seed, cfg.d, cfg.d_tok)
    names = cfg.class_names()
    protos = class_text_features(enc, cfg.world_template, names)
    n_train = int(round(cfg.train_fraction * cfg.samples_per_class))
    rows, labels, splits = [], [], []
    for i, (name, mu) in enumerate(zip(names, protos)):
        rng = class_rng(cfg.data_seed, i)
        if cfg.noise_std == 0:
            x = np.repeat(mu[None], cfg.samples_per_class, axis=0)
        else:
            g = rng.standard_normal((cfg.samples_per_class, cfg.d))
            x = mu.astype(np.float64) + cfg.noise_std * g
            x = (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)
        perm = rng.permutation(cfg.samples_per_class)
        tag = np.empty(cfg.samples_per_class, dtype=object)
        tag[perm[:n_train]] = "train"
        tag[perm[n_train:]] = "test"
        rows.append(x)
        labels += [name] * cfg.samples_per_class
        splits += list(tag)
    store = LabeledFeatureSet(np.concatenate(rows), tuple(labels), "real")
    write_feature_store(store, out_dir / "features.bin")
    unseen = names[len(names) - cfg.unseen_classes:] if cfg.unseen_classes else None
    write_manifest(out_dir / "manifest.json", cfg.name, names, "features.bin", labels, splits, unseen)
    return load_manifest(out_dir / "manifest.json"), enc


# --------------------------------------------------------------------------
# runners


HEAD_KINDS = ("zero_shot", "prompt_tuner", "adapter", "cache")


@dataclass
class SeedRun:
    """Everything one seed of a protocol produced; kept for audits."""

    seed: int
    train_indices: list
    head: object
    generator: ShipGenerator | None = None


def _make_head(kind: str, enc, cfg: ProtocolConfig, gen, seed: int):
    h = cfg.head
    common = dict(epochs=h.epochs, batch_size=h.batch_size, learning_rate=h.learning_rate, generator=gen,
                  synth_per_class=h.synth_per_class, synth_mode=h.synth_mode, seed=seed)
    if kind == "zero_shot":
        return ZeroShotHead(enc, cfg.template)
    if kind == "prompt_tuner":
        return PromptTunerHead(enc, n_ctx=h.n_ctx, **common)
    if kind == "adapter":
        return AdapterHead(enc, cfg.template, ratio=h.adapter_ratio, **common)
    if kind == "cache":
        return CacheHead(enc, cfg.template, alpha=h.cache_alpha, beta=h.cache_beta, generator=gen,
                         synth_per_class=h.synth_per_class, seed=seed)
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def train_generator_on(enc, train: LabeledFeatureSet, cfg: ProtocolConfig, seed: int) -> ShipGenerator:
    tcfg = replace(cfg.generator, seed=seed)
    return ShipGenerator.from_configs(enc, cfg.prompt, tcfg, cfg.generator_kind).fit(train.features, train.labels)


def fit_seed(manifest: DatasetManifest, enc, head_kind: str, train_idx: list, label_space: Sequence[str],
             seed: int, ship: bool, cfg: ProtocolConfig) -> SeedRun:
    train = manifest.rows(train_idx)
    gen = train_generator_on(enc, train, cfg, seed) if ship else None
    head = _make_head(head_kind, enc, cfg, gen, seed)
    classes = list(label_space) if ship else sorted(set(train.labels))
    head.fit(train.features, train.labels, classes)
    return SeedRun(seed, list(train_idx), head, gen)


def _predict_split(head, manifest, idx, classes):
    rows = manifest.rows(idx)
    return list(head.predict(rows.features, list(classes))), list(rows.labels)


def _fingerprint(manifest, protocol, head_kind, shots, seeds, ship, cfg) -> dict:
    return {"protocol": protocol, "dataset": manifest.name, "head_kind": head_kind, "shots": shots,
            "seeds": list(seeds), "ship": bool(ship), "config": cfg.to_dict()}


def _b2n_runs(manifest, enc, head_kind, shots, seeds, ship, cfg):
    split = split_base_new(manifest.vocabulary)
    for s in seeds:
        idx = few_shot_indices(manifest, split.base, shots, s)
        yield split, fit_seed(manifest, enc, head_kind, idx, manifest.vocabulary, s, ship, cfg)


def _summarize(protocol, per_seed, fingerprint, a_key, b_key, per_class=None):
    a = float(np.mean([r[a_key] for r in per_seed]))
    b = float(np.mean([r[b_key] for r in per_seed]))
    return EvalReport(protocol, {a_key: a, b_key: b}, harmonic_mean(a, b), per_class or {}, fingerprint, per_seed)


def run_base_to_new(manifest: DatasetManifest, enc, head_kind="prompt_tuner", shots=16, seeds=(1, 2, 3, 4, 5),
                    ship=True, cfg: ProtocolConfig = ProtocolConfig(), runs: list | None = None) -> EvalReport:
    """Few-shot training on base classes; base and new test items scored in separate label spaces."""
    per_seed = []
    for split, run in _b2n_runs(manifest, enc, head_kind, shots, seeds, ship, cfg):
        bp, bt = _predict_split(run.head, manifest, manifest.items("test", split.base), split.base)
        np_, nt = _predict_split(run.head, manifest, manifest.items("test", split.new), split.new)
        per_seed.append({"seed": run.seed, "base": instance_accuracy(bp, bt), "new": instance_accuracy(np_, nt)})
        if runs is not None:
            runs.append(run)
    fp = _fingerprint(manifest, "b2n", head_kind, shots, seeds, ship, cfg)
    return _summarize("b2n", per_seed, fp, "base", "new")


def run_generalized_setting(manifest: DatasetManifest, enc, head_kind="prompt_tuner", shots=16,
                            seeds=(1, 2, 3, 4, 5), ship=True, cfg: ProtocolConfig = ProtocolConfig(),
                            runs: list | None = None) -> EvalReport:
    """Same training as base-to-new; every test item scored against the union label space."""
    per_seed = []
    union = list(manifest.vocabulary)
    for split, run in _b2n_runs(manifest, enc, head_kind, shots, seeds, ship, cfg):
        bp, bt = _predict_split(run.head, manifest, manifest.items("test", split.base), union)
        np_, nt = _predict_split(run.head, manifest, manifest.items("test", split.new), union)
        per_seed.append({"seed": run.seed, "base": instance_accuracy(bp, bt), "new": instance_accuracy(np_, nt)})
        if runs is not None:
            runs.append(run)
    fp = _fingerprint(manifest, "gzs-setting", head_kind, shots, seeds, ship, cfg)
    return _summarize("gzs-setting", per_seed, fp, "base", "new")


def run_cross_dataset(source: DatasetManifest, targets: Sequence[DatasetManifest], enc, shots=16,
                      seeds=(1, 2, 3, 4, 5), cfg: ProtocolConfig = ProtocolConfig()) -> dict[str, EvalReport]:
    """Generator trained on the source few-shot set; prompt tuner fit on synthetic target features only."""
    per_target = {t.name: [] for t in targets}
    for s in seeds:
        idx = few_shot_indices(source, source.vocabulary, shots, s)
        gen = train_generator_on(enc, source.rows(idx), cfg, s)
        for ti, tgt in enumerate(targets):
            synth = gen.sample(list(tgt.vocabulary), cfg.xd_synth_per_class, seed=(s, 0xD5, ti))
            if len(synth) == 0:
                raise ValueError("empty training set")
            head = _make_head("prompt_tuner", enc, cfg, None, s)
            head.fit(synth.features, synth.labels, list(tgt.vocabulary))
            test = tgt.items("test")
            p, t = _predict_split(head, tgt, test, tgt.vocabulary)
            zp, _ = _predict_split(ZeroShotHead(enc, cfg.template).fit(classes=tgt.vocabulary), tgt, test,
                                   tgt.vocabulary)
            per_target[tgt.name].append({"seed": s, "accuracy": instance_accuracy(p, t),
                                         "zero_shot": instance_accuracy(zp, t)})
    out = {}
    for tgt in targets:
        rows = per_target[tgt.name]
        fp = _fingerprint(source, "xd", "prompt_tuner", shots, seeds, True, cfg)
        fp["target"] = tgt.name
        acc = {"accuracy": float(np.mean([r["accuracy"] for r in rows])),
               "zero_shot": float(np.mean([r["zero_shot"] for r in rows]))}
        out[tgt.name] = EvalReport("xd", acc, None, {}, fp, rows)
    return out


def run_gzsl(manifest: DatasetManifest, enc, head_kind="prompt_tuner", seeds=(1, 2, 3, 4, 5), ship=True,
             cfg: ProtocolConfig = ProtocolConfig(), runs: list | None = None) -> EvalReport:
    """Train on every seen-class training item; macro per-class accuracy on seen/unseen in the union space."""
    unseen = list(manifest.unseen_classes)
    if not unseen:
        raise ValueError("manifest declares no unseen classes")
    seen = list(manifest.seen_classes)
    union = list(manifest.vocabulary)
    train_idx = manifest.items("train", seen)
    per_seed, tables = [], []
    for s in seeds:
        run = fit_seed(manifest, enc, head_kind, train_idx, union, s, ship, cfg)
        preds, truth = _predict_split(run.head, manifest, manifest.items("test"), union)
        st = [(p, t) for p, t in zip(preds, truth) if t in set(seen)]
        ut = [(p, t) for p, t in zip(preds, truth) if t in set(unseen)]
        stab, smacro = per_class_accuracy([p for p, _ in st], [t for _, t in st], seen)
        utab, umacro = per_class_accuracy([p for p, _ in ut], [t for _, t in ut], unseen)
        tables.append({**stab, **utab})
        per_seed.append({"seed": s, "seen": smacro, "unseen": umacro})
        if runs is not None:
            runs.append(run)
    per_class = {c: float(np.mean([t[c] for t in tables if c in t])) for c in union if any(c in t for t in tables)}
    fp = _fingerprint(manifest, "gzsl", head_kind, None, seeds, ship, cfg)
    return _summarize("gzsl", per_seed, fp, "seen", "unseen", per_class)
