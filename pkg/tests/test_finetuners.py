import numpy as np
import pytest
import torch

from ship.core import ShipGenerator
from ship.datastore import LabeledFeatureSet, sample_few_shot, split_base_new
from ship.encoders import DualEncoder, ToyDualEncoder, class_text_features, make_toy_encoder
from ship.finetuners import (AdapterHead, CacheHead, HeadTrainConfig, PromptTunerHead, UnscorableClassError,
                             ZeroShotHead, build_cache_head, fit_adapter, fit_prompt_tuner, load_head, predict,
                             zero_shot_logits)

from oracles import cache_logits_bruteforce, central_difference, rel_err, unit_rows, zero_shot_weights


class StubEncoder(DualEncoder):
    """Words map to fixed vectors; text features are the normalized mean token."""

    def __init__(self, table, logit_scale=1.0):
        self.table = {k: torch.tensor(v, dtype=torch.float64) for k, v in table.items()}
        self.d = self.d_tok = len(next(iter(table.values())))
        self.logit_scale = logit_scale
        self.dtype = torch.float64

    def word_vectors(self, words):
        return torch.stack([self.table[w] for w in words])

    def encode_text(self, tokens, mask=None):
        tokens = torch.as_tensor(tokens, dtype=self.dtype)
        if mask is None:
            pooled = tokens.mean(-2)
        else:
            m = mask.to(tokens.dtype).unsqueeze(-1)
            pooled = (tokens * m).sum(-2) / m.sum(-2)
        return pooled / pooled.norm(dim=-1, keepdim=True)

    def parameter_bytes(self):
        return b"".join(v.numpy().tobytes() for v in self.table.values())


@pytest.fixture(scope="module")
def base_setup(toy_world):
    m, enc = toy_world
    split = split_base_new(m.vocabulary)
    train = sample_few_shot(m, split.base, 16, 1)
    test = m.rows(m.items("test", split.base))
    return m, enc, split, train, test


# ---- zero-shot ----

def test_zero_shot_identity_case():
    enc = make_toy_encoder()
    classes = ["dog", "cat", "owl"]
    x = class_text_features(enc, "a photo of a {class}", ["dog"])[0]
    p = zero_shot_logits(enc, "a photo of a {class}", classes, x)
    assert int(np.argmax(p)) == 0
    assert p.sum() == pytest.approx(1.0)


def test_zero_shot_uniform_when_text_features_coincide():
    enc = ToyDualEncoder(0, 8, 8, table_size=1)  # every word shares one row
    p = zero_shot_logits(enc, "a photo of a {class}", ["dog", "cat", "owl"], unit_rows(np.random.default_rng(0), 1, 8)[0])
    np.testing.assert_allclose(p, 1 / 3, atol=1e-12)


def test_zero_shot_softmax_value():
    enc = StubEncoder({"a": [1.0, 0.0], "b": [0.0, 1.0]})
    p = zero_shot_logits(enc, "{class}", ["a", "b"], np.array([1.0, 0.0]))
    np.testing.assert_allclose(p, [0.7311, 0.2689], atol=1e-4)


def test_zero_shot_empty_class_list():
    with pytest.raises(ValueError, match="empty class list"):
        zero_shot_logits(make_toy_encoder(), "{class}", [], np.eye(32)[0])


def test_noise_free_prototypes_give_perfect_zero_shot(tmp_path):
    from ship.protocols import ToyWorldConfig, build_toy_world

    m, enc = build_toy_world(ToyWorldConfig(noise_std=0.0, world_template="a photo of a {class}"), tmp_path)
    test = m.rows(m.items("test"))
    head = ZeroShotHead(enc).fit(classes=m.vocabulary)
    assert head.score(test.features, test.labels) == 1.0


# ---- predict ----

def test_predict_tie_goes_to_first_class():
    enc = StubEncoder({"a": [1.0, 0.0], "c": [1.0, 0.0]})
    head = ZeroShotHead(enc, "{class}").fit(classes=["a", "c"])
    assert np.array_equal(head.decision_function([[1.0, 0.0]]), [[1.0, 1.0]])
    assert head.predict([[1.0, 0.0]], ["c", "a"])[0] == "c"
    assert predict(head, [1.0, 0.0]) == "a"


def test_one_class_head_always_predicts_it(rng):
    enc = make_toy_encoder()
    head = ZeroShotHead(enc).fit(classes=["solo"])
    assert set(head.predict(unit_rows(rng, 20, 32))) == {"solo"}


def test_predict_agrees_with_decision_function(base_setup):
    _, enc, split, train, test = base_setup
    head = fit_prompt_tuner(enc, split.base, train, cfg=HeadTrainConfig(epochs=2))
    scores = head.decision_function(test.features)
    assert list(head.predict(test.features)) == [head.classes_[i] for i in scores.argmax(1)]


# ---- prompt tuner ----

def test_prompt_tuner_zero_lr_keeps_init(base_setup):
    _, enc, split, train, _ = base_setup
    head = fit_prompt_tuner(enc, split.base, train, cfg=HeadTrainConfig(epochs=2, learning_rate=0.0))
    assert torch.equal(head.ctx_, head.init_context())


def test_prompt_tuner_deterministic(base_setup):
    _, enc, split, train, _ = base_setup
    cfg = HeadTrainConfig(epochs=3)
    a = fit_prompt_tuner(enc, split.base, train, cfg=cfg).ctx_
    b = fit_prompt_tuner(enc, split.base, train, cfg=cfg).ctx_
    assert a.numpy().tobytes() == b.numpy().tobytes()


def test_prompt_tuner_beats_zero_shot_on_train(base_setup):
    _, enc, split, train, _ = base_setup
    pt = fit_prompt_tuner(enc, split.base, train)
    zs = ZeroShotHead(enc).fit(classes=split.base)
    assert pt.score(train.features, train.labels) >= zs.score(train.features, train.labels)


def test_prompt_tuner_context_gradient(enc64):
    rng = np.random.default_rng(2)
    head = PromptTunerHead(enc64, n_ctx=3, ctx_init_std=0.5, seed=2)
    ctx = head.init_context().requires_grad_(True)
    X = torch.tensor(unit_rows(rng, 4, 8))
    y = torch.tensor([0, 1, 2, 1])
    classes = ["owl", "red fox", "sea lion"]

    def f():
        with torch.no_grad():
            return float(torch.nn.functional.cross_entropy(head._logits(X, classes, ctx) / 100, y))

    loss = torch.nn.functional.cross_entropy(head._logits(X, classes, ctx) / 100, y)
    (g,) = torch.autograd.grad(loss, [ctx])
    assert rel_err(g.numpy(), central_difference(f, ctx)) < 1e-4


# ---- adapter ----

def test_adapter_ratio_zero_is_zero_shot(base_setup):
    _, enc, split, train, test = base_setup
    head = fit_adapter(enc, "a photo of a {class}", split.base, train,
                       cfg=HeadTrainConfig(epochs=2, adapter_ratio=0.0))
    zs = ZeroShotHead(enc).fit(classes=split.base)
    assert np.array_equal(head.predict(test.features), zs.predict(test.features))


def test_adapter_zero_lr_keeps_init(base_setup):
    _, enc, split, train, _ = base_setup
    head = fit_adapter(enc, "a photo of a {class}", split.base, train,
                       cfg=HeadTrainConfig(epochs=2, learning_rate=0.0))
    init = head.init_adapter()
    assert all(torch.equal(head.adapter_[k], init[k]) for k in init)


def test_adapter_improves_base_accuracy(base_setup):
    _, enc, split, train, test = base_setup
    head = fit_adapter(enc, "a photo of a {class}", split.base, train)
    zs = ZeroShotHead(enc).fit(classes=split.base)
    assert head.score(test.features, test.labels) >= zs.score(test.features, test.labels)


# ---- cache ----

@pytest.mark.parametrize("seed", range(5))
def test_cache_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    enc = ToyDualEncoder(seed, 8, 8, dtype=torch.float64)
    classes = ["ant", "bee", "cat", "dog"]
    K = unit_rows(rng, 8, 8)
    labels = [classes[i % 4] for i in range(8)]
    alpha, beta = rng.uniform(0.1, 3), rng.uniform(0.5, 8)
    head = build_cache_head(enc, "a photo of a {class}", classes,
                            LabeledFeatureSet(K[:6], tuple(labels[:6]), "real"),
                            LabeledFeatureSet(K[6:], tuple(labels[6:]), "synthetic"),
                            HeadTrainConfig(cache_alpha=alpha, cache_beta=beta))
    X = unit_rows(rng, 5, 8)
    ref = cache_logits_bruteforce(X, K.astype(np.float32).astype(np.float64), labels, classes,
                                  zero_shot_weights(enc, "a photo of a {class}", classes), alpha, beta, 100.0)
    np.testing.assert_allclose(head.decision_function(X, classes), ref, atol=1e-6, rtol=0)


def test_cache_alpha_zero_is_zero_shot(base_setup):
    _, enc, split, train, test = base_setup
    head = build_cache_head(enc, "a photo of a {class}", split.base, train, cfg=HeadTrainConfig(cache_alpha=0.0))
    zs = ZeroShotHead(enc).fit(classes=split.base)
    assert np.array_equal(head.predict(test.features), zs.predict(test.features))


def test_cache_identity_affinity(rng):
    enc = make_toy_encoder(0, 8, 8)
    K = unit_rows(rng, 3, 8)
    head = CacheHead(enc, beta=50.0).fit(K, ["a", "b", "c"])
    V = head.values(["a", "b", "c"]).numpy()
    aff = np.exp(-50.0 * (1 - K[1] @ K.T)) @ V
    assert aff.argmax() == 1


def test_cache_cannot_score_label_only_classes(base_setup):
    _, enc, split, train, test = base_setup
    head = CacheHead(enc).fit(train.features, train.labels)
    with pytest.raises(UnscorableClassError, match="cannot score unseen classes"):
        head.predict(test.features, split.new)


def test_cache_is_training_free_and_seed_free(base_setup):
    _, enc, split, train, test = base_setup
    a = CacheHead(enc, seed=0).fit(train.features, train.labels)
    b = CacheHead(enc, seed=99).fit(train.features, train.labels)
    assert np.array_equal(a.decision_function(test.features), b.decision_function(test.features))


def test_empty_key_set():
    with pytest.raises(ValueError):
        CacheHead(make_toy_encoder()).fit(np.zeros((0, 32)), [])


# ---- shared head properties ----

@pytest.mark.parametrize("kind", ["zero", "prompt", "adapter", "cache"])
def test_logits_follow_class_order(base_setup, kind):
    _, enc, split, train, test = base_setup
    cfg = HeadTrainConfig(epochs=2)
    head = {"zero": lambda: ZeroShotHead(enc).fit(classes=split.base),
            "prompt": lambda: fit_prompt_tuner(enc, split.base, train, cfg=cfg),
            "adapter": lambda: fit_adapter(enc, "a photo of a {class}", split.base, train, cfg=cfg),
            "cache": lambda: build_cache_head(enc, "a photo of a {class}", split.base, train)}[kind]()
    classes = list(split.base)
    perm = [3, 0, 5, 1, 4, 2]
    a = head.decision_function(test.features[:10], classes)
    b = head.decision_function(test.features[:10], [classes[i] for i in perm])
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-6, atol=1e-5)


@pytest.mark.parametrize("kind", ["prompt", "adapter"])
def test_baseline_reduction(base_setup, kind):
    _, enc, split, train, _ = base_setup
    gen = ShipGenerator(enc, epochs=1).fit(train.features, train.labels)
    cls = PromptTunerHead if kind == "prompt" else AdapterHead
    kw = dict(epochs=3, seed=5, record_trajectory=True)
    base = cls(enc, generator=None, synth_per_class=0, **kw).fit(train.features, train.labels, split.base)
    for variant in (dict(generator=None, synth_per_class=16),
                    dict(generator=gen, synth_per_class=0),
                    dict(generator=gen, synth_per_class=0, synth_mode="fixed")):
        aug = cls(enc, **variant, **kw).fit(train.features, train.labels, split.base)
        assert len(aug.trajectory_) == len(base.trajectory_)
        for sa, sb in zip(aug.trajectory_, base.trajectory_):
            assert all(sa[k].tobytes() == sb[k].tobytes() for k in sb)


@pytest.mark.parametrize("mode", ["per_step", "fixed"])
def test_augmented_head_scores_label_only_classes(base_setup, mode):
    m, enc, split, train, _ = base_setup
    gen = ShipGenerator(enc, epochs=3).fit(train.features, train.labels)
    head = PromptTunerHead(enc, epochs=2, generator=gen, synth_per_class=4, synth_mode=mode)
    head.fit(train.features, train.labels, m.vocabulary)
    assert list(head.classes_) == list(m.vocabulary)
    new_test = m.rows(m.items("test", split.new))
    assert set(head.predict(new_test.features, split.new)) <= set(split.new)


def test_head_round_trip(tmp_path, base_setup):
    _, enc, split, train, test = base_setup
    cfg = HeadTrainConfig(epochs=2)
    heads = [ZeroShotHead(enc).fit(classes=split.base),
             fit_prompt_tuner(enc, split.base, train, cfg=cfg),
             fit_adapter(enc, "a photo of a {class}", split.base, train, cfg=cfg),
             build_cache_head(enc, "a photo of a {class}", split.base, train)]
    for i, head in enumerate(heads):
        head.save(tmp_path / f"h{i}.bin")
        back = load_head(tmp_path / f"h{i}.bin", enc)
        assert back.kind == head.kind
        assert np.array_equal(back.decision_function(test.features), head.decision_function(test.features))


def test_config_validation():
    with pytest.raises(ValueError):
        HeadTrainConfig(synth_mode="sometimes")
    with pytest.raises(ValueError):
        HeadTrainConfig(adapter_ratio=1.5)
    with pytest.raises(ValueError):
        HeadTrainConfig(synth_per_class=-1)
