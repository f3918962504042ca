import numpy as np
import pytest
import torch

from ship.datastore import DataError
from ship.encoders import (PromptTemplate, ToyDualEncoder, class_text_feature, class_text_features,
                           extract_features, fnv1a_64, make_toy_encoder, pad_sequences)


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_template_placeholder_rules():
    assert PromptTemplate("a photo of a {class}").fill("red fox") == ["a", "photo", "of", "a", "red", "fox"]
    with pytest.raises(ValueError):
        PromptTemplate("no placeholder")
    with pytest.raises(ValueError):
        PromptTemplate("{class} and {class}")


def test_same_seed_same_output():
    a, b = make_toy_encoder(3), make_toy_encoder(3)
    toks = torch.randn(5, 32, generator=torch.Generator().manual_seed(0))
    assert torch.equal(a.encode_text(toks), b.encode_text(toks))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != make_toy_encoder(4).fingerprint()


def test_logit_scale_default():
    assert make_toy_encoder().logit_scale == 100.0


def test_encode_text_unit_norm(rng):
    enc = make_toy_encoder(0, 16, 8)
    out = enc.encode_text(torch.tensor(rng.standard_normal((10, 7, 8)) * 5, dtype=torch.float32))
    assert out.shape == (10, 16)
    np.testing.assert_allclose(out.norm(dim=-1).numpy(), 1.0, atol=1e-5)


def test_encode_text_gradient_matches_finite_differences(enc64, rng):
    toks = torch.tensor(rng.standard_normal((5, 8)), requires_grad=True)
    target = torch.tensor(rng.standard_normal(8))

    def f(t):
        return float(enc64.encode_text(t) @ target)

    (enc64.encode_text(toks) @ target).backward()
    num = np.zeros((5, 8))
    base = toks.detach().clone()
    for i in range(5):
        for j in range(8):
            p, m = base.clone(), base.clone()
            p[i, j] += 1e-5
            m[i, j] -= 1e-5
            num[i, j] = (f(p) - f(m)) / 2e-5
    ana = toks.grad.numpy()
    assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-4


def test_mean_pool_is_order_insensitive(rng):
    enc = make_toy_encoder()
    toks = torch.tensor(rng.standard_normal((6, 32)), dtype=torch.float32)
    torch.testing.assert_close(enc.encode_text(toks), enc.encode_text(toks.flip(0)))


def test_mask_ignores_padding():
    enc = make_toy_encoder()
    a, b = enc.embed_tokens("red fox"), enc.embed_tokens("a very long class name")
    toks, mask = pad_sequences([a, b])
    batched = enc.encode_text(toks, mask)
    torch.testing.assert_close(batched[0], enc.encode_text(a))
    torch.testing.assert_close(batched[1], enc.encode_text(b))


def test_class_text_feature_properties():
    enc = make_toy_encoder(0)
    t = PromptTemplate()
    a = class_text_feature(enc, t, "dog")
    assert np.array_equal(a, class_text_feature(enc, t, "dog"))
    assert abs(np.linalg.norm(a) - 1) < 1e-5
    assert float(a @ class_text_feature(enc, t, "cat")) < 1.0


def test_class_text_feature_empty_name():
    with pytest.raises(ValueError):
        class_text_feature(make_toy_encoder(), PromptTemplate(), "")


def test_class_text_features_batch_matches_single():
    enc = make_toy_encoder()
    names = ["dog", "sea lion", "cat"]
    batch = class_text_features(enc, "a photo of a {class}", names)
    for row, n in zip(batch, names):
        np.testing.assert_allclose(row, class_text_feature(enc, "a photo of a {class}", n), atol=1e-6)


def test_extract_features(rng):
    enc = make_toy_encoder(0, 4, 4)
    items = [rng.standard_normal(4) for _ in range(5)]
    fs = extract_features(enc, items, list("abcde"))
    np.testing.assert_allclose(fs.features[2], items[2] / np.linalg.norm(items[2]), rtol=1e-6)
    assert set(fs.origin) == {"real"}
    perm = [4, 2, 0, 1, 3]
    fp = extract_features(enc, [items[i] for i in perm], [fs.labels[i] for i in perm])
    assert np.array_equal(fp.features, fs.features[perm])
    assert len(extract_features(enc, [], [])) == 0
    with pytest.raises(DataError):
        extract_features(enc, items, ["a"])


def test_dimension_preconditions():
    with pytest.raises(ValueError):
        ToyDualEncoder(0, 1, 8)
    enc = make_toy_encoder(0, 8, 8)
    with pytest.raises(ValueError):
        enc.encode_text(torch.zeros(3, 5))
