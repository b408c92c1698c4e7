import numpy as np
import pytest

from rlmildat import autodiff as ad
from rlmildat.autodiff import Value
from rlmildat.errors import EmptyBagError, ShapeError
from rlmildat.mil import MLP, EncoderNet, PoolingHead


def _head(kind, d=5, seed=0, classes=3):
    return PoolingHead(kind, d, 7, classes, np.random.default_rng(seed), attention_dim=6)


def test_encoder_zero_and_identity():
    rng = np.random.default_rng(0)
    enc = EncoderNet((4, 4, 4), rng)
    for p in enc.parameters():
        p.value.data[...] = 0.0
    x = rng.normal(size=(3, 4))
    assert not enc.encode(x).data.any()
    # identity layers on non-negative input pass through the ReLU unchanged
    enc.layers[0].weight.value.data[...] = np.eye(4)
    enc.layers[1].weight.value.data[...] = np.eye(4)
    xp = np.abs(x)
    np.testing.assert_array_equal(enc.encode(xp).data, xp)
    with pytest.raises(ShapeError):
        enc.encode(np.ones((2, 3)))


@pytest.mark.parametrize("kind", ["mean", "max", "attention"])
def test_end_to_end_gradcheck(kind):
    rng = np.random.default_rng(1)
    enc = EncoderNet((5, 6, 5), rng)
    head = _head(kind)
    x = rng.normal(size=(4, 5))
    mask = np.array([1, 1, 1, 0])
    params = enc.parameters() + head.parameters()

    def loss():
        return ad.cross_entropy(head(enc(Value(x)), mask), [2])

    ad.backward(loss())
    num = ad.gradcheck(lambda: loss().data, [p.value.data for p in params])
    for p, n in zip(params, num):
        assert ad.rel_error(p.grad, n) < 1e-4, p.name


def test_attention_zero_scorer_equals_mean():
    rng = np.random.default_rng(2)
    head = _head("attention")
    head.attn_w.value.data[...] = 0.0
    h = Value(rng.normal(size=(6, 5)))
    mask = np.array([1, 0, 1, 1, 0, 1])
    a = head.attention_weights(h, mask).data
    np.testing.assert_allclose(a, mask / mask.sum(), atol=1e-15)
    np.testing.assert_allclose(head.pool(h, mask).data, ad.masked_mean(h, mask).data, atol=1e-12)


def test_attention_weights_sum_and_convex_hull():
    rng = np.random.default_rng(3)
    for _ in range(50):
        head = _head("attention", seed=int(rng.integers(1 << 30)))
        n = int(rng.integers(1, 9))
        h = Value(rng.normal(size=(n, 5)) * 3)
        mask = rng.integers(0, 2, n)
        mask[rng.integers(n)] = 1
        a = head.attention_weights(h, mask).data
        assert abs(a.sum() - 1) <= 1e-9
        assert not a[mask == 0].any()
        z = head.pool(h, mask).data
        rows = h.data[mask == 1]
        assert (z >= rows.min(0) - 1e-9).all() and (z <= rows.max(0) + 1e-9).all()


@pytest.mark.parametrize("kind", ["mean", "max", "attention"])
def test_permutation_and_masked_rows(kind):
    rng = np.random.default_rng(4)
    head = _head(kind)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        h = rng.normal(size=(n, 5))
        mask = rng.integers(0, 2, n)
        mask[0] = 1
        base = head(Value(h), mask).data
        perm = rng.permutation(n)
        permuted = head(Value(h[perm]), mask[perm]).data
        if kind == "max":
            assert np.array_equal(base, permuted)
        else:
            np.testing.assert_allclose(permuted, base, rtol=0, atol=1e-12)
        noisy = h.copy()
        noisy[mask == 0] = rng.normal(size=((mask == 0).sum(), 5)) * 100
        assert head(Value(noisy), mask).data.tobytes() == base.tobytes()


def test_empty_bag():
    with pytest.raises(EmptyBagError):
        _head("mean").pool(Value(np.ones((2, 5))), [0, 0])


def test_classifier_zero_and_antisymmetric():
    head = _head("mean", classes=2)
    for p in head.classifier.parameters():
        p.value.data[...] = 0.0
    out = head.classify(Value(np.ones(5))).data
    assert out.tolist() == [0.0, 0.0] and int(np.argmax(out)) == 0
    # linear classifier with columns w, -w: negating the input negates the logits
    rng = np.random.default_rng(5)
    lin = MLP((5, 2), rng, "c", "task")
    w = rng.normal(size=5)
    lin.layers[0].weight.value.data[...] = np.stack([w, -w], axis=1)
    lin.layers[0].bias.value.data[...] = 0.0
    z = rng.normal(size=5)
    np.testing.assert_array_equal(lin(Value(-z)).data, -lin(Value(z)).data)


def test_encoder_receives_task_and_domain_gradients():
    from rlmildat.dat import DomainClassifier, domain_logits, domain_loss
    rng = np.random.default_rng(6)
    enc = EncoderNet((4, 5, 4), rng)
    head = PoolingHead("mean", 4, 5, 2, rng)
    dom = DomainClassifier(4, 5, 2, rng)
    x = rng.normal(size=(3, 4))

    def run(task=True, domain=True):
        ad.reset_gradients(enc.parameters())
        h = enc(Value(x))
        if task:
            ad.backward(ad.cross_entropy(head(h), [1]))
        if domain:
            ad.backward(domain_loss(domain_logits(dom, h, 1.0), [0, 1, 1]))
        return [p.grad.copy() for p in enc.parameters()]

    both, t_only, d_only = run(), run(domain=False), run(task=False)
    for b, t, d in zip(both, t_only, d_only):
        assert np.abs(t).sum() > 0 and np.abs(d).sum() > 0
        np.testing.assert_allclose(b, t + d, atol=1e-15)
