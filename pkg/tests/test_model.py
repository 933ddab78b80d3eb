import numpy as np
import pytest
import torch
import torch.nn as nn

from cwdcil.model import (BNStatsRecorder, GeneratorBundle, IdentityExtractor, IncrementalNet,
                          MLPExtractor, build_backbone, build_generator, capture_bn_batch_stats, evaluation)


def identity_net(d, k=None):
    return IncrementalNet(IdentityExtractor(d), (d,), k or d)


def test_identity_features():
    m = identity_net(2)
    z = m.forward_features(torch.tensor([[1.0, 2.0]]))
    assert z.shape == (1, 2)
    torch.testing.assert_close(z, torch.tensor([[1.0, 2.0]]))


def test_zero_linear_extractor_gives_zero_features():
    ext = MLPExtractor(3, 4)
    with torch.no_grad():
        for p in ext.parameters():
            p.zero_()
    m = IncrementalNet(ext, (3,), 2)
    with evaluation(m):
        z = m.forward_features(torch.randn(5, 3))
    assert float(z.detach().abs().max()) == 0.0


def test_two_layer_extractor_matches_hand_composition():
    torch.manual_seed(3)
    ext = MLPExtractor(3, 2, hidden=[4])
    m = IncrementalNet(ext, (3,), 2)
    # Perturb BN buffers so the hand computation covers them.
    bn0, lin1, bn1, _, lin2 = ext.net
    for bn in (bn0, bn1):
        bn.running_mean.uniform_(-1, 1)
        bn.running_var.uniform_(0.5, 2)
        with torch.no_grad():
            bn.weight.uniform_(0.5, 1.5)
            bn.bias.uniform_(-0.5, 0.5)
    x = torch.randn(6, 3)

    def bn_eval(bn, v):
        return (v - bn.running_mean) / torch.sqrt(bn.running_var + bn.eps) * bn.weight + bn.bias

    with torch.no_grad():
        h = bn_eval(bn0, x)
        h = torch.relu(bn_eval(bn1, h @ lin1.weight.T + lin1.bias))
        expected = h @ lin2.weight.T + lin2.bias
        with evaluation(m):
            got = m.forward_features(x)
    torch.testing.assert_close(got, expected)


def test_logits_examples():
    m = identity_net(2)
    with torch.no_grad():
        m.classifier.weight.copy_(torch.eye(2))
        m.classifier.bias.zero_()
    torch.testing.assert_close(m.forward_logits(torch.tensor([[1.0, 0.0]])).detach(), torch.tensor([[1.0, 0.0]]))
    with torch.no_grad():
        m.classifier.weight.zero_()
    assert float(m.forward_logits(torch.randn(3, 2)).detach().abs().max()) == 0.0


def test_logits_match_matvec(rng):
    m = identity_net(4, 3)
    z = torch.tensor(rng.normal(size=(1, 4)), dtype=torch.float32)
    w = m.classifier.weight.detach().numpy().astype(np.float64)
    b = m.classifier.bias.detach().numpy().astype(np.float64)
    expected = w @ z.numpy()[0].astype(np.float64) + b
    np.testing.assert_allclose(m.forward_logits(z).detach().numpy()[0], expected, rtol=1e-5, atol=1e-6)


def test_logits_slice():
    m = identity_net(4, 6)
    x = torch.randn(2, 4)
    torch.testing.assert_close(m.forward_logits(x, slice(2, 5)), m.forward_logits(x)[:, 2:5])


def test_input_shape_checked():
    m = identity_net(3)
    with pytest.raises(ValueError):
        m.forward_features(torch.zeros(2, 4))


def test_expand_preserves_rows_and_is_seeded():
    m = IncrementalNet.from_spec({"kind": "identity", "dim": 4}, (4,), 5, seed=1)
    before_w = m.weight.detach().clone()
    before_b = m.classifier.bias.detach().clone()
    m.expand_classifier(5, seed=9)
    assert m.weight.shape == (10, 4) and m.num_classes == 10
    assert torch.equal(m.weight[:5], before_w)
    assert torch.equal(m.classifier.bias[:5], before_b)
    other = IncrementalNet.from_spec({"kind": "identity", "dim": 4}, (4,), 5, seed=1).expand_classifier(5, seed=9)
    assert torch.equal(other.weight, m.weight)


def test_expand_rejects_zero():
    with pytest.raises(ValueError):
        identity_net(2).expand_classifier(0)


def test_from_spec_reproducible():
    a = IncrementalNet.from_spec({"kind": "small_conv", "in_channels": 1}, (1, 8, 8), 2, seed=4)
    b = IncrementalNet.from_spec({"kind": "small_conv", "in_channels": 1}, (1, 8, 8), 2, seed=4)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_running_variances_positive():
    m = IncrementalNet.from_spec({"kind": "small_conv"}, (1, 8, 8), 2)
    m.train()
    m(torch.randn(16, 1, 8, 8))
    assert all(bool((v > 0).all()) for _, v in m.bn_stats)


def test_build_backbone_unknown_kind():
    with pytest.raises(ValueError):
        build_backbone({"kind": "transformer"})


@pytest.mark.parametrize("spec,shape", [({"kind": "resnet32", "in_channels": 3}, (3, 32, 32))])
def test_resnet32_shapes(spec, shape):
    m = IncrementalNet.from_spec(spec, shape, 10)
    with evaluation(m):
        assert m(torch.randn(2, *shape)).shape == (2, 10)


# ---- batch-norm statistics ------------------------------------------------------


def _single_bn_model():
    ext = MLPExtractor(1, 1)
    return IncrementalNet(ext, (1,), 2)


def test_capture_hand_example():
    m = _single_bn_model()
    stats = capture_bn_batch_stats(m, torch.tensor([[-1.0], [1.0]]))
    assert len(stats) == 1
    mean, var = stats[0]
    assert float(mean) == 0.0 and float(var) == 1.0


def test_capture_identical_samples_zero_variance():
    m = IncrementalNet.from_spec({"kind": "mlp", "in_dim": 3, "out_dim": 4, "hidden": [5]}, (3,), 2)
    stats = capture_bn_batch_stats(m, torch.ones(4, 3) * 0.7)
    assert float(stats[0][1].abs().max()) == 0.0
    assert len(stats) == len(m.bn_layers()) == 2


def test_capture_errors_and_no_side_effects():
    m = IncrementalNet.from_spec({"kind": "small_conv"}, (1, 8, 8), 2)
    before = [v.clone() for _, v in m.bn_stats]
    m.train()
    capture_bn_batch_stats(m, torch.randn(8, 1, 8, 8))
    assert m.training
    assert all(torch.equal(a, v) for a, (_, v) in zip(before, m.bn_stats))
    with pytest.raises(ValueError):
        capture_bn_batch_stats(m, torch.randn(1, 1, 8, 8))
    with pytest.raises(ValueError):
        capture_bn_batch_stats(identity_net(2), torch.randn(4, 2))


def test_recorder_keeps_graph():
    m = _single_bn_model()
    x = torch.randn(5, 1, requires_grad=True)
    with BNStatsRecorder(m) as rec:
        m.forward_features(x)
    rec.stats[0][1].sum().backward()
    assert x.grad is not None


# ---- generators -------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(1, 8, 8), (3, 32, 32), (5,)])
def test_generator_output_shape(shape):
    g = build_generator(shape, noise_dim=16, seed=0, width=8)
    assert isinstance(g, GeneratorBundle)
    assert g.sample(3).shape == (3, *shape)
    assert g(g.noise(4)).shape == (4, *shape)


def test_image_generator_respects_scale():
    g = build_generator((1, 8, 8), noise_dim=8, seed=0, width=8, out_scale=2.0)
    assert float(g.sample(16).abs().max()) <= 2.0


def test_generator_seeded():
    a = build_generator((1, 8, 8), noise_dim=8, seed=5, width=8)
    b = build_generator((1, 8, 8), noise_dim=8, seed=5, width=8)
    z = a.noise(4, torch.Generator().manual_seed(0))
    with evaluation(a), evaluation(b):
        torch.testing.assert_close(a(z), b(z))
