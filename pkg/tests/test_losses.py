import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from hiervid.losses import (EPS, Discriminator, PerceptualExtractors, build_extractors,
                            discriminator_loss, feature_loss, generator_adv_loss,
                            generator_loss_terms, image_loss, total_generator_loss,
                            train_appearance_extractor, train_structure_extractor)
from hiervid.nets import param_digest


class ConstD(nn.Module):
    """Discriminator stub returning fixed probabilities, optionally per image identity."""

    def __init__(self, value=0.5, table=None):
        super().__init__()
        self.value = value
        self.table = table or []

    def forward(self, p, x):
        for img, prob in self.table:
            if torch.equal(img, x):
                return torch.full((x.shape[0],), prob, dtype=x.dtype)
        return torch.full((x.shape[0],), self.value, dtype=x.dtype)


def identity_extractors():
    return PerceptualExtractors(nn.Identity(), nn.Identity())


def rand_images(seed, n=2, c=3, s=8):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, c, s, s, generator=g, dtype=torch.float64) * 2 - 1


def test_image_loss_examples():
    x = rand_images(0)
    assert image_loss(x, x).item() == 0
    assert image_loss(x, x + 0.5).item() == pytest.approx(0.25, abs=1e-12)
    y = rand_images(1)
    a, b = x.numpy(), y.numpy()
    brute = sum((a.ravel()[i] - b.ravel()[i]) ** 2 for i in range(a.size)) / a.size
    assert image_loss(x, y).item() == pytest.approx(brute, abs=1e-9)
    with pytest.raises(ValueError):
        image_loss(x, y[:1])


def test_feature_loss_examples():
    x, y = rand_images(2), rand_images(3)
    ext = identity_extractors()
    assert feature_loss(x, x, ext).item() == 0
    assert feature_loss(x, y, ext).item() == pytest.approx(2 * image_loss(x, y).item(), rel=1e-12)
    torch.manual_seed(0)
    c1 = nn.Conv2d(3, 4, 3).double()
    c2 = nn.Sequential(nn.Conv2d(3, 2, 3, stride=2), nn.Tanh()).double()
    ext = PerceptualExtractors(c1, c2)
    with torch.no_grad():
        expect = ((c1(x) - c1(y)) ** 2).mean() + ((c2(x) - c2(y)) ** 2).mean()
    assert feature_loss(x, y, ext).item() == pytest.approx(expect.item(), rel=1e-12)


def test_feature_loss_shape_mismatch():
    with pytest.raises(ValueError):
        feature_loss(rand_images(0, s=8), rand_images(1, s=6), identity_extractors())


def test_generator_adv_examples():
    x = rand_images(4)
    p = torch.zeros(2, 2, 8, 8, dtype=torch.float64)
    assert generator_adv_loss(p, x, ConstD(0.5)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert generator_adv_loss(p, x, ConstD(1 - EPS)).item() == pytest.approx(0, abs=1e-5)
    assert generator_adv_loss(p, x, ConstD(0.9)) < generator_adv_loss(p, x, ConstD(0.1))
    assert math.isfinite(generator_adv_loss(p, x, ConstD(0.0)).item())


def test_discriminator_loss_examples():
    real, fake, inp = rand_images(5), rand_images(6), rand_images(7)
    p = torch.zeros(2, 2, 8, 8, dtype=torch.float64)
    d = discriminator_loss(p, real, fake, inp, ConstD(0.5)).item()
    assert d == pytest.approx(2 * math.log(2), abs=1e-6)
    assert d == pytest.approx(1.3863, abs=1e-4)
    perfect = ConstD(0.0, [(real, 1.0)])
    assert discriminator_loss(p, real, fake, inp, perfect).item() == pytest.approx(0, abs=1e-6)
    # the mismatched pair is scored with the future pose and the input frame
    table = ConstD(0.5, [(real, 0.8), (fake, 0.3), (inp, 0.6)])
    expect = -math.log(0.8) - 0.5 * math.log(0.7) - 0.5 * math.log(0.4)
    assert discriminator_loss(p, real, fake, inp, table).item() == pytest.approx(expect, rel=1e-9)


def test_discriminator_loss_matches_three_terms():
    torch.manual_seed(1)
    disc = Discriminator(2, (4, 4), image_size=8).double()
    real, fake, inp = rand_images(8), rand_images(9), rand_images(10)
    p = rand_images(11, c=2).abs()
    with torch.no_grad():
        expect = (-torch.log(disc(p, real)) - 0.5 * torch.log(1 - disc(p, fake))
                  - 0.5 * torch.log(1 - disc(p, inp))).mean()
        got = discriminator_loss(p, real, fake, inp, disc)
    assert got.item() == pytest.approx(expect.item(), rel=1e-12)


def test_discriminator_loss_monotone_in_real_score():
    real, fake, inp = rand_images(12), rand_images(13), rand_images(14)
    p = torch.zeros(2, 2, 8, 8, dtype=torch.float64)
    vals = [discriminator_loss(p, real, fake, inp, ConstD(0.5, [(real, q)])).item()
            for q in (0.2, 0.4, 0.6, 0.8)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_total_loss_is_unweighted_sum():
    torch.manual_seed(2)
    disc = Discriminator(2, (4, 4), image_size=8).double()
    ext = identity_extractors()
    x, y = rand_images(15), rand_images(16)
    p = rand_images(17, c=2).abs()
    terms = generator_loss_terms(x, y, p, ext, disc)
    total = total_generator_loss(x, y, p, ext, disc)
    assert total.item() == (terms["img"] + terms["feat"] + terms["gen"]).item()
    assert total_generator_loss(x, x, p, ext, ConstD(1 - EPS)).item() == pytest.approx(0, abs=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0))
def test_losses_finite_nonnegative(seed, prob):
    x, y, z = rand_images(seed), rand_images(seed + 1), rand_images(seed + 2)
    p = torch.zeros(2, 2, 8, 8, dtype=torch.float64)
    d = ConstD(prob)
    for v in (image_loss(x, y), feature_loss(x, y, identity_extractors()),
              generator_adv_loss(p, y, d), discriminator_loss(p, x, y, z, d)):
        assert math.isfinite(v.item()) and v.item() >= 0


def symmetric_conv(cin, cout, seed):
    torch.manual_seed(seed)
    conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False).double()
    with torch.no_grad():
        conv.weight.copy_((conv.weight + conv.weight.flip(-1)) / 2)
    return conv


class MeanD(nn.Module):
    def forward(self, p, x):
        return torch.sigmoid(p.mean((1, 2, 3)) - 0.7 * x.mean((1, 2, 3)))


def test_losses_flip_symmetric():
    ext = PerceptualExtractors(symmetric_conv(3, 4, 0), symmetric_conv(3, 2, 1))
    x, y, z = rand_images(20), rand_images(21), rand_images(22)
    p = rand_images(23, c=2).abs()
    f = lambda t: t.flip(-1)
    d = MeanD()
    pairs = [(image_loss(x, y), image_loss(f(x), f(y))),
             (feature_loss(x, y, ext), feature_loss(f(x), f(y), ext)),
             (generator_adv_loss(p, y, d), generator_adv_loss(f(p), f(y), d)),
             (discriminator_loss(p, x, y, z, d), discriminator_loss(f(p), f(x), f(y), f(z), d))]
    for a, b in pairs:
        assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_discriminator_output_in_unit_interval():
    disc = Discriminator(6)
    out = disc(torch.rand(3, 6, 64, 64), torch.rand(3, 3, 64, 64) * 2 - 1)
    assert out.shape == (3,) and torch.all((out > 0) & (out < 1))
    with pytest.raises(ValueError):
        Discriminator(6, image_size=60)


def test_extractors_frozen_and_stable():
    frames = rand_images(30, n=16, s=16).float()
    hm = torch.rand(16, 2, 16, 16)
    c1 = train_appearance_extractor(frames, widths=(4, 4), steps=3, batch_size=4)
    c2 = train_structure_extractor(frames, hm, widths=(4, 4), steps=3, batch_size=4)
    ext = PerceptualExtractors(c1, c2)
    assert not any(p.requires_grad for p in ext.parameters())
    digest = param_digest(ext)
    ext.train()
    assert not ext.training and not ext.c1.training
    x = frames[:2]
    assert torch.equal(ext.c1(x), ext.c1(x))
    assert param_digest(ext) == digest
    assert build_extractors(2, (4, 4), (4, 4)).c2(x).shape == ext.c2(x).shape


def test_extractor_training_learns():
    torch.manual_seed(0)
    frames = rand_images(31, n=32, s=16).float()
    hm = torch.rand(32, 2, 16, 16)
    a = train_structure_extractor(frames, hm, widths=(4, 4), steps=0, seed=3)
    b = train_structure_extractor(frames, hm, widths=(4, 4), steps=60, seed=3)
    target = torch.nn.functional.avg_pool2d(hm, 4) * 4
    with torch.no_grad():
        assert ((b(frames) - target) ** 2).mean() < ((a(frames) - target) ** 2).mean()
