import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from angiogan import tensor as T
from angiogan.checkpoint import save_archive
from angiogan.discriminators import DiscOutput
from angiogan.losses import (LossWeights, MisalignedFeaturesError, PerceptualExtractor, adv_total,
                             feature_matching_loss, hinge_d_loss, hinge_g_loss, perceptual_loss,
                             reconstruction_loss, total_objective)
from angiogan.tensor import Tape, Tensor


def _maps(rng, shapes, scale=2.0):
    return [Tensor(rng.normal(0, scale, size=s)) for s in shapes]


SHAPES = [(2, 1, 8, 8), (2, 1, 4, 4), (2, 1, 4, 4), (2, 1, 2, 2)]


def test_hinge_d_closed_forms():
    zeros = [Tensor(np.zeros(s)) for s in SHAPES]
    assert hinge_d_loss(zeros, zeros).item() == 2.0
    real = [Tensor(np.ones(s)) for s in SHAPES]
    fake = [Tensor(-np.ones(s)) for s in SHAPES]
    assert hinge_d_loss(real, fake).item() == 0.0


def test_hinge_d_matches_direct_summation(rng):
    real, fake = _maps(rng, SHAPES), _maps(rng, SHAPES)
    per = []
    for r, f in zip(real, fake):
        rr, ff = r.data.astype(np.float64).ravel(), f.data.astype(np.float64).ravel()
        per.append(sum(max(0.0, 1 - v) for v in rr) / rr.size + sum(max(0.0, 1 + v) for v in ff) / ff.size)
    assert abs(hinge_d_loss(real, fake).item() - np.mean(per)) < 1e-6


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_hinge_d_nonnegative_and_zero_iff_margins(r, f):
    real, fake = [Tensor(np.array(r))], [Tensor(np.array(f))]
    v = hinge_d_loss(real, fake).item()
    assert v >= 0
    satisfied = all(x >= 1 for x in np.float32(r)) and all(x <= -1 for x in np.float32(f))
    assert (v == 0) == satisfied


def test_hinge_g(rng):
    assert hinge_g_loss([Tensor(np.full(s, 5.0)) for s in SHAPES]).item() == -5.0
    assert hinge_g_loss([Tensor(np.zeros(s)) for s in SHAPES]).item() == 0.0
    maps = _maps(rng, SHAPES)
    direct = -np.mean([m.data.astype(np.float64).mean() for m in maps])
    assert abs(hinge_g_loss(maps).item() - direct) < 1e-6
    with pytest.raises(ValueError):
        hinge_g_loss([])
    with pytest.raises(ValueError):
        hinge_d_loss([], [])


def test_hinge_g_step_raises_fake_scores_of_linear_critic(rng):
    a = rng.normal(size=16)
    y = Tensor(rng.normal(size=16), requires_grad=True)
    with Tape() as tape:
        loss = hinge_g_loss([T.mul(y, Tensor(a))])
    tape.backward(loss)
    before = float((a * y.data).mean())
    after = float((a * (y.data - 0.1 * y.grad)).mean())
    assert after > before
    assert np.isclose(after - before, 0.1 * (a ** 2).sum() / 16 ** 2, rtol=1e-5)


def test_adv_total():
    assert adv_total(2.0, -1.0).item() == -8.0
    assert adv_total(3.25, 0.0).item() == 3.25
    assert LossWeights().lambda_adv == 10.0


def test_reconstruction(rng):
    a = Tensor(rng.normal(size=(2, 1, 4, 4)))
    assert reconstruction_loss(a, a).item() == 0.0
    assert reconstruction_loss(Tensor(a.data + 1.0), a).item() == pytest.approx(1.0, abs=1e-6)
    b = Tensor(rng.normal(size=(2, 1, 4, 4)))
    direct = ((a.data.astype(np.float64) - b.data) ** 2).sum() / a.size
    assert abs(reconstruction_loss(a, b).item() - direct) < 1e-6
    with pytest.raises(ValueError):
        reconstruction_loss(a, Tensor(np.zeros((2, 1, 4, 5))))


def test_perceptual(rng):
    ex = PerceptualExtractor()
    a, b = Tensor(rng.uniform(-1, 1, (2, 1, 16, 16))), Tensor(rng.uniform(-1, 1, (2, 1, 16, 16)))
    assert perceptual_loss(a, a, ex).item() == 0.0
    assert perceptual_loss(a, b, ex).item() == pytest.approx(perceptual_loss(b, a, ex).item(), rel=1e-6)
    fa, fb = ex(a), ex(b)
    manual = np.mean([np.abs(x.data.astype(np.float64) - y.data).mean() for x, y in zip(fa, fb)])
    assert len(fa) == 3
    assert abs(perceptual_loss(a, b, ex).item() - manual) < 1e-5


def test_perceptual_gradient_flows_only_into_fake(rng):
    ex = PerceptualExtractor(widths=(4, 4))
    fake = Tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True)
    real = Tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True)
    with Tape() as tape:
        loss = perceptual_loss(fake, real, ex)
    tape.backward(loss)
    assert fake.grad is not None and real.grad is None


def test_extractor_archive_round_trip(tmp_path):
    ex = PerceptualExtractor(seed=9)
    path = save_archive(tmp_path / "vgg.npz", ex.to_arrays())
    loaded = PerceptualExtractor.from_archive(path)
    assert loaded.fingerprint() == ex.fingerprint() and loaded.out_width == 128
    with pytest.raises(ValueError):
        PerceptualExtractor.from_archive(save_archive(tmp_path / "empty.npz", {"x": np.zeros(1)}))


def _outs(values):
    return [DiscOutput(None, [Tensor(np.asarray(v, dtype=np.float64)) for v in layer]) for layer in values]


def test_feature_matching_hand_case():
    real = _outs([[[1.0, 1.0], [2.0, 2.0]]])
    fake = _outs([[[0.0, 0.0], [0.0, 0.0]]])
    assert feature_matching_loss(real, fake).item() == pytest.approx((1.0 + 2.0) / 2)
    assert feature_matching_loss(real, real).item() == 0.0


def test_feature_matching_normalizes_by_layers_per_discriminator(rng):
    real = _outs([[rng.normal(size=3) for _ in range(6)] for _ in range(4)])
    fake = _outs([[rng.normal(size=3) for _ in range(6)] for _ in range(4)])
    direct = sum(np.abs(r.data.astype(np.float64) - f.data).mean()
                 for ro, fo in zip(real, fake) for r, f in zip(ro.features, fo.features)) / 6
    assert abs(feature_matching_loss(real, fake).item() - direct) < 1e-5


def test_feature_matching_misaligned():
    with pytest.raises(MisalignedFeaturesError):
        feature_matching_loss(_outs([[[1.0]]]), _outs([[[1.0]], [[2.0]]]))
    with pytest.raises(MisalignedFeaturesError):
        feature_matching_loss(_outs([[[1.0], [1.0]]]), _outs([[[1.0]]]))


@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)), arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_distance_losses_nonnegative(a, b):
    ta, tb = Tensor(a), Tensor(b)
    assert reconstruction_loss(ta, tb).item() >= 0
    assert feature_matching_loss([DiscOutput(None, [ta])], [DiscOutput(None, [tb])]).item() >= 0


def test_total_objective():
    assert total_objective(1, 1, 1, 1).item() == 22.0
    assert total_objective(3.0, 1, 1, 1, LossWeights(10, 0, 0, 0)).item() == 3.0
    ours = LossWeights(lambda_fm=0, lambda_perc=0)
    assert total_objective(1, 1, 1, 1, ours).item() == 11.0
    with pytest.raises(ValueError):
        LossWeights(lambda_rec=-1)
