import pytest
import torch

from cagan.latent import (
    BACKGROUND,
    TARGET,
    PriorConfig,
    sample_common,
    sample_cr_batch,
    sample_cr_pair,
    sample_salient,
)


def gen(seed):
    return torch.Generator().manual_seed(seed)


def test_sample_common_shape_and_determinism():
    cfg = PriorConfig(L=4, M=2)
    a = sample_common(3, cfg, gen(7))
    b = sample_common(3, cfg, gen(7))
    assert a.shape == (3, 4)
    assert torch.equal(a, b)


def test_sample_common_standard_normal_moments():
    cfg = PriorConfig(L=1, M=1)
    x = sample_common(100_000, cfg, gen(0))
    assert abs(float(x.mean())) < 0.02
    assert abs(float(x.std()) - 1.0) < 0.02


def test_sample_common_uniform_support():
    cfg = PriorConfig(L=2, M=1, common_prior="uniform_pm1")
    x = sample_common(1, cfg, gen(3))
    assert float(x.min()) >= -1.0 and float(x.max()) <= 1.0


@pytest.mark.parametrize("batch,M,seed", [(5, 8, 0), (1, 2, 9), (64, 16, 1234)])
def test_background_salient_is_zero(batch, M, seed):
    cfg = PriorConfig(L=2, M=M)
    s = sample_salient(batch, BACKGROUND, cfg, gen(seed))
    assert s.shape == (batch, M)
    assert torch.equal(s, torch.zeros(batch, M))


def test_target_salient_moments_and_determinism():
    cfg = PriorConfig(L=1, M=1)
    s = sample_salient(100_000, TARGET, cfg, gen(1))
    assert abs(float(s.mean())) < 0.02
    a = sample_salient(1, TARGET, PriorConfig(L=1, M=3), gen(5))
    b = sample_salient(1, TARGET, PriorConfig(L=1, M=3), gen(5))
    assert torch.equal(a, b)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        sample_common(0, PriorConfig(), gen(0))
    with pytest.raises(ValueError):
        sample_salient(2, "elsewhere", PriorConfig(), gen(0))
    with pytest.raises(ValueError):
        PriorConfig(L=0)
    with pytest.raises(ValueError):
        PriorConfig(common_prior="cauchy")


def test_cr_pair_shared_coordinate_m2():
    cfg = PriorConfig(L=3, M=2)
    for seed in range(20):
        z, s1, s2, k = sample_cr_pair(cfg, gen(seed))
        assert z.shape == (3,)
        assert float(s1[k]) == float(s2[k])
        assert float(s1[1 - k]) != float(s2[1 - k])


def test_cr_pair_exactly_one_shared_coordinate():
    cfg = PriorConfig(L=2, M=6)
    z, s1, s2, k = sample_cr_batch(50, cfg, gen(11))
    shared = (s1 == s2).sum(dim=1)
    assert torch.equal(shared, torch.ones(50, dtype=shared.dtype))


def test_cr_pair_k_uniform():
    cfg = PriorConfig(L=1, M=5)
    _, _, _, k = sample_cr_batch(10_000, cfg, gen(2))
    freqs = torch.bincount(k, minlength=5).float() / 10_000
    assert torch.all((freqs - 0.2).abs() < 0.02)


def test_cr_pair_deterministic():
    cfg = PriorConfig(L=2, M=3)
    a = sample_cr_pair(cfg, gen(1))
    b = sample_cr_pair(cfg, gen(1))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert torch.equal(a[2], b[2]) and a[3] == b[3]


def test_cr_pair_needs_two_salient_dims():
    with pytest.raises(ValueError):
        sample_cr_pair(PriorConfig(L=2, M=1), gen(0))
