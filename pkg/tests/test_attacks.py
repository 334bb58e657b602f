import numpy as np
import pytest
from scipy import stats

from ternaryvote import attacks as atk
from ternaryvote.compressors import clip_linf, ternary_compress
from ternaryvote.core import CompressorParams, ConfigError, RngStream, TooFewWorkers


def test_blind():
    assert np.array_equal(atk.attack_blind([1, -2]), [-1, 2])
    assert np.array_equal(atk.attack_blind([0.0, 0.0]), [0, 0])


def test_blind_margin_with_M_minus_1_attackers():
    # M honest workers hold grad F, K = M - 1 blind attackers hold -grad F
    M = 5
    grad = np.array([0.3, -0.7, 0.0, 1.2])
    attackers = sum(atk.attack_blind(grad) for _ in range(M - 1))
    margin = M * np.abs(grad) - np.abs(attackers)
    assert np.allclose(margin, np.abs(grad))
    assert np.all(margin[grad != 0] > 0)


def test_flip_sign_then_compress():
    assert np.array_equal(atk.attack_flip_sign([0.3, -0.1]), [-0.3, 0.1])
    assert np.array_equal(atk.attack_flip_sign([0.0]), [0.0])
    c = 0.5
    g = clip_linf(atk.attack_flip_sign([3.0, -0.2, 0.1]), c)
    z = ternary_compress(g, CompressorParams(c, 2.0, c), RngStream(0, ("a",)))
    assert set(np.unique(z)) <= {-1, 0, 1}


def test_foe():
    assert np.array_equal(atk.attack_foe([1, 1], 1.0), [-1, -1])
    assert np.array_equal(atk.attack_foe([1, 1], 0.0), [0, 0])
    assert np.array_equal(clip_linf(atk.attack_foe([0.4, -2.0], 1.0), 0.5), [-0.4, 0.5])
    with pytest.raises(ConfigError):
        atk.FallOfEmpire(-1)


def test_lie_z():
    assert atk.lie_z(10, 4) == pytest.approx(stats.norm.ppf(2 / 3), abs=1e-12)
    assert atk.lie_z(10, 4) == pytest.approx(0.43073, abs=1e-5)
    with pytest.raises(ConfigError):
        atk.lie_z(4, 4)


def test_lie_value():
    # two honest values 0.5 and 1.5: mean 1, population std 0.5
    out = atk.attack_lie([[0.5], [1.5]], 10, 4)
    assert out[0] == pytest.approx(1 - 0.5 * stats.norm.ppf(2 / 3), abs=1e-12)
    assert out[0] == pytest.approx(0.78464, abs=1e-5)


def test_lie_degenerate_and_errors():
    assert np.allclose(atk.attack_lie([[0.2, -1.0]] * 3, 10, 4), [0.2, -1.0], rtol=0, atol=1e-15)
    with pytest.raises(TooFewWorkers):
        atk.attack_lie([[1.0]], 10, 4)
