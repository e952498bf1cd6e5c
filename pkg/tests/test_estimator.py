import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from phasecond.estimator import PhaseConditionedGenerator
from phasecond.synthworld import ActionSchema, gen_sample

SMALL = dict(L=2, D=32, N=2, F=8, heads=2, k_max=2, vocab=64, steps=10, batch=4, sample_steps=3, n_actions=8)


@pytest.fixture(scope="module")
def samples():
    schema = ActionSchema.build(32, n_actions=8)
    return [gen_sample(i, schema, F=8, N=2, D=32, k_max=2) for i in range(6)]


def test_params_and_clone():
    est = PhaseConditionedGenerator(**SMALL)
    assert est.get_params()["steps"] == 10
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert est.set_params(gamma=2.0).gamma == 2.0


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        PhaseConditionedGenerator(**SMALL).predict([])


def test_empty_fit():
    with pytest.raises(ValueError):
        PhaseConditionedGenerator(**SMALL).fit([])


@pytest.mark.parametrize("two_stage", [True, False])
def test_fit_predict_score(samples, two_stage):
    est = PhaseConditionedGenerator(**SMALL, two_stage=two_stage).fit(samples)
    x = est.predict(samples[:3])
    assert x.shape == (3, 8, 2, 32) and np.all(np.isfinite(x))
    assert 0.0 <= est.score(samples[:3]) <= 1.0
    again = PhaseConditionedGenerator(**SMALL, two_stage=two_stage).fit(samples).predict(samples[:3])
    assert np.array_equal(x, again)
