import collections

import numpy as np
import pytest

from synnet import data
from synnet.exceptions import DivergenceError, ParameterError, UsageError
from synnet.loss import LossWeights
from synnet.model import ParamSet
from synnet.optim import OptimState, TrainConfig, iterations_per_epoch, sgd_step, train
from synnet.persist import RunConfig


def scalar_params(value=1.0):
    params = ParamSet()
    params.add('w.conv.weight', np.full((1, 1, 1, 1), value))
    return params


def grads_of(value):
    return collections.OrderedDict([('w.conv.weight', np.full((1, 1, 1, 1), value))])


def weight(params):
    return float(params['w.conv.weight'].ravel()[0])


class TestSgdStep:

    def test_two_momentum_steps(self):
        params = scalar_params()
        state = OptimState.fresh(params, lr=0.1, momentum=0.9)
        params, state = sgd_step(params, grads_of(1.0), state)
        assert weight(params) == pytest.approx(0.9, abs=1e-12)
        params, state = sgd_step(params, grads_of(1.0), state)
        assert weight(params) == pytest.approx(0.71, abs=1e-12)
        assert state.iteration == 2

    def test_without_momentum_is_plain_descent(self):
        params = scalar_params(2.0)
        state = OptimState.fresh(params, lr=0.25, momentum=0.0)
        params, _ = sgd_step(params, grads_of(4.0), state)
        assert weight(params) == 1.0

    def test_velocity_approaches_geometric_limit(self):
        params = scalar_params(0.0)
        state = OptimState.fresh(params, lr=0.1, momentum=0.5)
        for _ in range(60):
            params, state = sgd_step(params, grads_of(1.0), state)
        assert float(state.velocity['w.conv.weight'].ravel()[0]) == pytest.approx(0.2, rel=1e-12)

    def test_zero_gradient_from_rest(self):
        params = scalar_params(0.3)
        new, _ = sgd_step(params, grads_of(0.0), OptimState.fresh(params))
        assert weight(new) == 0.3

    def test_inputs_untouched(self):
        params = scalar_params()
        state = OptimState.fresh(params)
        grads = grads_of(1.0)
        sgd_step(params, grads, state)
        assert weight(params) == 1.0
        assert np.all(state.velocity['w.conv.weight'] == 0)
        assert state.iteration == 0

    def test_key_mismatch(self):
        params = scalar_params()
        with pytest.raises(UsageError):
            sgd_step(params, collections.OrderedDict(), OptimState.fresh(params))

    def test_shape_mismatch(self):
        params = scalar_params()
        grads = collections.OrderedDict([('w.conv.weight', np.zeros((1, 1, 3, 3)))])
        with pytest.raises(UsageError):
            sgd_step(params, grads, OptimState.fresh(params))

    @pytest.mark.parametrize('lr,momentum', [(0.0, 0.9), (0.1, 1.0), (0.1, -0.1)])
    def test_hyperparameter_ranges(self, lr, momentum):
        with pytest.raises(ParameterError):
            OptimState.fresh(scalar_params(), lr=lr, momentum=momentum)


def test_iterations_per_epoch():
    assert iterations_per_epoch(10, 4) == 3
    assert iterations_per_epoch(10, 32) == 1


def small_config(**overrides):
    settings = dict(batch_size=4, epochs=2, seed=3, augment=False, dtype='double', lr=0.001,
                    ssim=None, weights=LossWeights(l3=1e-4))
    settings.update(overrides)
    return TrainConfig(**settings)


class TestTrain:

    def test_history_rows(self, tiny_model, phantoms):
        net, params = tiny_model
        result = train(net, params, phantoms, small_config())
        assert [row.iter for row in result.history] == [1, 2, 3, 4, 5, 6]
        assert [row.epoch for row in result.history] == [0, 0, 0, 1, 1, 1]
        assert len(result.epoch_means) == 2
        assert result.state.iteration == 6

    def test_one_iteration_when_batch_covers_dataset(self, tiny_model, phantoms):
        net, params = tiny_model
        result = train(net, params, phantoms, small_config(batch_size=32, epochs=1))
        assert len(result.history) == 1

    def test_same_seed_same_run(self, tiny_model, phantoms):
        net, params = tiny_model
        cfg = small_config(augment=True)
        a = train(net, params, phantoms, cfg)
        b = train(net, params, phantoms, cfg)
        assert a.history == b.history
        for name, value in a.params.all_items():
            np.testing.assert_array_equal(value, b.params[name])

    def test_params_argument_untouched(self, tiny_model, phantoms):
        net, params = tiny_model
        before = params.copy()
        train(net, params, phantoms, small_config(epochs=1))
        for name, value in before.all_items():
            np.testing.assert_array_equal(params[name], value)

    def test_identity_mapping_improves(self, tiny_model, phantoms):
        net, params = tiny_model
        cfg = small_config(loss='l2', epochs=6, input_modalities=('t1',), output_modalities=('t1',))
        result = train(net, params, phantoms, cfg)
        assert result.epoch_means[-1]['l2'] < result.epoch_means[0]['l2']

    def test_resumed_run_matches_uninterrupted(self, tiny_model, phantoms):
        net, params = tiny_model
        full = train(net, params, phantoms, small_config(epochs=2, augment=True))
        first = train(net, params, phantoms, small_config(epochs=1, augment=True))
        second = train(net, first.params, phantoms, small_config(epochs=2, augment=True),
                       state=first.state, start_epoch=1)
        assert first.history + second.history == full.history
        for name, value in full.params.all_items():
            np.testing.assert_array_equal(second.params[name], value)

    def test_nan_target_diverges(self, tiny_model, phantoms):
        net, params = tiny_model
        samples = []
        for s in phantoms:
            modalities = collections.OrderedDict(s.modalities)
            modalities['t2'] = np.full(s['t2'].shape, np.nan)
            samples.append(data.PhantomSample(s.sample_id, modalities))
        with pytest.raises(DivergenceError) as info:
            train(net, params, data.Dataset.from_samples(samples), small_config(loss='l2'))
        assert info.value.iteration == 1

    def test_modality_arity(self, tiny_model, phantoms):
        net, params = tiny_model
        with pytest.raises(UsageError):
            train(net, params, phantoms, small_config(input_modalities=('t1', 't1c')))

    def test_empty_dataset(self, tiny_model):
        net, params = tiny_model
        with pytest.raises(ParameterError):
            train(net, params, data.Dataset(None, []), small_config())


def test_l2_selection_zeroes_image_priors():
    cfg = TrainConfig(loss='l2')
    assert cfg.weights.l2 == 0.0 and cfg.weights.l3 == 0.0
    assert cfg.weights.l1 == 10.0


class TestFromConfig:

    def test_weights_follow_loss_selection(self):
        cfg = RunConfig(loss='weighted_l2', lambda1=3.0, lambda4=2e-4)
        assert LossWeights.from_config(cfg) == LossWeights(3.0, 0.0, 0.0, 2e-4)
        assert TrainConfig.from_config(cfg).weights == LossWeights.from_config(cfg)

    def test_joint_keeps_every_weight(self):
        cfg = RunConfig(lambda2=4.0, lambda3=0.25)
        assert TrainConfig.from_config(cfg).weights == LossWeights(10.0, 4.0, 0.25, 1e-4)

    def test_fresh_optimizer_state(self):
        cfg = RunConfig(lr=0.05, momentum=0.5)
        params = ParamSet()
        params.add('w', np.ones((2, 3)))
        state = OptimState.from_config(cfg, params)
        assert (state.iteration, state.lr, state.momentum) == (0, 0.05, 0.5)
        np.testing.assert_array_equal(state.velocity['w'], np.zeros((2, 3)))
