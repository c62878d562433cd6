import numpy as np
import pytest

from synnet import layers, loss
from synnet.exceptions import ParameterError
from synnet.verify import (
    GradcheckReport,
    conv_oracle,
    finite_diff,
    gradcheck_suite,
    maxpool_oracle,
    ssim_oracle,
    tiny_topology,
)


@pytest.fixture(scope='module')
def suite():
    return gradcheck_suite(42)


class TestOracles:

    def test_conv_all_ones(self):
        p = layers.ConvParams(np.ones((1, 1, 3, 3)), np.full(1, 0.5))
        out = conv_oracle(np.ones((1, 1, 2, 2)), p)
        np.testing.assert_array_equal(out[0, 0], [[4.5, 4.5], [4.5, 4.5]])

    def test_maxpool_first_maximum_wins(self):
        x = np.array([[2.0, 2.0], [1.0, 2.0]]).reshape(1, 1, 2, 2)
        pooled, offsets = maxpool_oracle(x)
        assert pooled.ravel().tolist() == [2.0]
        assert offsets.ravel().tolist() == [0]

    def test_ssim_of_identical_windows(self, rng):
        x = rng.uniform(0, 1, (1, 1, 12, 12))
        assert ssim_oracle(x, x) == pytest.approx(1.0, abs=1e-12)


class TestFiniteDiff:

    def test_sum_of_squares(self, rng):
        x = rng.uniform(-1, 1, (3, 4))
        np.testing.assert_allclose(finite_diff(lambda v: float(np.sum(v * v)), x), 2 * x, atol=1e-9)

    def test_linear_function_is_exact_up_to_rounding(self):
        w = np.array([1.0, -2.0, 0.5])
        grad = finite_diff(lambda v: float(w @ v), np.zeros(3))
        np.testing.assert_allclose(grad, w, atol=1e-10)

    def test_input_not_modified(self, rng):
        x = rng.uniform(-1, 1, 5)
        before = x.copy()
        finite_diff(lambda v: float(np.sum(v ** 3)), x)
        np.testing.assert_array_equal(x, before)

    def test_non_finite_objective(self):
        with pytest.raises(ParameterError):
            finite_diff(lambda v: float(np.log(v[0])), np.zeros(1))

    def test_step_must_be_positive(self):
        with pytest.raises(ParameterError):
            finite_diff(lambda v: 0.0, np.zeros(1), h=0.0)


class TestReport:

    def test_counts_and_format(self):
        report = GradcheckReport()
        report.add('good', np.ones(3), np.ones(3), 1e-6)
        report.add('bad', np.ones(3), 2 * np.ones(3), 1e-6)
        assert not report.passed
        assert [c.name for c in report.failures()] == ['bad']
        lines = report.format().splitlines()
        assert lines[0].startswith('ok') and lines[1].startswith('FAIL')
        assert lines[-1] == '1/2 checks passed'


class TestSuite:

    def test_every_check_passes(self, suite):
        assert suite.passed, suite.format()

    def test_covers_layers_losses_and_models(self, suite):
        names = [c.name for c in suite.checks]
        assert len(names) >= 12
        assert len(set(names)) == len(names)
        for expected in ('conv3x3.input', 'batchnorm.input', 'relu', 'maxpool', 'unpool',
                         'l2.weighted', 'ssim.local', 'tv', 'weight_decay',
                         'model.siso.d1_8x8', 'model.miso.d1_8x8', 'model.mimo.d1_8x8'):
            assert expected in names

    @pytest.mark.parametrize('kind', ['siso', 'miso', 'mimo'])
    def test_whole_model_checks_use_one_level_of_four_channels(self, kind):
        t = tiny_topology(kind)
        assert (t.kind, t.depth, t.channels) == (kind, 1, (4,))
        assert t.factor == 2

    def test_same_seed_same_errors(self, suite):
        again = gradcheck_suite(42)
        assert [c.rel_error for c in again.checks] == [c.rel_error for c in suite.checks]

    def test_detects_a_wrong_convolution_gradient(self, monkeypatch):
        original = layers.conv2d_backward

        def off_by_one_percent(tape, grad_out):
            grad_in, grads = original(tape, grad_out)
            return grad_in * 1.01, grads

        monkeypatch.setattr(layers, 'conv2d_backward', off_by_one_percent)
        report = gradcheck_suite(42)
        assert not report.passed
        assert 'conv3x3.input' in [c.name for c in report.failures()]

    def test_non_finite_objective_is_a_failing_entry(self, monkeypatch):
        original = loss.tv_loss

        def not_a_number(pred, eps):
            _, grad = original(pred, eps)
            return float('nan'), grad

        monkeypatch.setattr(loss, 'tv_loss', not_a_number)
        report = gradcheck_suite(42)
        failed = {c.name: c for c in report.failures()}
        assert set(failed) == {'tv', 'model.joint'}
        assert 'not finite' in failed['tv'].note
        assert failed['tv'].rel_error == float('inf')
        # later groups still ran
        assert 'model.mimo.d1_8x8' in [c.name for c in report.checks if c.passed]
        assert '(objective is not finite' in report.format()
