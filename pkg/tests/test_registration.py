import numpy as np
import pytest

from gradreg import DisplacementField, RegistrationConfig, Volume3, check_convergence, register
from gradreg.fadam import DivergenceError, FAdamConfig
from gradreg.synth import endpoint_error, make_case
from gradreg.volume import ShapeError

from conftest import smooth_volume

FAST = RegistrationConfig(levels=2, iters_per_level=(30, 20))


class TestConvergence:
    def test_decreasing(self):
        assert not check_convergence([5.0, 4.0, 3.0, 2.0, 1.0], 1e-5, 2)

    def test_constant(self):
        assert check_convergence([1.0] * 11, 1e-5, 10)
        assert not check_convergence([1.0] * 9, 1e-5, 10)

    def test_worked_example(self):
        assert check_convergence([1.0, 0.5, 0.4999999], 1e-5, 2)
        assert not check_convergence([1.0, 0.5, 0.49], 1e-5, 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            check_convergence([], 1e-5, 3)


class TestConfig:
    @pytest.mark.parametrize(
        "bad",
        [dict(levels=0), dict(levels=2), dict(iters_per_level=(1, 0, 1)), dict(converge_tol=0), dict(patience=0)],
    )
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            RegistrationConfig(**bad)

    def test_dict(self):
        d = RegistrationConfig().to_dict()
        assert d["iters_per_level"] == [100, 100, 50] and d["loss"]["lambda"] == 2.0


class TestRegister:
    def test_identity(self, rng):
        vol = smooth_volume(rng, (16, 16, 16))
        res = register(vol, vol)
        assert np.mean(np.linalg.norm(res.field.data, axis=-1)) < 0.05
        assert abs(res.best_loss) < 1e-4

    def test_history_and_best(self, rng):
        case = make_case(16, 3, 1.0)
        res = register(case.fixed, case.moving, FAST)
        assert [len(h) for h in res.history] == res.iterations_run
        assert all(n <= cap for n, cap in zip(res.iterations_run, FAST.iters_per_level))
        finest = [b.total for b in res.history[-1]]
        assert res.best_loss == min(finest) <= finest[0]
        assert res.field.data.dtype == np.float32

    def test_deterministic(self):
        case = make_case(16, 5, 1.0)
        a = register(case.fixed, case.moving, FAST).field.data
        b = register(case.fixed, case.moving, FAST).field.data
        assert a.tobytes() == b.tobytes()

    def test_improves_on_zero_field(self):
        case = make_case(32, 11, 3.0)
        res = register(case.fixed, case.moving)
        zero = endpoint_error(DisplacementField.zeros(case.field.dims), case.field)
        assert endpoint_error(res.field, case.field) <= 0.5 * zero

    def test_warm_start_from_truth(self):
        case = make_case(16, 2, 1.0)
        cfg = RegistrationConfig(levels=1, iters_per_level=(5,), optim=FAdamConfig(lr=1e-3))
        res = register(case.fixed, case.moving, cfg, init_field=case.field)
        assert endpoint_error(res.field, case.field) < 0.05

    def test_shape_checks(self, rng):
        a = smooth_volume(rng, (16, 16, 16))
        with pytest.raises(ShapeError, match="shape mismatch"):
            register(a, smooth_volume(rng, (16, 16, 17)))
        with pytest.raises(ShapeError, match="spacing"):
            register(a, Volume3(a.data, spacing=(2.0, 1.0, 1.0)))
        with pytest.raises(ShapeError, match="too small"):
            register(smooth_volume(rng, (8, 16, 16)), smooth_volume(rng, (8, 16, 16)))
        with pytest.raises(ShapeError):
            register(a, a, init_field=DisplacementField.zeros((8, 8, 8)))

    def test_divergence(self, rng):
        a = smooth_volume(rng, (8, 8, 8))
        cfg = RegistrationConfig(levels=1, iters_per_level=(3,), optim=FAdamConfig(lr=1e300))
        with pytest.raises(DivergenceError):
            register(a, Volume3(np.roll(a.data, 2, axis=0)), cfg)
