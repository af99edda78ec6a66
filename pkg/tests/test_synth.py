import numpy as np
import pytest

from gradreg import DisplacementField, warp_image
from gradreg.metrics import ndv
from gradreg.synth import endpoint_error, invert_field, make_case, smooth_field


def test_deterministic():
    a, b = make_case(16, 4, 2.0), make_case(16, 4, 2.0)
    for name in ("fixed", "moving", "field", "fixed_labels", "moving_labels"):
        assert getattr(a, name).data.tobytes() == getattr(b, name).data.tobytes()
    assert np.array_equal(a.moving_lms.points, b.moving_lms.points)


def test_zero_displacement():
    case = make_case(16, 0, 0.0)
    assert np.array_equal(case.fixed.data, case.moving.data)
    assert not case.field.data.any()


def test_field_scale():
    case = make_case(24, 1, 2.5)
    assert np.max(np.linalg.norm(case.field.data, axis=-1)) == pytest.approx(2.5, rel=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_smooth_fields_fold_free(seed):
    assert make_case(32, seed, 2.0).field_ndv == 0.0


def test_inverse_consistency():
    u = smooth_field(np.random.default_rng(0), 24, 1.5)
    v = invert_field(u)
    # u(x + v(x)) == -v(x) away from the clamped border
    p = np.indices(u.shape[:3], dtype=float) + np.moveaxis(v, -1, 0)
    from gradreg.volume import _trilinear

    back = np.stack([_trilinear(u[..., c], *p, False)[0] for c in range(3)], axis=-1)
    inner = (slice(3, -3),) * 3
    assert np.abs(back + v)[inner].max() < 1e-6


def test_moving_matches_fixed_under_truth():
    case = make_case(32, 0, 3.0)
    warped = warp_image(case.moving, case.field).data
    inner = (slice(4, -4),) * 3
    resid = np.abs(warped - case.fixed.data)[inner].mean()
    before = np.abs(case.moving.data - case.fixed.data)[inner].mean()
    assert resid < 0.5 * before


def test_labels_and_landmarks():
    case = make_case(32, 0, 3.0)
    assert 1 <= len(case.fixed_labels.labels) <= 12
    assert case.fixed_lms.count == case.moving_lms.count > 0
    assert case.fixed_lms.points.min() >= 1.0


def test_bounds():
    with pytest.raises(ValueError):
        make_case(12, 0, 1.0)
    with pytest.raises(ValueError):
        make_case(16, 0, 4.0)


def test_endpoint_error():
    z = DisplacementField.zeros((3, 3, 3))
    u = np.zeros((3, 3, 3, 3))
    u[..., 1] = 2.0
    assert endpoint_error(z, DisplacementField(u)) == 2.0
    assert ndv(DisplacementField(u)) == 0.0
