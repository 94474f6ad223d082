import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import one_sided_weights

from penbsde.errors import NotInOpenBall
from penbsde.model import (
    Atom,
    ControlSet,
    IntensityKernel,
    constant_intensity_model,
    controlled_intensity_model,
    interior_anchors,
    make_model,
    nondominated_jump_model,
    radial_profile,
    surjection_h,
    surjection_preimage,
    uvm_model,
    validate_model,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_profile_endpoints_exact():
    assert radial_profile(0.0) == 0.0
    assert radial_profile(1.0) == 1.0
    assert radial_profile(3.0) == 1.0


@pytest.mark.parametrize("order", [1, 2])
def test_profile_flat_at_sphere(order):
    h = 1e-2
    s = radial_profile(1.0 - h * np.arange(6))
    deriv = one_sided_weights(order, 6) @ s / h**order
    assert abs(deriv) < 1e-6
    # the profile is not flat just inside the sphere
    inner = radial_profile(0.5 - h * np.arange(6))
    assert abs(one_sided_weights(1, 6) @ inner / h) > 1.0


def test_profile_strictly_increasing_inside():
    r = np.linspace(0, 1, 10001)
    assert np.all(np.diff(radial_profile(r)) > 0)


@given(st.lists(finite, min_size=2, max_size=2), st.floats(0.1, 5.0))
def test_h_lands_in_ball(a, radius):
    cs = ControlSet([0.3, -0.2], radius)
    out = surjection_h(np.array(a), cs)
    assert np.linalg.norm(out - cs.center) <= radius + 1e-12


def test_h_center_fixed_and_outside_on_sphere():
    cs = ControlSet([1.0], 0.5)
    assert surjection_h([1.0], cs)[0] == 1.0
    assert surjection_h([5.0], cs)[0] == 1.5
    assert surjection_h([-5.0], cs)[0] == 0.5


@settings(max_examples=50)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_preimage_round_trip(q, seed):
    rng = np.random.default_rng(seed)
    cs = ControlSet(rng.normal(size=q), 0.7)
    v = rng.normal(size=(20, q))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    y = cs.center + 0.7 * 0.999 * rng.random((20, 1)) * v
    back = surjection_h(surjection_preimage(y, cs), cs)
    assert np.max(np.abs(back - y)) <= 1e-10


def test_preimage_rejects_sphere():
    cs = ControlSet([0.0], 1.0)
    with pytest.raises(NotInOpenBall):
        surjection_preimage([1.0], cs)
    with pytest.raises(ValueError):
        surjection_preimage([2.0], cs)


def test_control_set_rejects_bad_radius():
    with pytest.raises(ValueError):
        ControlSet([0.0], 0.0)
    with pytest.raises(ValueError):
        ControlSet([0.0], np.inf)


def test_interior_anchors_inside_half_radius():
    cs = ControlSet([1.0, 2.0], 2.0)
    pts = interior_anchors(cs, 5)
    assert pts.shape == (5, 2)
    assert np.all(np.linalg.norm(pts - cs.center, axis=1) <= 1.0 + 1e-12)
    one_d = interior_anchors(ControlSet([1.0], 0.5), 5)
    np.testing.assert_allclose(one_d[:, 0], [0.75, 0.875, 1.0, 1.125, 1.25])


def test_kernel_needs_finite_bound():
    with pytest.raises(ValueError):
        IntensityKernel(lambda a: np.ones(len(a)), lambda a, u: u, rate_bound=np.inf)


def test_atomic_sampler_frequencies():
    m = controlled_intensity_model()
    a = np.full((200000, 1), 0.4)
    u = np.random.default_rng(1).random((200000, 1))
    marks = m.intensity.mark_sampler(a, u)[:, 0]
    p_up = np.mean(marks == 0.5)
    assert abs(p_up - 0.6) < 4 * np.sqrt(0.24 / 200000)
    np.testing.assert_allclose(m.intensity.total_rate(a), 1.2)


def test_compensator_exact_for_atoms():
    m = controlled_intensity_model()
    a = np.array([[0.4], [-1.0]])
    comp = m.compensator(np.zeros((2, 1)), a)[:, 0]
    # rate * (0.5 p + (-0.25)(1 - p)) with p = 0.5 + 0.25 a
    rate = 1 + 0.5 * np.abs(a[:, 0])
    p = 0.5 + 0.25 * a[:, 0]
    np.testing.assert_allclose(comp, rate * (0.5 * p - 0.25 * (1 - p)))


def test_nondominated_marks_follow_control():
    m = nondominated_jump_model()
    a = np.array([[0.6], [1.4]])
    (marks, w), = m.intensity.atom_table(a)
    np.testing.assert_array_equal(marks, a)
    np.testing.assert_array_equal(w, [1.0, 1.0])


def test_validate_model_flags_bad_rate_bound():
    assert validate_model(uvm_model()).all_clear
    assert validate_model(constant_intensity_model()).all_clear
    rep = validate_model(controlled_intensity_model(rate_bound=1.1))
    assert rep.flags["rate"] and not rep.all_clear


def test_make_model_by_name():
    assert make_model("uvm", sigma_hi=0.4).params["sigma_hi"] == 0.4
    with pytest.raises(ValueError):
        make_model("nope")


def test_atom_constant_mark_broadcasts():
    at = Atom(mark=[2.0], weight=lambda a: np.ones(len(a)))
    assert at.mark(np.zeros((3, 1))).shape == (3, 1)
