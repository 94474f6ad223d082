import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from penbsde.errors import MajorantViolated
from penbsde.forward import (
    TimeGrid,
    anchor_path,
    chunk_slices,
    simulate_brownians,
    simulate_cox_thinning,
    simulate_ensemble,
    simulate_I,
)
from penbsde.model import (
    ControlSet,
    constant_intensity_model,
    controlled_intensity_model,
    nondominated_jump_model,
    trivial_drift_model,
    uvm_model,
)


def test_grid_basics():
    g = TimeGrid(0.0, 1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


@given(st.integers(1, 20000), st.integers(1, 5000))
def test_chunks_partition_paths(n, size):
    sl = chunk_slices(n, size)
    assert sl[0].start == 0 and sl[-1].stop == n
    assert all(a.stop == b.start for a, b in zip(sl, sl[1:]))


def test_brownian_moments():
    g = TimeGrid(0, 1, 10)
    dW = simulate_brownians(g, 20000, 2, master_seed=3)
    assert dW.shape == (10, 20000, 2)
    assert abs(dW.mean()) < 4 * np.sqrt(g.dt / dW.size)
    assert abs(dW.var() / g.dt - 1) < 0.01


def test_brownians_independent_of_chunking_for_same_chunks():
    g = TimeGrid(0, 1, 5)
    a = simulate_brownians(g, 5000, 1, 9)
    b = simulate_brownians(g, 5000, 1, 9)
    np.testing.assert_array_equal(a, b)
    c = simulate_brownians(g, 5000, 1, 10)
    assert not np.array_equal(a, c)


def test_anchor_path_starts_at_anchor_and_clamps():
    dB = np.full((3, 2, 1), 10.0)
    w = anchor_path([1.0], dB)
    np.testing.assert_allclose(w[:, 0, 0], [1, 11, 21, 31])
    I = simulate_I(0.0, [1.0], dB, ControlSet([1.0], 0.5))
    assert I[0, 0, 0] == 1.0 and np.all(I[1:] == 1.5)


@pytest.mark.parametrize("workers", [1, 3])
def test_ensemble_independent_of_workers(workers):
    m = controlled_intensity_model()
    g = TimeGrid(0, 1, 8)
    ref = simulate_ensemble(m, g, 9000, [0.0], [0.0], 5, workers=1, chunk_size=2048)
    ens = simulate_ensemble(m, g, 9000, [0.0], [0.0], 5, workers=workers, chunk_size=2048)
    np.testing.assert_array_equal(ref.X, ens.X)
    np.testing.assert_array_equal(ref.jumps.marks, ens.jumps.marks)


def test_thinning_rate_matches_intensity():
    m = controlled_intensity_model()
    g = TimeGrid(0, 1, 20)
    ens = simulate_ensemble(m, g, 40000, [0.0], [0.6], 11)
    rate = m.intensity.total_rate(ens.I[:-1].reshape(-1, 1)).reshape(20, -1)
    expected = rate.sum(axis=0) * g.dt
    diff = ens.jump_counts() - expected
    assert abs(diff.mean()) < 4 * diff.std() / np.sqrt(diff.size)


def test_thinning_majorant_violation_reports_path():
    m = controlled_intensity_model(rate_bound=1.05)
    g = TimeGrid(0, 1, 10)
    with pytest.raises(MajorantViolated) as exc:
        simulate_ensemble(m, g, 2000, [0.0], [0.9], 1)
    assert "path" in str(exc.value)


def test_null_kernel_has_no_jumps():
    m = uvm_model()
    g = TimeGrid(0, 1, 4)
    ev = simulate_cox_thinning(np.zeros((5, 10, 1)), m.intensity, g, 0)
    assert ev.count == 0


def test_trivial_drift_is_deterministic():
    m = trivial_drift_model(drift=2.0)
    ens = simulate_ensemble(m, TimeGrid(0, 1, 10), 100, [1.0], [0.0], 0)
    np.testing.assert_allclose(ens.X[-1, :, 0], 3.0, atol=1e-14)


def test_compensated_jumps_are_martingale():
    m = nondominated_jump_model()
    ens = simulate_ensemble(m, TimeGrid(0, 1, 25), 40000, [0.0], [1.2], 2)
    xt = ens.X[-1, :, 0]
    assert abs(xt.mean()) < 4 * xt.std() / np.sqrt(xt.size)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_seed_determinism(seed):
    m = constant_intensity_model()
    g = TimeGrid(0, 1, 5)
    a = simulate_ensemble(m, g, 300, [0.0], [0.0], seed)
    b = simulate_ensemble(m, g, 300, [0.0], [0.0], seed)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.jumps.time, b.jumps.time)


def test_jump_times_in_steps():
    m = constant_intensity_model(rate=5.0)
    g = TimeGrid(0, 1, 10)
    ens = simulate_ensemble(m, g, 1000, [0.0], [0.0], 4)
    t = ens.jumps.time
    assert np.all((t > g.times[ens.jumps.step] - 1e-15) & (t <= g.times[ens.jumps.step + 1] + 1e-15))


def test_grid_beyond_horizon_rejected():
    with pytest.raises(ValueError):
        simulate_ensemble(uvm_model(), TimeGrid(0, 2, 4), 10, [100.0], [0.2], 0)


def test_dump_csv(tmp_path):
    m = constant_intensity_model()
    ens = simulate_ensemble(m, TimeGrid(0, 1, 4), 3, [0.0], [0.0], 0)
    p = tmp_path / "paths.csv"
    ens.dump_csv(p)
    rows = p.read_text().strip().splitlines()
    assert rows[0].startswith("path,step,time,x0,i0")
    assert len(rows) == 1 + 3 * 5
