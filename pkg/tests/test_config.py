import pytest
from hypothesis import given
from hypothesis import strategies as st

from penbsde.config import ExperimentConfig, apply_overrides, load_config, parse_config
from penbsde.errors import ConfigError
from penbsde.forward import TimeGrid
from penbsde.runner import penalty_schedule, value_index

GOOD = """
# jump benchmark
model.name = nondominated-jump
model.radius = 0.4
grid.steps = 50
bsde.n_paths = 4000
bsde.penalties = 1, 2, 4
run.seed = 7
"""


def test_parse_good_config():
    cfg = parse_config(GOOD)
    assert cfg.model == "nondominated-jump"
    assert cfg.model_params == {"radius": 0.4}
    assert cfg.penalties == (1.0, 2.0, 4.0)
    assert cfg.lines["run.seed"] == 8
    res = cfg.resolved()
    assert res.x == (0.0,) and res.start_spread == 0.5 and res.fd_nodes == 4801


@pytest.mark.parametrize("text,line,fragment", [
    ("model.name = uvm\nfoo.bar = 1\n", 2, "unknown key"),
    ("grid.steps = 10\ngrid.steps = 20\n", 2, "duplicate key"),
    ("model.name = uvm\nthis is not a pair\n", 2, "expected 'key = value'"),
    ("grid.steps = ten\n", 1, "grid.steps"),
    ("grid.steps = 5\nbsde.penalties = 1, 10\n", 2, "penalty violates step bound"),
    ("bsde.penalties = 2, 1\n", 1, "strictly increasing"),
    ("model.name = heston\n", 1, "unknown model"),
    ("basis.cells = 20, 20\nbsde.n_paths = 1000\n", 2, "10 x basis size"),
    ("validation.tests = poisson, bogus\n", 1, "unknown validation test"),
])
def test_config_errors_name_the_line(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, source="exp.cfg")
    assert exc.value.line == line
    assert fragment in str(exc.value)
    assert f"exp.cfg:{line}:" in str(exc.value)


def test_load_config_and_round_trip(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text(GOOD)
    cfg = load_config(p)
    again = parse_config(cfg.to_text())
    assert again == cfg
    resolved = cfg.resolved()
    assert parse_config(resolved.to_text()) == resolved


@given(st.integers(0, 2**31), st.integers(1, 10**6), st.integers(1, 400))
def test_overrides(seed, paths, steps):
    cfg = apply_overrides(ExperimentConfig(n_paths=10**6), seed=seed, paths=paths, steps=steps)
    assert (cfg.seed, cfg.n_paths, cfg.steps) == (seed, paths, steps)


def test_out_dir_precedence(monkeypatch):
    monkeypatch.setenv("PENBSDE_OUT_DIR", "/tmp/from-env")
    cfg = ExperimentConfig(out_dir="cfg-dir")
    assert apply_overrides(cfg).out_dir == "/tmp/from-env"
    assert apply_overrides(cfg, out="cli-dir").out_dir == "cli-dir"
    monkeypatch.delenv("PENBSDE_OUT_DIR")
    assert apply_overrides(cfg).out_dir == "cfg-dir"


def test_override_step_bound_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(penalties=(1.0, 8.0)), steps=5)


def test_auto_penalty_schedule():
    assert penalty_schedule(ExperimentConfig(), TimeGrid(0, 1, 50)) == pytest.approx(
        [1, 2, 50 ** 0.5 / 2, 4, 8])
    pens = penalty_schedule(ExperimentConfig(), TimeGrid(0, 1, 100))
    assert pens == pytest.approx([1, 2, 4, 5, 8, 16])
    assert value_index(pens, 5.0) == 3
    assert penalty_schedule(ExperimentConfig(penalties=(3.0,)), TimeGrid(0, 1, 100)) == [3.0]
