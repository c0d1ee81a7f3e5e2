import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from collapselab.fileio import (
    ConfigError,
    DumpFormatError,
    csv_text,
    dump_text,
    load_dump,
    matrix_csv,
    parse_dump,
    parse_experiment,
    parse_simulate,
    save_dump,
)
from collapselab.stats import LabeledFeatures

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(x=arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 5)), elements=finite), seed=st.integers(0, 99))
def test_dump_round_trip_is_bit_exact(x, seed):
    rng = np.random.default_rng(seed)
    n = len(x)
    data = LabeledFeatures(x, rng.integers(0, 5, n), rng.integers(0, 3, n), rng.choice(["train", "test", "buffer"], n))
    back = parse_dump(dump_text(data))
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.class_ids, data.class_ids)
    np.testing.assert_array_equal(back.task_ids, data.task_ids)
    assert list(back.split) == list(data.split)
    assert dump_text(back) == dump_text(data)


def test_dump_file_round_trip(tmp_path):
    data = LabeledFeatures(np.array([[0.1, 1e-300], [np.pi, -2.5]]), [0, 1], [0, 0])
    save_dump(data, tmp_path / "d.csv")
    np.testing.assert_array_equal(load_dump(tmp_path / "d.csv").features, data.features)


@pytest.mark.parametrize(
    "text,line",
    [
        ("task,class,split,f0\n0,0,train,1.0\n0,1,train\n", 3),
        ("task,class,split,f0\n0,0,train,1.0\n0,x,train,2.0\n", 3),
        ("task,class,split,f0\n0,0,train,nan\n", 2),
        ("task,class,split,f0\n-1,0,train,1.0\n", 2),
        ("task,class,f0\n0,0,1.0\n", 1),
    ],
)
def test_malformed_dump_names_the_line(text, line):
    with pytest.raises(DumpFormatError, match=f"line {line}"):
        parse_dump(text, "x.csv")


def test_empty_dumps():
    with pytest.raises(DumpFormatError):
        parse_dump("")
    with pytest.raises(DumpFormatError):
        parse_dump("task,class,split,f0\n")


def test_csv_helpers(tmp_path):
    assert csv_text(["a", "b"], [[1, 0.1]]) == "a,b\n1,0.10000000000000001\n"
    matrix_csv(tmp_path / "m.csv", np.array([[0.5, np.nan], [0.25, 1.0]]))
    assert (tmp_path / "m.csv").read_text() == "session,task0,task1\n0,0.5,\n1,0.25,1\n"


def test_experiment_defaults_and_lists():
    cfg = parse_experiment("[sweep]\nrho = 0, 0.05, 1\nseeds = 1,2\n[model]\nhidden_widths = 16, 8\n")
    assert cfg.rho == (0.0, 0.05, 1.0) and cfg.seeds == (1, 2) and cfg.hidden_widths == (16, 8)
    assert cfg.scenario == "CIL" and cfg.test_per_class == cfg.samples_per_class


@pytest.mark.parametrize(
    "text,fragment",
    [
        ("[train]\nlr = 0.1\n\nsteps = -5\n", "cfg.ini:4"),
        ("[experiment]\nscenario = XIL\n", "one of CIL, DIL, TIL"),
        ("[sweep]\nrho = 0, 2\n", "cfg.ini:2"),
        ("[sweep]\nrho =\n", "cannot parse"),
        ("[train]\nlr = 0.5\n[sweep]\nwd = 3\n", "lr*wd"),
        ("[stream]\nk_per_task = 1\n", "integer >= 2"),
        ("[model]\nactivation = gelu\n", "relu or tanh"),
        ("[nope]\na = 1\n", "unknown section"),
        ("[train]\nlearning_rate = 1\n", "unknown key"),
        ("no section header\n", "cfg.ini"),
    ],
)
def test_experiment_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("*", r"\*")):
        parse_experiment(text, "cfg.ini")


def test_simulate_config():
    cfg = parse_simulate("[simulate]\nlambda = 0, 0.01\npi = 0, 1\nk = 3\nd = 6\n")
    assert cfg.lam == (0.0, 0.01) and cfg.pi == (0.0, 1.0) and cfg.K == 3
    with pytest.raises(ConfigError, match="eta\\*lambda"):
        parse_simulate("[simulate]\neta = 1\nlambda = 1\n")
    with pytest.raises(ConfigError):
        parse_simulate("[simulate]\nk = 5\nd = 3\n")
