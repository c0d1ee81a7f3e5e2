"""Feature dumps, INI experiment configs and atomic CSV writing."""

from __future__ import annotations

import configparser
import csv
import io as _io
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .stats import LabeledFeatures

FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    pass


class DumpFormatError(ValueError):
    pass


# --- atomic output ------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return FLOAT_FMT % x
    return str(x)


def csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def matrix_csv(path, M: np.ndarray, row_name: str = "session", col_prefix: str = "task") -> None:
    """Square matrix with NaN (undefined) entries written as empty cells."""
    header = [row_name] + [f"{col_prefix}{j}" for j in range(M.shape[1])]
    rows = [[i] + ["" if np.isnan(v) else float(v) for v in M[i]] for i in range(M.shape[0])]
    write_csv(path, header, rows)


# --- feature dumps ------------------------------------------------------------


def dump_text(data: LabeledFeatures) -> str:
    header = ["task", "class", "split"] + [f"f{k}" for k in range(data.d)]
    lines = [",".join(header)]
    for t, c, s, row in zip(data.task_ids, data.class_ids, data.split, data.features):
        lines.append(",".join([str(int(t)), str(int(c)), str(s)] + [FLOAT_FMT % v for v in row]))
    return "\n".join(lines) + "\n"


def save_dump(data: LabeledFeatures, path) -> None:
    """CSV ``task,class,split,f0..f{d-1}`` with 17 significant digits (exact round trip)."""
    atomic_write_text(path, dump_text(data))


def load_dump(path) -> LabeledFeatures:
    with open(path, newline="") as fh:
        return parse_dump(fh.read(), str(path))


def parse_dump(text: str, name: str = "<dump>") -> LabeledFeatures:
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows:
        raise DumpFormatError(f"{name}: empty file")
    header = rows[0]
    d = len(header) - 3
    expected = ["task", "class", "split"] + [f"f{k}" for k in range(d)]
    if d < 1 or header != expected:
        raise DumpFormatError(f"{name}: line 1: header must be task,class,split,f0,...,f{{d-1}}")
    tasks, classes, splits, feats = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 3:
            raise DumpFormatError(f"{name}: line {lineno}: expected {d + 3} fields, got {len(row)}")
        try:
            t, c = int(row[0]), int(row[1])
            f = [float(v) for v in row[3:]]
        except ValueError:
            raise DumpFormatError(f"{name}: line {lineno}: non-numeric task, class or feature value") from None
        if t < 0 or c < 0 or not np.all(np.isfinite(f)):
            raise DumpFormatError(f"{name}: line {lineno}: ids must be non-negative and features finite")
        tasks.append(t)
        classes.append(c)
        splits.append(row[2])
        feats.append(f)
    if not feats:
        raise DumpFormatError(f"{name}: no data rows")
    return LabeledFeatures(np.array(feats), np.array(classes), np.array(tasks), np.array(splits, dtype=object))


# --- INI configs --------------------------------------------------------------


def _line_index(text: str) -> dict:
    """``(section, key) -> line number`` for error messages."""
    index, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = n
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, 1)[0].strip().lower()
            index[(section, key)] = n
    return index


class _Reader:
    def __init__(self, text: str, name: str):
        self.name = name
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            self.cp.read_string(text, source=name)
        except configparser.Error as exc:
            raise ConfigError(f"{name}: {exc}") from None
        self.lines = _line_index(text)
        self.used = set()

    def _where(self, section, key=None) -> str:
        n = self.lines.get((section, key)) or self.lines.get((section, None))
        return f"{self.name}:{n}" if n else self.name

    def fail(self, section, key, msg):
        raise ConfigError(f"{self._where(section, key)}: [{section}] {key}: {msg}")

    def get(self, section, key, conv, default=None, check=None, hint=""):
        self.used.add((section, key))
        if not self.cp.has_option(section, key):
            if default is None:
                raise ConfigError(f"{self._where(section)}: [{section}] missing required key {key!r}")
            return default
        raw = self.cp.get(section, key)
        try:
            value = conv(raw)
        except ValueError:
            self.fail(section, key, f"cannot parse {raw!r}{'; ' + hint if hint else ''}")
        if check is not None and not check(value):
            self.fail(section, key, f"value {raw!r} out of range{'; ' + hint if hint else ''}")
        return value

    def unknown_keys(self, allowed: dict):
        for section in self.cp.sections():
            if section not in allowed:
                raise ConfigError(f"{self._where(section)}: unknown section [{section}]; expected one of {sorted(allowed)}")
            for key in self.cp.options(section):
                if key not in allowed[section]:
                    self.fail(section, key, f"unknown key; expected one of {sorted(allowed[section])}")


def _floats(raw: str) -> tuple:
    vals = tuple(float(v) for v in raw.split(",") if v.strip())
    if not vals:
        raise ValueError
    return vals


def _ints(raw: str) -> tuple:
    vals = tuple(int(v) for v in raw.split(",") if v.strip())
    if not vals:
        raise ValueError
    return vals


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError


def _choice(*options):
    def conv(raw):
        v = raw.strip()
        if v not in options:
            raise ValueError
        return v

    return conv


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "CIL"
    out: str = "results"
    n_tasks: int = 4
    K_per_task: int = 5
    d_input: int = 32
    separation: float = 1.0
    samples_per_class: int = 200
    test_per_class: int = 200
    hidden_widths: tuple = (64, 64)
    feature_dim: int = 32
    activation: str = "relu"
    feature_activation: bool = False
    init_scheme: str = "standard"
    center_heads: bool = False
    lr: float = 0.05
    batch: int = 64
    steps: int = 3000
    log_every: int = 500
    rho: tuple = (0.0,)
    wd: tuple = (5e-4,)
    seeds: tuple = (0,)
    probe_C: float = 100.0
    probe_max_iter: int = 300
    nc5_centering: str = "task"
    dump_features: bool = True
    source_text: str = field(default="", compare=False, repr=False)


RUN_KEYS = {
    "experiment": {"scenario", "out"},
    "stream": {"n_tasks", "k_per_task", "d_input", "separation", "samples_per_class", "test_per_class"},
    "model": {"hidden_widths", "feature_dim", "activation", "feature_activation", "init_scheme", "center_heads"},
    "train": {"lr", "batch", "steps", "log_every"},
    "sweep": {"rho", "wd", "seeds"},
    "probe": {"c", "max_iter"},
    "output": {"nc5_centering", "dump_features"},
}

pos = lambda v: v > 0  # noqa: E731
nonneg = lambda v: v >= 0  # noqa: E731


def parse_experiment(text: str, name: str = "<config>") -> ExperimentConfig:
    """Validate every field before any compute; errors carry ``file:line``."""
    r = _Reader(text, name)
    r.unknown_keys(RUN_KEYS)
    d = ExperimentConfig()
    spc = r.get("stream", "samples_per_class", int, d.samples_per_class, pos, "positive integer")
    cfg = ExperimentConfig(
        scenario=r.get("experiment", "scenario", _choice("CIL", "DIL", "TIL"), d.scenario, hint="one of CIL, DIL, TIL"),
        out=r.get("experiment", "out", str, d.out),
        n_tasks=r.get("stream", "n_tasks", int, d.n_tasks, pos, "positive integer"),
        K_per_task=r.get("stream", "k_per_task", int, d.K_per_task, lambda v: v >= 2, "integer >= 2"),
        d_input=r.get("stream", "d_input", int, d.d_input, pos, "positive integer"),
        separation=r.get("stream", "separation", float, d.separation, pos, "positive number"),
        samples_per_class=spc,
        test_per_class=r.get("stream", "test_per_class", int, spc, pos, "positive integer"),
        hidden_widths=r.get("model", "hidden_widths", _ints, d.hidden_widths, lambda v: all(w > 0 for w in v), "comma-separated positive integers"),
        feature_dim=r.get("model", "feature_dim", int, d.feature_dim, pos, "positive integer"),
        activation=r.get("model", "activation", _choice("relu", "tanh"), d.activation, hint="relu or tanh"),
        feature_activation=r.get("model", "feature_activation", _bool, d.feature_activation, hint="true or false"),
        init_scheme=r.get("model", "init_scheme", _choice("standard", "norm-matching"), d.init_scheme, hint="standard or norm-matching"),
        center_heads=r.get("model", "center_heads", _bool, d.center_heads, hint="true or false"),
        lr=r.get("train", "lr", float, d.lr, pos, "positive number"),
        batch=r.get("train", "batch", int, d.batch, pos, "positive integer"),
        steps=r.get("train", "steps", int, d.steps, pos, "positive integer"),
        log_every=r.get("train", "log_every", int, d.log_every, pos, "positive integer"),
        rho=r.get("sweep", "rho", _floats, d.rho, lambda v: all(0 <= x <= 1 for x in v), "comma-separated values in [0, 1]"),
        wd=r.get("sweep", "wd", _floats, d.wd, lambda v: all(x >= 0 for x in v), "comma-separated non-negative values"),
        seeds=r.get("sweep", "seeds", _ints, d.seeds, lambda v: all(x >= 0 for x in v), "comma-separated non-negative integers"),
        probe_C=r.get("probe", "c", float, d.probe_C, pos, "positive number"),
        probe_max_iter=r.get("probe", "max_iter", int, d.probe_max_iter, pos, "positive integer"),
        nc5_centering=r.get("output", "nc5_centering", _choice("task", "train"), d.nc5_centering, hint="task or train"),
        dump_features=r.get("output", "dump_features", _bool, d.dump_features, hint="true or false"),
        source_text=text,
    )
    for lr_wd in cfg.wd:
        if cfg.lr * lr_wd >= 1:
            r.fail("sweep", "wd", f"lr*wd = {cfg.lr * lr_wd:g} must be < 1")
    return cfg


@dataclass(frozen=True)
class SimulateConfig:
    K: int = 5
    d: int = 32
    eta: float = 0.1
    lam: tuple = (0.0, 0.01)
    pi: tuple = (0.0, 0.1, 0.3, 0.5)
    t_max: int = 2000
    t_step: int = 200
    n: int = 20_000
    beta0: float = 1.0
    beta_rate: float = 1e-3
    delta0: float = 1.0
    delta_rate: float = 0.99
    sigma_b: float = 0.125
    v_perp: float = 1.0
    seed: int = 0


SIM_KEYS = {"simulate": {"k", "d", "eta", "lambda", "pi", "t_max", "t_step", "n", "beta0", "beta_rate", "delta0", "delta_rate", "sigma_b", "v_perp", "seed"}}


def parse_simulate(text: str, name: str = "<config>") -> SimulateConfig:
    r = _Reader(text, name)
    r.unknown_keys(SIM_KEYS)
    d = SimulateConfig()
    s = "simulate"
    K = r.get(s, "k", int, d.K, lambda v: v >= 2, "integer >= 2")
    cfg = SimulateConfig(
        K=K,
        d=r.get(s, "d", int, d.d, lambda v: v >= K, f"integer >= K={K} (room for an off-span direction)"),
        eta=r.get(s, "eta", float, d.eta, pos, "positive number"),
        lam=r.get(s, "lambda", _floats, d.lam, lambda v: all(x >= 0 for x in v), "comma-separated non-negative values"),
        pi=r.get(s, "pi", _floats, d.pi, lambda v: all(0 <= x <= 1 for x in v), "comma-separated values in [0, 1]"),
        t_max=r.get(s, "t_max", int, d.t_max, nonneg, "non-negative integer"),
        t_step=r.get(s, "t_step", int, d.t_step, pos, "positive integer"),
        n=r.get(s, "n", int, d.n, lambda v: v >= 2, "integer >= 2"),
        beta0=r.get(s, "beta0", float, d.beta0, pos, "positive number"),
        beta_rate=r.get(s, "beta_rate", float, d.beta_rate, nonneg, "non-negative number"),
        delta0=r.get(s, "delta0", float, d.delta0, nonneg, "non-negative number"),
        delta_rate=r.get(s, "delta_rate", float, d.delta_rate, lambda v: 0 <= v <= 1, "number in [0, 1]"),
        sigma_b=r.get(s, "sigma_b", float, d.sigma_b, nonneg, "non-negative number"),
        v_perp=r.get(s, "v_perp", float, d.v_perp, nonneg, "non-negative number"),
        seed=r.get(s, "seed", int, d.seed, nonneg, "non-negative integer"),
    )
    for lam in cfg.lam:
        if cfg.eta * lam >= 1:
            r.fail(s, "lambda", f"eta*lambda = {cfg.eta * lam:g} must be < 1")
    return cfg
