"""Multi-seed experiments, learning-curve tables and method comparison."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .envs import ENV_NAMES, make_env, reference_advice
from .errors import ExperimentError, InsufficientSeeds, LtlShapeError, UnknownEnv
from .learning import EpsilonGreedy, LearnerConfig, Softmax, run_training

METHODS = ("baseline", "shaping", "shielding")
DEFAULT_WINDOWS = {
    "gridworld": 100,
    "gridworld-wall": 100,
    "sweep-kitchen": 500,
    "sweep-kitchen-extra": 500,
    "sweep-human": 2500,
    "sweep-human-extra": 1000,
    "cartpole": 1000,
    "cartpole-inaccurate": 1000,
}
RAW_HEADER = "method,seed,step,window_avg_reward"
AGG_HEADER = "method,step,mean,stddev"
NON_SEMANTIC = ("out", "aggregate_out", "plot_out", "jobs")
LEARNER_KEYS = {"alpha", "beta", "tau0", "tau_min", "epsilon", "epsilon_min", "decay", "decay_offset", "gain_mode"}


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    methods: tuple = METHODS
    total_steps: int = 10_000
    window: int | None = None
    seeds: int = 20
    learner: dict = field(default_factory=dict)
    advice: str = "accurate"
    potential_offset: float = 0.0
    out: str | None = None
    aggregate_out: str | None = None
    plot_out: str | None = None
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.env not in ENV_NAMES:
            raise UnknownEnv(f"unknown environment {self.env!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods or len(set(self.methods)) != len(self.methods):
            raise ValueError(f"methods must be distinct names from {METHODS}, got {self.methods}")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        window = self.window if self.window is not None else DEFAULT_WINDOWS[self.env]
        if window < 1 or self.total_steps < window or self.total_steps % window:
            raise ValueError(f"window {window} must divide total_steps {self.total_steps}")
        object.__setattr__(self, "window", window)
        unknown = set(self.learner) - LEARNER_KEYS
        if unknown:
            raise ValueError(f"unknown learner settings {sorted(unknown)}")
        if self.advice not in ("accurate", "inaccurate"):
            raise ValueError("advice must be 'accurate' or 'inaccurate'")
        _ = self.advice_name  # validates the combination
        if self.out is not None:
            stem = Path(self.out)
            if self.aggregate_out is None:
                object.__setattr__(self, "aggregate_out", str(stem.with_name(stem.stem + ".agg.csv")))
            if self.plot_out is None:
                object.__setattr__(self, "plot_out", str(stem.with_suffix(".svg")))

    @property
    def advice_name(self) -> str:
        if self.advice == "accurate" or self.env.endswith(("-extra", "-inaccurate")):
            return self.env
        if self.env == "cartpole":
            return "cartpole-inaccurate"
        raise ValueError(f"no inaccurate advice variant for {self.env!r}")

    def learner_config(self, method: str, seed: int) -> LearnerConfig:
        lc = dict(self.learner)
        if "epsilon" in lc:
            exploration = EpsilonGreedy(lc.pop("epsilon"), lc.pop("epsilon_min", None))
        else:
            exploration = Softmax(lc.pop("tau0", 5.0), lc.pop("tau_min", 0.05))
        return LearnerConfig(exploration=exploration, seed=seed, variant=method, **lc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["learner"] = dict(sorted(self.learner.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(d: dict) -> str:
    """Hash of the settings that determine results (output paths and job count excluded)."""
    d = {k: v for k, v in d.items() if k not in NON_SEMANTIC}
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass(eq=False)
class CurveTable:
    """Per-seed window averages; aggregates are mean and population stddev across seeds."""

    method: list
    seed: np.ndarray
    step: np.ndarray
    value: np.ndarray
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.value)

    @property
    def methods(self) -> list:
        return list(dict.fromkeys(self.method))

    def curves(self, method: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(seeds, steps, values[seed, step])`` for one method, seeds ascending."""
        mask = np.array([m == method for m in self.method])
        if not mask.any():
            raise KeyError(f"method {method!r} not in table")
        seeds = np.unique(self.seed[mask])
        steps = np.unique(self.step[mask])
        grid = np.full((len(seeds), len(steps)), np.nan)
        grid[np.searchsorted(seeds, self.seed[mask]), np.searchsorted(steps, self.step[mask])] = self.value[mask]
        return seeds, steps, grid

    def aggregate(self) -> list[tuple[str, int, float, float]]:
        """``(method, step, mean, stddev)`` rows; exactly rounded sums make them independent of seed order."""
        rows = []
        for m in self.methods:
            _, steps, grid = self.curves(m)
            n = grid.shape[0]
            for k, step in enumerate(steps):
                col = grid[:, k]
                mu = math.fsum(col) / n
                sd = math.sqrt(math.fsum((col - mu) ** 2) / n)
                rows.append((m, int(step), mu, sd))
        return rows

    # serialization

    def _manifest(self, body: str) -> str:
        semantic = {k: v for k, v in self.config.items() if k not in NON_SEMANTIC}
        cfg = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        cfg_hash = config_digest(self.config)
        content = hashlib.sha256(body.encode()).hexdigest()
        return f"# config: {cfg}\n# config_sha256: {cfg_hash}\n# content_sha256: {content}\n"

    def raw_csv(self) -> str:
        body = io.StringIO()
        body.write(RAW_HEADER + "\n")
        for m, s, st, v in zip(self.method, self.seed, self.step, self.value):
            body.write(f"{m},{int(s)},{int(st)},{float(v)!r}\n")
        text = body.getvalue()
        return self._manifest(text) + text

    def aggregate_csv(self) -> str:
        body = io.StringIO()
        body.write(AGG_HEADER + "\n")
        for m, st, mu, sd in self.aggregate():
            body.write(f"{m},{st},{mu!r},{sd!r}\n")
        text = body.getvalue()
        return self._manifest(text) + text

    def write_csv(self, path):
        atomic_write(path, self.raw_csv())

    def write_aggregate(self, path):
        atomic_write(path, self.aggregate_csv())

    @classmethod
    def read_csv(cls, path) -> CurveTable:
        config, rows = {}, []
        with open(path) as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("# config: "):
                    config = json.loads(line[len("# config: "):])
                elif line.startswith("#") or not line or line == RAW_HEADER:
                    continue
                else:
                    parts = line.split(",")
                    if len(parts) != 4:
                        raise ValueError(f"bad curve row {line!r}")
                    rows.append(parts)
        if not rows:
            return cls([], np.zeros(0, int), np.zeros(0, int), np.zeros(0), config)
        m, s, st, v = zip(*rows)
        return cls(list(m), np.array(s, dtype=int), np.array(st, dtype=int), np.array(v, dtype=float), config)


def read_aggregate(path) -> list[tuple[str, int, float, float]]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#") or line == AGG_HEADER:
                continue
            m, st, mu, sd = line.split(",")
            out.append((m, int(st), float(mu), float(sd)))
    return out


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_cell(config: ExperimentConfig, method: str, seed: int) -> np.ndarray:
    env = make_env(config.env, seed=seed)
    potential = shield = None
    if method != "baseline":
        model = reference_advice(config.advice_name, env).synthesize()
        potential = model.potential.shifted(config.potential_offset) if config.potential_offset else model.potential
        shield = model.shield
    result = run_training(env, config.learner_config(method, seed), potential, shield, config.total_steps,
                          config.window)
    return result.window_avg


def _run_cell_safe(config, method, seed):
    try:
        return _run_cell(config, method, seed)
    except (LtlShapeError, ValueError, FloatingPointError) as exc:
        raise ExperimentError(f"{method} seed {seed} failed: {exc}", method, seed) from exc


def run_experiment(config: ExperimentConfig) -> CurveTable:
    """Train every method on every seed; deterministic given the config."""
    cells = [(m, s) for m in config.methods for s in range(config.seeds)]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            curves = list(pool.map(_run_cell_safe, [config] * len(cells), *zip(*cells)))
    else:
        curves = [_run_cell_safe(config, m, s) for m, s in cells]
    n = config.total_steps // config.window
    steps = config.window * np.arange(1, n + 1)
    methods, seeds, all_steps, values = [], [], [], []
    for (m, s), curve in zip(cells, curves):
        methods.extend([m] * n)
        seeds.append(np.full(n, s))
        all_steps.append(steps)
        values.append(curve)
    return CurveTable(methods, np.concatenate(seeds), np.concatenate(all_steps), np.concatenate(values),
                      config.to_dict())


def compare_methods(table: CurveTable, step: int, method_a: str, method_b: str, level: float = 0.95):
    """Mean difference ``a - b`` at ``step`` and its Welch confidence interval."""
    samples = []
    for m in (method_a, method_b):
        seeds, steps, grid = table.curves(m)
        if len(seeds) < 2:
            raise InsufficientSeeds(f"method {m!r} has {len(seeds)} seed(s); need at least 2")
        idx = np.flatnonzero(steps == step)
        if not len(idx):
            raise KeyError(f"step {step} not recorded for {m!r}")
        samples.append(grid[:, idx[0]])
    a, b = samples
    diff = float(a.mean() - b.mean())
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se = math.sqrt(va + vb)
    if se == 0.0:
        return diff, (diff, diff)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    half = float(stats.t.ppf(0.5 + level / 2, df)) * se
    return diff, (diff - half, diff + half)


def with_outputs(config: ExperimentConfig, out) -> ExperimentConfig:
    return replace(config, out=str(out), aggregate_out=None, plot_out=None)


def write_outputs(table: CurveTable, config: ExperimentConfig):
    """Raw CSV, aggregate CSV and the plot next to them."""
    from .plotting import emit_plot

    if config.out is None:
        raise ValueError("config has no output path")
    table.write_csv(config.out)
    table.write_aggregate(config.aggregate_out)
    emit_plot(table, config.plot_out)
