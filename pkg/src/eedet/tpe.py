"""Tree-structured Parzen Estimator over a mixed search space, and resumable studies."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

log = logging.getLogger(__name__)

GAMMA = 0.25
N_STARTUP = 10
N_CANDIDATES = 24
MIN_BANDWIDTH = 1e-3
STREAM_HPO = 4


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ValueError("categorical domain is empty")

    def contains(self, v):
        return v in self.choices

    def to_dict(self):
        return {"type": "categorical", "choices": list(self.choices)}


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("continuous domain needs low < high")
        if self.log and self.low <= 0:
            raise ValueError("log-uniform bounds must be positive")

    def contains(self, v):
        return self.low <= v <= self.high

    # internal (possibly log) coordinates
    def to_internal(self, v):
        return math.log(v) if self.log else float(v)

    def from_internal(self, u):
        v = math.exp(u) if self.log else float(u)
        return min(max(v, self.low), self.high)

    @property
    def bounds(self):
        return self.to_internal(self.low), self.to_internal(self.high)

    def to_dict(self):
        return {"type": "loguniform" if self.log else "uniform", "low": self.low, "high": self.high}


def LogUniform(low, high):
    return Uniform(low, high, log=True)


def dim_from_dict(d):
    if d["type"] == "categorical":
        return Categorical(tuple(d["choices"]))
    return Uniform(float(d["low"]), float(d["high"]), d["type"] == "loguniform")


@dataclass
class SearchSpace:
    dims: dict

    def __post_init__(self):
        if not self.dims:
            raise ValueError("search space has no dimensions")

    def contains(self, assignment) -> bool:
        return set(assignment) == set(self.dims) and all(d.contains(assignment[k]) for k, d in self.dims.items())

    def to_dict(self):
        return {k: d.to_dict() for k, d in self.dims.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: dim_from_dict(v) for k, v in d.items()})


def default_space(layers=(7, 8, 9, 10)) -> SearchSpace:
    """Attach layer within a stage, branch lr, batch size, loss weight and class weight."""
    return SearchSpace({
        "layer": Categorical(tuple(layers)),
        "branch_lr": LogUniform(1e-5, 1e-2),
        "batch_size": Categorical((8, 16, 24, 32)),
        "lam": LogUniform(0.1, 10.0),
        "w1": Uniform(0.25, 4.0),
    })


@dataclass
class TrialRecord:
    number: int
    assignment: dict
    J: float | None
    status: str = "complete"
    artifacts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status == "complete" and (self.J is None or not math.isfinite(self.J)):
            raise ValueError("completed trials need a finite objective")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def objective_J(map_baseline: float, S: float, A_ee: float) -> float:
    """Composite objective: baseline mAP (no early exit) x static MAC saving x branch accuracy."""
    return float(map_baseline) * float(S) * float(A_ee)


# --------------------------------------------------------------------------
# Parzen estimators

def _sample_uniform(space: SearchSpace, rng) -> dict:
    out = {}
    for k, d in space.dims.items():
        if isinstance(d, Categorical):
            out[k] = d.choices[int(rng.integers(len(d.choices)))]
        else:
            lo, hi = d.bounds
            out[k] = d.from_internal(rng.uniform(lo, hi))
    return out


class _Parzen1D:
    """Per-dimension density over a set of observed values."""

    def __init__(self, dim, values):
        self.dim = dim
        if isinstance(dim, Categorical):
            counts = np.array([sum(1 for v in values if v == c) for c in dim.choices], float)
            self.probs = (counts + 1.0) / (counts.sum() + len(dim.choices))
        else:
            lo, hi = dim.bounds
            self.mu = np.array([dim.to_internal(v) for v in values], float)
            self.bw = max((hi - lo) / math.sqrt(max(len(values), 1)), MIN_BANDWIDTH)
            self.a = (lo - self.mu) / self.bw
            self.b = (hi - self.mu) / self.bw

    def sample(self, rng):
        if isinstance(self.dim, Categorical):
            return self.dim.choices[int(rng.choice(len(self.dim.choices), p=self.probs))]
        j = int(rng.integers(len(self.mu)))
        u = truncnorm.rvs(self.a[j], self.b[j], loc=self.mu[j], scale=self.bw, random_state=rng)
        return self.dim.from_internal(float(u))

    def logpdf(self, v):
        if isinstance(self.dim, Categorical):
            return float(np.log(self.probs[self.dim.choices.index(v)]))
        u = self.dim.to_internal(v)
        dens = truncnorm.pdf(u, self.a, self.b, loc=self.mu, scale=self.bw).mean()
        return float(np.log(max(dens, 1e-300)))


def split_history(history, gamma=GAMMA):
    """(good, bad) completed trials; good = top ceil(gamma * n) by J (earlier trial wins ties)."""
    done = [t for t in history if t.status == "complete"]
    ranked = sorted(done, key=lambda t: (-t.J, t.number))
    n_good = max(1, math.ceil(gamma * len(ranked)))
    return ranked[:n_good], ranked[n_good:]


def score_candidates(good, bad, space, rng, n_candidates=N_CANDIDATES):
    """Draw candidates from the good model; return (candidates, log l(x) - log g(x))."""
    lmods = {k: _Parzen1D(d, [t.assignment[k] for t in good]) for k, d in space.dims.items()}
    gmods = {k: _Parzen1D(d, [t.assignment[k] for t in bad]) for k, d in space.dims.items()}
    cands = [{k: lmods[k].sample(rng) for k in space.dims} for _ in range(n_candidates)]
    scores = np.array([sum(lmods[k].logpdf(c[k]) - gmods[k].logpdf(c[k]) for k in space.dims) for c in cands])
    return cands, scores


def tpe_suggest(history, space: SearchSpace, rng, gamma=GAMMA, n_startup=N_STARTUP,
                n_candidates=N_CANDIDATES) -> dict:
    done = [t for t in history if t.status == "complete"]
    # each assignment is evaluated at most once: skip repeats of past trials
    seen = [t.assignment for t in history]
    if len(done) < n_startup:
        a = _sample_uniform(space, rng)
        return a if a not in seen else _fresh(space, seen, rng, a)
    good, bad = split_history(done, gamma)
    if not bad:
        bad = good
    cands, scores = score_candidates(good, bad, space, rng, n_candidates)
    for i in np.argsort(-scores, kind="stable"):
        if cands[i] not in seen:
            return cands[i]
    return _fresh(space, seen, rng, cands[int(np.argmax(scores))])


def _fresh(space, seen, rng, fallback):
    """A uniformly drawn unseen cell of a finite space, else ``fallback``."""
    fresh = [a for a in _enumerate(space) if a not in seen] if _is_finite(space) else []
    return fresh[int(rng.integers(len(fresh)))] if fresh else fallback


def _is_finite(space):
    return all(isinstance(d, Categorical) for d in space.dims.values())


def _enumerate(space):
    out = [{}]
    for k, d in space.dims.items():
        out = [{**a, k: c} for a in out for c in d.choices]
    return out


def random_suggest(history, space, rng, **_):
    return _sample_uniform(space, rng)


# --------------------------------------------------------------------------
# studies

def trial_rng(seed: int, number: int):
    return np.random.default_rng([seed, STREAM_HPO, number])


def load_history(path) -> list[TrialRecord]:
    p = Path(path)
    if not p.exists():
        return []
    return [TrialRecord.from_json(l) for l in p.read_text().splitlines() if l.strip()]


def best_trial(history):
    done = [t for t in history if t.status == "complete"]
    if not done:
        return None
    return min(done, key=lambda t: (-t.J, t.number))


def run_study(space: SearchSpace, n_trials: int, evaluator: Callable[[dict], float | tuple], seed=0,
              path=None, sampler=tpe_suggest, **sampler_kwargs):
    """Run (or resume) a study. Returns (best TrialRecord, history).

    ``evaluator`` returns J or (J, artifacts dict). Exceptions mark the trial failed.
    When ``path`` is given the history is appended there after every trial, and an
    existing file is resumed from.
    """
    history = load_history(path) if path is not None else []
    for number in range(len(history), n_trials):
        rng = trial_rng(seed, number)
        assignment = sampler(history, space, rng, **sampler_kwargs)
        try:
            res = evaluator(assignment)
            j, artifacts = res if isinstance(res, tuple) else (res, {})
            rec = TrialRecord(number, assignment, float(j), "complete", artifacts)
        except Exception as e:  # evaluator failures are recorded, not fatal
            log.warning("trial %d failed: %s", number, e)
            rec = TrialRecord(number, assignment, None, "failed", {"error": repr(e)})
        history.append(rec)
        if path is not None:
            with open(path, "a") as f:
                f.write(rec.to_json() + "\n")
    return best_trial(history), history


# --------------------------------------------------------------------------
# synthetic benchmarks with known optima

def grid_benchmark_space():
    """Three 3-way categorical dimensions (27 cells)."""
    return SearchSpace({"a": Categorical((0, 1, 2)), "b": Categorical((0, 1, 2)), "c": Categorical((0, 1, 2))})


GRID_OPTIMUM = {"a": 2, "b": 0, "c": 1}


def grid_benchmark(assignment) -> float:
    """Separable score with a unique maximum at GRID_OPTIMUM."""
    weights = {"a": (0.1, 0.4, 1.0), "b": (1.0, 0.3, 0.2), "c": (0.5, 1.0, 0.0)}
    return float(sum(weights[k][assignment[k]] for k in weights))


def mixed_benchmark_space():
    return SearchSpace({"layer": Categorical((7, 8, 9, 10)), "lr": LogUniform(1e-5, 1e-2),
                        "w1": Uniform(0.25, 4.0)})


# per-layer static saving and branch accuracy ceiling: deeper exits save less but classify better
_SURROGATE_S = {7: 0.64, 8: 0.60, 9: 0.57, 10: 0.53}
_SURROGATE_A = {7: 0.80, 8: 0.88, 9: 0.95, 10: 0.96}


def mixed_benchmark(assignment) -> float:
    """Surrogate of the pipeline objective mAP x S(layer) x A(layer, lr, w1).

    Unique optimum at layer 9, lr = 1e-3, w1 = 1.5.
    """
    layer = assignment["layer"]
    fit = math.exp(-(math.log10(assignment["lr"]) + 3.0) ** 2) * math.exp(-(assignment["w1"] - 1.5) ** 2)
    return 0.6 * _SURROGATE_S[layer] * _SURROGATE_A[layer] * (0.5 + 0.5 * fit)


def sharp_benchmark(assignment) -> float:
    """Stress case: narrow continuous peaks that dominate a weak categorical effect."""
    f_layer = {7: 0.55, 8: 0.75, 9: 1.0, 10: 0.8}[assignment["layer"]]
    f_lr = math.exp(-(math.log10(assignment["lr"]) + 3.0) ** 2)
    f_w = math.exp(-((assignment["w1"] - 1.5) / 1.0) ** 2)
    return f_layer * f_lr * f_w


def quadratic_space():
    return SearchSpace({"x": Uniform(0.0, 1.0)})


def quadratic(assignment) -> float:
    return -(assignment["x"] - 0.3) ** 2


def stub_objective(assignment) -> float:
    """Cheap deterministic stand-in for the pipeline evaluator over the default space."""
    layers = sorted(_SURROGATE_S)
    layer = assignment["layer"]
    base = mixed_benchmark({"layer": layer if layer in _SURROGATE_S else layers[len(layers) // 2],
                            "lr": assignment["branch_lr"], "w1": assignment["w1"]})
    lam = math.exp(-math.log10(assignment["lam"]) ** 2)
    bs = {8: 0.9, 16: 1.0, 24: 0.97, 32: 0.93}.get(assignment["batch_size"], 0.9)
    return base * (0.8 + 0.2 * lam) * bs
