import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eedet.tpe import (GRID_OPTIMUM, Categorical, LogUniform, SearchSpace, TrialRecord, Uniform, _Parzen1D,
                       best_trial, default_space, grid_benchmark, grid_benchmark_space, load_history, objective_J,
                       quadratic, quadratic_space, random_suggest, run_study, score_candidates, split_history,
                       stub_objective, tpe_suggest, trial_rng)


def test_objective_examples():
    assert objective_J(0.591, 0.569, 0.944) == pytest.approx(0.3175, abs=1e-4)
    assert objective_J(0.0, 0.5, 0.9) == 0 and objective_J(0.5, 0.0, 0.9) == 0
    assert objective_J(0.6, -0.31, 0.9) < 0 < objective_J(0.01, 0.01, 0.01)


@settings(max_examples=100)
@given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 1), st.floats(1.01, 2))
def test_objective_monotone(a, b, c, k):
    base = objective_J(a, b, c)
    assert objective_J(a * k, b, c) > base and objective_J(a, b * k, c) > base and objective_J(a, b, c * k) > base


def test_domains_validate():
    with pytest.raises(ValueError):
        Categorical(())
    with pytest.raises(ValueError):
        Uniform(1, 1)
    with pytest.raises(ValueError):
        LogUniform(0, 1)
    with pytest.raises(ValueError):
        SearchSpace({})
    with pytest.raises(ValueError):
        TrialRecord(0, {}, float("nan"))
    TrialRecord(0, {}, None, "failed")


def test_default_space_matches_declared_ranges():
    s = default_space()
    assert s.dims["layer"].choices == (7, 8, 9, 10)
    assert s.dims["batch_size"].choices == (8, 16, 24, 32)
    assert (s.dims["branch_lr"].low, s.dims["branch_lr"].high, s.dims["branch_lr"].log) == (1e-5, 1e-2, True)
    assert (s.dims["lam"].low, s.dims["lam"].high, s.dims["lam"].log) == (0.1, 10.0, True)
    assert (s.dims["w1"].low, s.dims["w1"].high, s.dims["w1"].log) == (0.25, 4.0, False)
    assert SearchSpace.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def _history(space, n, seed=0, f=stub_objective):
    r = np.random.default_rng(seed)
    hist = []
    for i in range(n):
        a = random_suggest(hist, space, r)
        hist.append(TrialRecord(i, a, f(a)))
    return hist


@pytest.mark.parametrize("seed", range(5))
def test_startup_and_later_suggestions_in_domain(seed):
    space = default_space()
    assert space.contains(tpe_suggest([], space, np.random.default_rng(seed)))
    hist = _history(space, 15, seed)
    for k in range(10):
        assert space.contains(tpe_suggest(hist, space, np.random.default_rng(100 + k)))


def test_good_categorical_concentrates():
    space = SearchSpace({"layer": Categorical((7, 8, 9, 10)), "x": Uniform(0, 1)})
    r = np.random.default_rng(0)
    hist = []
    for i in range(40):
        layer = 9 if i % 4 == 0 else (7, 8, 10)[i % 3]
        hist.append(TrialRecord(i, {"layer": layer, "x": float(r.random())}, 1.0 if layer == 9 else 0.0))
    hits = sum(tpe_suggest(hist, space, np.random.default_rng(s), n_candidates=64)["layer"] == 9 for s in range(200))
    assert hits / 200 >= 0.9


def _best_x(sampler, seed, n=50):
    best, _ = run_study(quadratic_space(), n, quadratic, seed=seed, sampler=sampler)
    return abs(best.assignment["x"] - 0.3)


def test_quadratic_beats_random():
    tpe = np.median([_best_x(tpe_suggest, s) for s in range(20)])
    rnd = np.median([_best_x(random_suggest, s) for s in range(20)])
    assert tpe < rnd


def test_grid_optimum_found():
    hits = 0
    for s in range(20):
        best, _ = run_study(grid_benchmark_space(), 60, grid_benchmark, seed=s)
        hits += best.assignment == GRID_OPTIMUM
    assert hits >= 18


def test_grid_study_evaluates_each_cell_at_most_once():
    _, hist = run_study(grid_benchmark_space(), 27, grid_benchmark, seed=3)
    keys = [tuple(sorted(t.assignment.items())) for t in hist]
    assert len(set(keys)) == 27


def test_single_trial_study():
    best, hist = run_study(default_space(), 1, stub_objective, seed=0)
    assert len(hist) == 1 and best is hist[0]


def test_resume_gives_identical_history(tmp_path):
    full = tmp_path / "full.jsonl"
    part = tmp_path / "part.jsonl"
    run_study(default_space(), 14, stub_objective, seed=7, path=full)
    run_study(default_space(), 11, stub_objective, seed=7, path=part)
    run_study(default_space(), 14, stub_objective, seed=7, path=part)
    assert full.read_bytes() == part.read_bytes()
    hist = load_history(part)
    nxt = tpe_suggest(hist, default_space(), trial_rng(7, 14))
    assert nxt == tpe_suggest(load_history(full), default_space(), trial_rng(7, 14))


def test_failed_trials_recorded_and_excluded(tmp_path):
    calls = []

    def flaky(a):
        calls.append(a)
        if len(calls) % 3 == 0:
            raise RuntimeError("boom")
        return stub_objective(a), {"note": "ok"}

    best, hist = run_study(default_space(), 13, flaky, seed=1, path=tmp_path / "s.jsonl")
    failed = [t for t in hist if t.status == "failed"]
    assert len(failed) == 4 and all(t.J is None and "boom" in t.artifacts["error"] for t in failed)
    assert best.status == "complete" and best.artifacts == {"note": "ok"}
    good, bad = split_history(hist)
    assert all(t.status == "complete" for t in good + bad) and len(good) == math.ceil(0.25 * 9)


def test_best_trial_tie_breaks_earliest():
    hist = [TrialRecord(0, {"x": 0.1}, 1.0), TrialRecord(1, {"x": 0.2}, 1.0), TrialRecord(2, {"x": 0.3}, 0.5)]
    assert best_trial(hist).number == 0
    assert best_trial([TrialRecord(0, {}, None, "failed")]) is None


def test_negative_objective_ranks_last():
    hist = [TrialRecord(0, {"x": 0.1}, -0.2), TrialRecord(1, {"x": 0.2}, 0.01)]
    assert best_trial(hist).number == 1
    good, bad = split_history(hist)
    assert good[0].number == 1 and bad[0].number == 0


def test_identical_sets_give_unit_ratio():
    space = default_space()
    hist = _history(space, 12)
    _, scores = score_candidates(hist, hist, space, np.random.default_rng(0))
    assert np.allclose(scores, 0.0, atol=1e-12)


def test_parzen_bandwidth_rule():
    d = Uniform(0.0, 4.0)
    assert _Parzen1D(d, [1.0, 2.0, 3.0, 3.5]).bw == pytest.approx(4.0 / 2)
    assert _Parzen1D(Uniform(0, 1e-4), [5e-5]).bw == 1e-3
    cat = _Parzen1D(Categorical(("a", "b")), ["a", "a", "a"])
    assert cat.probs.tolist() == [4 / 5, 1 / 5]


def test_log_dimension_modeled_in_log_space():
    d = LogUniform(1e-5, 1e-2)
    p = _Parzen1D(d, [1e-3] * 8)
    draws = np.array([p.sample(np.random.default_rng(s)) for s in range(400)])
    assert np.all((draws >= 1e-5) & (draws <= 1e-2))
    assert abs(np.median(np.log10(draws)) + 3) < 0.3


def test_history_append_only(tmp_path):
    path = tmp_path / "s.jsonl"
    run_study(default_space(), 5, stub_objective, seed=0, path=path)
    first = path.read_text().splitlines()
    run_study(default_space(), 8, stub_objective, seed=0, path=path)
    assert path.read_text().splitlines()[:5] == first
