import json

import numpy as np
import pytest

from dipsvd import (
    BoConfig,
    ContractViolationError,
    InfeasibleBudgetError,
    ShapeError,
    capture_activations,
    compare_allocators,
    generate_synthetic,
    optimize,
    project_to_budget,
    seeded_rng,
    spectral_model,
    uniform_plan,
)
from dipsvd.allocation import CompressionPlan
from dipsvd.bayesopt import expected_improvement, save_trace_jsonl
from dipsvd.pipeline import RunConfig, _build_transforms

from oracles import hand_pearson


def _setup(seed, layers=3, dim=10, tokens=40):
    model = spectral_model(layers, dim, dim, seed=seed)
    calib = generate_synthetic(tokens, dim, np.geomspace(1, 0.1, dim), seed=seed + 99)
    captures = capture_activations(model, calib)
    cfg = RunConfig(model_spec=model, calibration=calib, whitening="plain")
    transforms = _build_transforms(model, captures, cfg)
    return model, calib, transforms


class TestProjectToBudget:
    def test_feasible_input_unchanged(self):
        raw = np.array([0.8, 0.6])
        out = project_to_budget(raw, 0.3, (0.25, 1.0))
        assert np.abs(out - raw).max() < 1e-12

    def test_hand_shift_and_clamp(self):
        out = project_to_budget(np.array([1.0, 0.3]), 0.3, (0.25, 1.0))
        assert np.allclose(out, [1.0, 0.4], atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_postcondition_mean(self, seed):
        rng = seeded_rng(seed)
        L = int(rng.integers(1, 9))
        k = float(rng.uniform(0.05, 0.7))
        raw = rng.uniform(0.25, 1.0, L)
        out = project_to_budget(raw, k, (0.25, 1.0))
        assert abs(out.mean() - (1.0 - k)) < 1e-9
        assert np.all(out >= 0.25 - 1e-12) and np.all(out <= 1.0 + 1e-12)

    def test_infeasible_target(self):
        with pytest.raises(InfeasibleBudgetError):
            project_to_budget(np.array([0.5, 0.5]), 0.9, (0.25, 1.0))


class TestOptimize:
    def test_uniform_is_first_candidate(self):
        model, calib, transforms = _setup(0)
        _, trace = optimize(model, calib, transforms, 0.3, BoConfig(budget=4, seed=0))
        assert np.allclose(trace.entries[0].preserve, 0.7, atol=1e-12)

    def test_best_never_below_uniform(self):
        model, calib, transforms = _setup(1)
        _, trace = optimize(model, calib, transforms, 0.3, BoConfig(budget=8, seed=1))
        assert trace.best_value >= trace.entries[0].objective

    def test_deterministic_given_seed(self):
        model, calib, transforms = _setup(2)
        cfg = BoConfig(budget=6, seed=5)
        _, t1 = optimize(model, calib, transforms, 0.3, cfg)
        _, t2 = optimize(model, calib, transforms, 0.3, cfg)
        assert len(t1.entries) == len(t2.entries)
        for a, b in zip(t1.entries, t2.entries):
            assert np.array_equal(a.preserve, b.preserve)
            assert a.objective == b.objective

    def test_single_layer_short_circuits(self):
        model, calib, transforms = _setup(3, layers=1)
        plan, trace = optimize(model, calib, transforms, 0.3, BoConfig(budget=16, seed=0))
        assert len(trace.entries) == 1
        assert np.allclose(plan.preserve, [0.7], atol=1e-12)

    def test_every_candidate_feasible(self):
        model, calib, transforms = _setup(4)
        _, trace = optimize(model, calib, transforms, 0.3, BoConfig(budget=12, seed=2))
        for entry in trace.entries:
            assert abs(entry.preserve.mean() - 0.7) < 1e-9
            assert np.all(entry.preserve >= 0.25 - 1e-12)
            assert np.all(entry.preserve <= 1.0 + 1e-12)

    def test_running_best_is_nondecreasing(self):
        model, calib, transforms = _setup(5)
        _, trace = optimize(model, calib, transforms, 0.3, BoConfig(budget=12, seed=3))
        best = -np.inf
        for entry in trace.entries:
            best = max(best, entry.objective)
        assert best == trace.best_value

    def test_random_search_mode(self):
        model, calib, transforms = _setup(6)
        cfg = BoConfig(budget=6, seed=4, surrogate="random-search")
        plan, trace = optimize(model, calib, transforms, 0.3, cfg)
        assert len(trace.entries) == 6
        assert abs(plan.preserve.mean() - 0.7) < 1e-9

    def test_failed_candidates_score_minus_inf(self):
        model, calib, transforms = _setup(7)

        calls = {"n": 0}

        def flaky(preserve):
            calls["n"] += 1
            if calls["n"] > 1:
                raise ShapeError("synthetic failure")
            return 0.5

        plan, trace = optimize(
            model, calib, transforms, 0.3, BoConfig(budget=5, seed=6), scorer=flaky
        )
        assert trace.entries[0].objective == 0.5
        assert all(e.objective == -np.inf for e in trace.entries[1:])
        assert np.allclose(plan.preserve, 0.7, atol=1e-12)

    def test_k_out_of_range(self):
        model, calib, transforms = _setup(8)
        with pytest.raises(ContractViolationError):
            optimize(model, calib, transforms, 1.2, BoConfig(budget=2, seed=0))


class TestBoConfig:
    def test_bad_domain(self):
        with pytest.raises(ContractViolationError):
            BoConfig(domain=(1.0, 0.25))

    def test_bad_surrogate(self):
        with pytest.raises(ContractViolationError):
            BoConfig(surrogate="simulated-annealing")

    def test_bad_budget(self):
        with pytest.raises(ContractViolationError):
            BoConfig(budget=0)


class TestCompareAllocators:
    def test_identical_plans(self):
        plan = uniform_plan(4, 0.3)
        noisy = CompressionPlan(
            preserve=plan.preserve + np.array([0.1, -0.1, 0.05, -0.05]),
            target_k=0.3,
            layer_count=4,
        )
        assert compare_allocators(noisy, noisy) == 1.0

    def test_reversed_orderings_negative(self):
        a = CompressionPlan(preserve=np.array([0.9, 0.8, 0.6, 0.5]), target_k=0.3, layer_count=4)
        b = CompressionPlan(preserve=np.array([0.5, 0.6, 0.8, 0.9]), target_k=0.3, layer_count=4)
        got = compare_allocators(a, b)
        assert got < 0
        assert got == pytest.approx(
            hand_pearson(list(a.preserve), list(b.preserve)), abs=1e-12
        )


class TestExpectedImprovement:
    def test_zero_sigma_reduces_to_positive_part(self):
        mu = np.array([0.5, 1.5])
        sigma = np.zeros(2)
        ei = expected_improvement(mu, sigma, best=1.0)
        assert ei[0] == 0.0
        assert ei[1] == pytest.approx(0.5)

    def test_monotone_in_mean(self):
        sigma = np.full(3, 0.1)
        ei = expected_improvement(np.array([0.0, 0.5, 1.0]), sigma, best=0.5)
        assert ei[0] < ei[1] < ei[2]

    def test_uncertainty_adds_value_below_best(self):
        mu = np.array([0.0, 0.0])
        ei = expected_improvement(mu, np.array([0.0, 1.0]), best=1.0)
        assert ei[0] == 0.0 and ei[1] > 0.0


def test_trace_jsonl(tmp_path):
    model, calib, transforms = _setup(9)
    _, trace = optimize(model, calib, transforms, 0.3, BoConfig(budget=3, seed=7))
    path = tmp_path / "trace.jsonl"
    save_trace_jsonl(trace, path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 3
    first = json.loads(lines[0])
    assert first["iteration"] == 1
    assert len(first["preserve"]) == 3
    assert "timestamp" in first
