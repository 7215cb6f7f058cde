"""Gradient-check harness: green baseline, fault detection, reporting."""

import pytest
import torch

from svnvs import checks, rendering


@pytest.fixture(scope="module")
def all_results():
    return checks.run_checks()


class TestHarness:
    def test_exact_gradient_scores_near_zero(self):
        x = torch.tensor([0.3, -0.7, 1.2], dtype=torch.float64, requires_grad=True)
        err = checks.max_gradient_error(lambda: (x ** 3).sum(), {"x": x}, samples=3)
        assert err < 1e-6

    def test_detached_gradient_is_flagged(self):
        x = torch.tensor([0.3, -0.7, 1.2], dtype=torch.float64, requires_grad=True)
        y = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64, requires_grad=True)

        def loss_fn():
            return (x * y.detach()).sum() + x.sum()

        err = checks.max_gradient_error(loss_fn, {"x": x, "y": y}, samples=3)
        assert err > 0.1


class TestBaseline:
    def test_every_check_passes(self, all_results):
        failing = [r.name for r in all_results if not r.passed]
        assert failing == []

    def test_every_registered_check_ran(self, all_results):
        assert len(all_results) == len(checks.ALL_CHECKS)
        names = {r.name for r in all_results}
        assert {name for name, _ in checks.ALL_CHECKS} <= names

    def test_module_filter_selects_by_substring(self):
        results = checks.run_checks("blend_weights")
        assert [r.name for r in results] == ["rendering.blend_weights.grad",
                                             "rendering.blend_weights.partition"]
        assert checks.run_checks("no_such_module") == []


class TestFaultInjection:
    def test_detached_aggregation_fails_the_aggregate_check(self, monkeypatch):
        original = rendering.aggregate

        def sabotaged(colors, valids, weights, prob):
            return original(colors, valids, weights.detach(), prob)

        monkeypatch.setattr(rendering, "aggregate", sabotaged)
        results = checks.run_checks("rendering.aggregate.grad")
        assert len(results) == 1
        assert not results[0].passed
        assert "rendering.aggregate" in results[0].name

    def test_a_crashing_check_reports_failure_not_exception(self, monkeypatch):
        def explode(*args, **kwargs):
            raise RuntimeError("injected fault")

        monkeypatch.setattr(checks.visibility, "pairwise_similarity", explode)
        results = checks.run_checks("visibility.estimator")
        assert len(results) == 1
        assert not results[0].passed
        assert "injected fault" in results[0].name


class TestReporting:
    def test_format_marks_passes_and_failures(self, all_results):
        text = checks.format_results(all_results)
        lines = text.splitlines()
        assert len(lines) == len(all_results)
        assert all(line.startswith(("PASS", "FAIL")) for line in lines)
        broken = checks.CheckResult(name="fake.check", value=1.0, tolerance=0.1,
                                    passed=False)
        assert checks.format_results([broken]).startswith("FAIL")
