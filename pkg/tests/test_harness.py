"""
实验编排测试
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from src.codec import read_instance, solution_path
from src.harness import (
    CSV_SCHEMA,
    ExperimentSpec,
    InstanceSpec,
    SweepRow,
    TrialRecord,
    build_instance,
    cmd_audit,
    cmd_generate,
    cmd_run,
    cmd_sweep,
    load_spec,
    prepare_instance,
    run_trials,
    summarize,
    sweep_summary,
    _tasks,
)


def _spec(**overrides) -> dict:
    data = {
        "name": "small",
        "instance": {"generator": "random_linear", "n_states": 10, "n_actions": 2, "n_features": 3, "discount": 0.7, "seed": 3},
        "algorithm": {"name": "ppq", "total_samples": 20_000},
        "trials": 3,
        "base_seed": 100,
    }
    data.update(overrides)
    return data


def _read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == CSV_SCHEMA
    return list(csv.DictReader(lines[1:]))


class TestSpecParsing:
    """测试实验描述的校验"""

    def test_defaults(self):
        spec = ExperimentSpec.from_dict(_spec())
        assert spec.trials == 3
        assert spec.success_threshold == 0.1
        assert spec.sweep is None

    @pytest.mark.parametrize(
        "overrides",
        [
            {"name": ""},
            {"trials": 0},
            {"instance": {"generator": "grid_world"}},
            {"instance": {"n_states": 10, "colour": "red"}},
            {"instance": {"discount": 1.0}},
            {"algorithm": {"name": "dqn"}},
            {"algorithm": {"name": "ppq"}},
            {"algorithm": {"name": "oppq"}},
            {"sweep": {"axis": "N", "values": []}},
            {"sweep": {"axis": "K", "values": [1, 2]}},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ValueError):
            ExperimentSpec.from_dict(_spec(**overrides))

    def test_missing_section(self):
        data = _spec()
        del data["algorithm"]
        with pytest.raises(ValueError, match="algorithm"):
            ExperimentSpec.from_dict(data)

    def test_load_spec_errors(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            load_spec(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(ValueError, match="valid JSON"):
            load_spec(bad)

    @pytest.mark.parametrize("path", sorted((Path(__file__).parents[1] / "specs").glob("*.json")), ids=lambda p: p.stem)
    def test_example_specs_parse(self, path):
        spec = load_spec(path)
        assert spec.name == path.stem

    def test_success_threshold_from_epsilon(self):
        spec = ExperimentSpec.from_dict(_spec(algorithm={"name": "oppq", "epsilon": 0.25}))
        assert spec.success_threshold == 0.25


class TestBuildInstance:
    """测试各生成器"""

    def test_lower_bound_feature_count(self):
        instance = build_instance(InstanceSpec(generator="lower_bound", n_states=3, n_actions=2, discount=0.9))
        assert instance.features.n_features == 3 * 2 + 1

    def test_two_state(self):
        instance = build_instance(InstanceSpec(generator="two_state", discount=0.5))
        assert instance.mdp.n_states == 2
        assert instance.anchors.size == 4

    def test_noise_seed_recorded(self):
        instance = build_instance(InstanceSpec(n_states=10, n_actions=2, n_features=3, xi=0.05, seed=2))
        assert "noise_seed" in instance.params
        assert instance.xi == 0.05
        assert instance.mdp is not instance.linear.mdp


class TestGenerate:
    """测试实例文件的生成与缓存"""

    def test_byte_identical(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec())
        a = cmd_generate(spec, tmp_path / "a")
        b = cmd_generate(spec, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()
        assert solution_path(a).read_bytes() == solution_path(b).read_bytes()

    def test_round_trip_keeps_mdp(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec(instance={"n_states": 8, "n_actions": 2, "n_features": 3, "xi": 0.1}))
        instance, path, _ = prepare_instance(spec.instance, tmp_path)
        again = read_instance(path)
        assert again.mdp.transitions == pytest.approx(instance.mdp.transitions, abs=1e-12)
        assert again.anchors.indices == instance.anchors.indices


class TestRun:
    """测试试验运行与输出"""

    def test_deterministic_output(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec())
        cmd_run(spec, tmp_path / "a")
        cmd_run(spec, tmp_path / "b")
        a = (tmp_path / "a" / "small.trials.csv").read_bytes()
        b = (tmp_path / "b" / "small.trials.csv").read_bytes()
        assert a == b

    def test_rows_and_summary(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec())
        summary = cmd_run(spec, tmp_path)
        rows = _read_csv(tmp_path / "small.trials.csv")
        assert [int(r["seed"]) for r in rows] == [100, 101, 102]
        assert all(r["status"] == "ok" for r in rows)
        assert all(r["samples_used"] == r["expected_samples"] for r in rows)
        assert summary["failures"] == 0
        assert summary["learner"]["algorithm"] == "ppq"
        saved = json.loads((tmp_path / "small.summary.json").read_text(encoding="utf-8"))
        assert len(saved["timing"]["wall_time_ms"]) == 3

    def test_oppq_run(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec(algorithm={"name": "oppq", "epsilon": 0.3}, trials=2))
        summary = cmd_run(spec, tmp_path)
        rows = _read_csv(tmp_path / "small.trials.csv")
        assert all(r["status"] == "ok" for r in rows)
        assert all(r["clip_ok"] == "1" for r in rows)
        assert "Z" in json.loads(rows[0]["realized"])
        assert summary["learner"]["c_outer"] == 2.0

    def test_failed_trial_is_recorded(self, tmp_path):
        """OPPQ 在无锚点实例上失败：每个试验都记一行，成功率分母包含它们"""
        spec = ExperimentSpec.from_dict(
            _spec(
                instance={"n_states": 10, "n_actions": 2, "n_features": 3, "discount": 0.7, "anchored": False},
                algorithm={"name": "oppq", "epsilon": 0.3},
            )
        )
        summary = cmd_run(spec, tmp_path)
        rows = _read_csv(tmp_path / "small.trials.csv")
        assert len(rows) == 3
        assert all(r["status"] == "failed" and "anchored" in r["error"] for r in rows)
        assert summary["failures"] == 3
        assert summary["success_rate"] == 0.0

    def test_workers_match_serial(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec(trials=2))
        instance, _, solution = prepare_instance(spec.instance, tmp_path)
        tasks = _tasks(spec, instance, solution, spec.algorithm)
        serial = [r.csv_row() for r in run_trials(tasks, workers=1)]
        parallel = [r.csv_row() for r in run_trials(tasks, workers=2)]
        assert serial == parallel


class TestSweep:
    """测试扫描与聚合"""

    def test_n_axis(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec(trials=2, sweep={"axis": "N", "values": [5_000, 20_000]}, target_error=10.0))
        summary = cmd_sweep(spec, tmp_path)
        assert [row["value"] for row in summary["rows"]] == [5_000.0, 20_000.0]
        assert "error_slope" in summary
        assert summary["first_reaching_target"] == 5_000.0
        rows = _read_csv(tmp_path / "small.sweep.csv")
        assert len(rows) == 2
        assert len(_read_csv(tmp_path / "small.trials.csv")) == 4

    def test_xi_axis_builds_distinct_instances(self, tmp_path):
        spec = ExperimentSpec.from_dict(_spec(trials=1, sweep={"axis": "xi", "values": [0.0, 0.1]}))
        cmd_sweep(spec, tmp_path)
        files = sorted(p.name for p in tmp_path.glob("*-xi*.json") if not p.name.endswith(".solution.json"))
        assert len(files) == 2

    def test_gamma_axis_on_file_instance(self, tmp_path):
        """文件实例沿 gamma 扫描：每个取值另存一个换了折扣的实例"""
        base = cmd_generate(ExperimentSpec.from_dict(_spec()), tmp_path / "base")
        spec = ExperimentSpec.from_dict(
            _spec(instance={"path": str(base)}, trials=1, sweep={"axis": "gamma", "values": [0.5, 0.95]})
        )
        summary = cmd_sweep(spec, tmp_path / "sweep")
        low = read_instance(tmp_path / "sweep" / f"{base.stem}-gamma0.5.json")
        high = read_instance(tmp_path / "sweep" / f"{base.stem}-gamma0.95.json")
        assert low.mdp.discount == 0.5
        assert high.mdp.discount == 0.95
        assert low.anchors.indices == high.anchors.indices
        assert read_instance(base).mdp.discount == 0.7
        assert [row["value"] for row in summary["rows"]] == [0.5, 0.95]
        v_low = json.loads(solution_path(tmp_path / "sweep" / f"{base.stem}-gamma0.5.json").read_text(encoding="utf-8"))["v_star"]
        v_high = json.loads(solution_path(tmp_path / "sweep" / f"{base.stem}-gamma0.95.json").read_text(encoding="utf-8"))["v_star"]
        assert max(v_high) > max(v_low)

    def test_xi_axis_on_file_instance(self, tmp_path):
        base = cmd_generate(ExperimentSpec.from_dict(_spec()), tmp_path / "base")
        spec = ExperimentSpec.from_dict(
            _spec(instance={"path": str(base)}, trials=1, sweep={"axis": "xi", "values": [0.0, 0.1]})
        )
        cmd_sweep(spec, tmp_path / "sweep")
        clean = read_instance(tmp_path / "sweep" / f"{base.stem}-xi0.0.json")
        noisy = read_instance(tmp_path / "sweep" / f"{base.stem}-xi0.1.json")
        assert clean.xi == 0.0
        assert noisy.xi == 0.1
        tv = 0.5 * np.abs(noisy.mdp.transitions - clean.mdp.transitions).sum(axis=1)
        assert 0.0 < tv.max() <= 0.1 + 1e-12

    def test_needs_sweep_section(self, tmp_path):
        with pytest.raises(ValueError, match="sweep"):
            cmd_sweep(ExperimentSpec.from_dict(_spec()), tmp_path)


class TestSummaries:
    """测试统计汇总"""

    def test_failures_in_denominator(self):
        records = [
            TrialRecord(trial=0, seed=0, status="ok", policy_error=0.05, samples_used=10),
            TrialRecord(trial=1, seed=1, status="ok", policy_error=0.5, samples_used=10),
            TrialRecord(trial=2, seed=2, status="failed"),
            TrialRecord(trial=3, seed=3, status="failed"),
        ]
        stats = summarize(records, 0.1)
        assert stats["success_rate"] == 0.25
        assert stats["failures"] == 2
        assert stats["total_samples"] == 20

    def _rows(self, axis, values, errors, samples):
        return [
            SweepRow(axis, v, 1, 0, e, e, e, 1.0, int(s), float(s))
            for v, e, s in zip(values, errors, samples)
        ]

    def test_error_slope(self):
        rows = self._rows("N", [1e3, 1e4, 1e5], [1.0, 10**-0.5, 0.1], [1e3, 1e4, 1e5])
        out = sweep_summary("N", rows, target_error=0.2)
        assert out["error_slope"] == pytest.approx(-0.5)
        assert out["first_reaching_target"] == 1e5
        assert out["samples_at_target"] == 1e5

    def test_samples_exponent(self):
        rows = self._rows("gamma", [0.5, 0.75, 0.875], [0.1] * 3, [8, 64, 512])
        out = sweep_summary("gamma", rows, target_error=None)
        assert out["samples_exponent"] == pytest.approx(3.0)
        assert "first_reaching_target" not in out

    def test_slope_needs_two_points(self):
        rows = self._rows("N", [1e3, 1e4], [0.0, 0.0], [1e3, 1e4])
        assert sweep_summary("N", rows, None)["error_slope"] is None


class TestAudit:
    """测试实例文件的重新校验"""

    @pytest.mark.parametrize(
        "instance",
        [
            {"n_states": 10, "n_actions": 2, "n_features": 3},
            {"n_states": 10, "n_actions": 2, "n_features": 3, "xi": 0.05},
            {"generator": "soft_aggregation", "n_states": 10, "n_actions": 2, "n_features": 3},
            {"generator": "lower_bound", "n_states": 3, "n_actions": 2},
        ],
    )
    def test_generated_instances_pass(self, tmp_path, instance):
        path = cmd_generate(ExperimentSpec.from_dict(_spec(instance=instance)), tmp_path)
        report = cmd_audit(path)
        assert report["ok"], report["problems"]
        assert report["xi_hat"] <= report["declared_xi"] + 1e-9

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"schema": 1}', encoding="utf-8")
        with pytest.raises(ValueError):
            cmd_audit(path)
