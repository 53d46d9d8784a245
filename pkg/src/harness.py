"""
实验编排

读取 JSON 实验描述，生成实例、调用精确求解器、并行运行试验，
输出逐试验 CSV、扫描聚合 CSV 与 JSON 汇总。

约定：
- 第 t 个试验的种子为 base_seed + t
- 输出按试验下标排序，与完成顺序无关
- 任何试验抛出的异常都记为失败行，运行继续；success_rate 的分母包含失败试验
- CSV 只含可复现的数值列，耗时写在 JSON 汇总的 timing 中
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .codec import cached_solution, dumps, read_instance, write_instance
from .instances import (
    Instance,
    NOISE_SEED_OFFSET,
    derive_instance,
    find_anchors,
    make_lower_bound_instance,
    make_random_linear_mdp,
    make_random_tabular_mdp,
    make_soft_aggregation_mdp,
    make_two_state_mdp,
    perturb_kernel,
)
from .mdp_core import StackedDecoder, StackedParams, basic_q, factorization_residual
from .oppq import OppqConfig, monotonicity_audit, oppq_learn
from .oracle import DEFAULT_TOL, ExactSolution, fit_linear_model, policy_error, solve_optimal, total_variance_bound
from .ppq import PpqConfig, ppq_learn
from .sampling import GenerativeModel

logger = logging.getLogger(__name__)

CSV_SCHEMA = "#schema=1"
GENERATORS = ("random_linear", "soft_aggregation", "lower_bound", "two_state")
SWEEP_AXES = ("N", "epsilon", "gamma", "xi")


def _require(data: dict, key: str, where: str):
    if key not in data:
        raise ValueError(f"{where}.{key} is required")
    return data[key]


# ---------------------------------------------------------------------------
# 实验描述
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceSpec:
    """
    实例描述：生成器名与尺寸，或已有实例文件的路径

    lower_bound 生成器中 n_states / n_actions 指内层 MDP 的 S′ / A′。
    """

    generator: str = "random_linear"
    n_states: int = 20
    n_actions: int = 3
    n_features: int = 4
    discount: float = 0.9
    seed: int = 0
    anchored: bool = True
    density: float = 0.5
    identity_aggregation: bool = False
    xi: float = 0.0
    path: str | None = None
    name: str | None = None

    def __post_init__(self) -> None:
        if self.path is not None:
            return
        if self.generator not in GENERATORS:
            raise ValueError(f"instance.generator must be one of {GENERATORS}, got {self.generator!r}")
        for key in ("n_states", "n_actions", "n_features"):
            if getattr(self, key) < 1:
                raise ValueError(f"instance.{key} must be positive, got {getattr(self, key)}")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"instance.discount must lie in (0,1), got {self.discount}")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"instance.xi must lie in [0,1], got {self.xi}")
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"instance.density must lie in (0,1], got {self.density}")

    @classmethod
    def from_dict(cls, data: dict) -> "InstanceSpec":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"instance has unknown fields {sorted(unknown)}")
        return cls(**data)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.path:
            return Path(self.path).stem
        return f"{self.generator}-S{self.n_states}-A{self.n_actions}-K{self.n_features}-g{self.discount}-s{self.seed}"


@dataclass(frozen=True)
class AlgorithmSpec:
    """算法名 + 对应配置；未给出的常数取默认值"""

    name: str
    total_samples: int | None = None
    rounds_coefficient: float = 4.0
    epsilon: float | None = None
    delta: float = 0.1
    constants: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.name not in LEARNERS:
            raise ValueError(f"algorithm.name must be one of {sorted(LEARNERS)}, got {self.name!r}")
        if self.name == "ppq" and self.total_samples is None:
            raise ValueError("algorithm.total_samples is required for ppq")
        if self.name == "oppq" and self.epsilon is None:
            raise ValueError("algorithm.epsilon is required for oppq")

    @classmethod
    def from_dict(cls, data: dict) -> "AlgorithmSpec":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"algorithm has unknown fields {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"sweep.axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if len(self.values) == 0:
            raise ValueError("sweep.values must not be empty")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    instance: InstanceSpec
    algorithm: AlgorithmSpec
    trials: int = 1
    base_seed: int = 0
    output: str | None = None
    oracle_tol: float = DEFAULT_TOL
    success_epsilon: float | None = None
    target_error: float | None = None
    sweep: SweepSpec | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("name must not be empty")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.oracle_tol <= 0:
            raise ValueError(f"oracle_tol must be positive, got {self.oracle_tol}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise ValueError("experiment spec must be a JSON object")
        sweep = data.get("sweep")
        return cls(
            name=str(_require(data, "name", "spec")),
            instance=InstanceSpec.from_dict(_require(data, "instance", "spec")),
            algorithm=AlgorithmSpec.from_dict(_require(data, "algorithm", "spec")),
            trials=int(data.get("trials", 1)),
            base_seed=int(data.get("base_seed", 0)),
            output=data.get("output"),
            oracle_tol=float(data.get("oracle_tol", DEFAULT_TOL)),
            success_epsilon=data.get("success_epsilon"),
            target_error=data.get("target_error"),
            sweep=(
                SweepSpec(axis=_require(sweep, "axis", "sweep"), values=tuple(_require(sweep, "values", "sweep")))
                if sweep is not None
                else None
            ),
        )

    @property
    def success_threshold(self) -> float:
        if self.success_epsilon is not None:
            return float(self.success_epsilon)
        if self.algorithm.epsilon is not None:
            return float(self.algorithm.epsilon)
        return 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def load_spec(path: Path) -> ExperimentSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ValueError(f"spec file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"spec file {path} is not valid JSON: {e}") from e
    return ExperimentSpec.from_dict(data)


# ---------------------------------------------------------------------------
# 实例构造
# ---------------------------------------------------------------------------


def build_instance(spec: InstanceSpec) -> Instance:
    """按生成器名构造实例；xi > 0 时再扰动转移核"""
    if spec.path is not None:
        return read_instance(Path(spec.path))

    S, A, K, gamma, seed = spec.n_states, spec.n_actions, spec.n_features, spec.discount, spec.seed
    params: dict = {"n_states": S, "n_actions": A, "discount": gamma}
    if spec.generator == "random_linear":
        lm, anchors = make_random_linear_mdp(S, A, K, gamma, seed, anchored=spec.anchored, density=spec.density)
        params.update(n_features=K, anchored=spec.anchored, density=spec.density)
    elif spec.generator == "soft_aggregation":
        lm, anchors = make_soft_aggregation_mdp(S, A, K, gamma, seed, identity_aggregation=spec.identity_aggregation)
        params.update(n_features=K, identity_aggregation=spec.identity_aggregation)
    elif spec.generator == "lower_bound":
        lm, anchors, _ = make_lower_bound_instance(make_random_tabular_mdp(S, A, gamma, seed))
        params.update(n_features=lm.features.n_features)
    else:
        lm, anchors = make_two_state_mdp(gamma)

    mdp = lm.mdp
    if spec.xi > 0:
        params["noise_seed"] = seed + NOISE_SEED_OFFSET
        mdp = perturb_kernel(lm, spec.xi, params["noise_seed"])
    return Instance(
        linear=lm,
        anchors=anchors,
        mdp=mdp,
        name=spec.label,
        generator=spec.generator,
        seed=seed,
        params=params,
        xi=spec.xi,
    )


# ---------------------------------------------------------------------------
# 学习器
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LearnOutcome:
    policy: np.ndarray
    theta: StackedParams
    samples_used: int
    expected_samples: int
    clip_ok: bool
    realized: dict


class Learner(Protocol):
    """学习算法接口：给定生成模型与实例（只读 r、φ、γ、锚点），返回策略"""

    def learn(self, gm: GenerativeModel, instance: Instance) -> LearnOutcome:
        """运行一次学习"""

    def metadata(self) -> dict:
        """写进结果的全部配置常数"""


@dataclass(frozen=True)
class PpqLearner:
    cfg: PpqConfig

    @classmethod
    def from_spec(cls, spec: AlgorithmSpec) -> "PpqLearner":
        return cls(PpqConfig(total_samples=int(spec.total_samples), rounds_coefficient=spec.rounds_coefficient))

    def learn(self, gm: GenerativeModel, instance: Instance) -> LearnOutcome:
        lm = instance.linear
        result = ppq_learn(gm, lm.features, lm.mdp.rewards, lm.mdp.discount, instance.anchors, self.cfg)
        policy = np.argmax(basic_q(lm.known, lm.features, result.params), axis=1).astype(np.int64)
        return LearnOutcome(
            policy=policy,
            theta=StackedParams(ws=(result.params.w,), origins=((0, 0),)),
            samples_used=result.samples_used,
            expected_samples=result.expected_samples,
            clip_ok=result.clip_ok,
            realized={"R": result.rounds, "n": result.per_round},
        )

    def metadata(self) -> dict:
        return {"algorithm": "ppq", **self.cfg.to_dict()}


@dataclass(frozen=True)
class OppqLearner:
    cfg: OppqConfig

    @classmethod
    def from_spec(cls, spec: AlgorithmSpec) -> "OppqLearner":
        return cls(OppqConfig(epsilon=float(spec.epsilon), delta=spec.delta, **spec.constants))

    def learn(self, gm: GenerativeModel, instance: Instance) -> LearnOutcome:
        lm = instance.linear
        result = oppq_learn(gm, lm.features, lm.mdp.rewards, lm.mdp.discount, instance.anchors, self.cfg)
        policy = StackedDecoder(lm.known, lm.features, result.theta).policy()
        return LearnOutcome(
            policy=policy,
            theta=result.theta,
            samples_used=result.samples_used,
            expected_samples=result.plan.total_samples(lm.features.n_features),
            clip_ok=result.clip_ok,
            realized={**result.plan.to_dict(), "Z": result.theta.size},
        )

    def metadata(self) -> dict:
        return {"algorithm": "oppq", **self.cfg.to_dict()}


LEARNERS: dict[str, Callable[[AlgorithmSpec], Learner]] = {
    "ppq": PpqLearner.from_spec,
    "oppq": OppqLearner.from_spec,
}


def make_learner(spec: AlgorithmSpec) -> Learner:
    return LEARNERS[spec.name](spec)


# ---------------------------------------------------------------------------
# 试验
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    seed: int
    status: str
    samples_used: int = 0
    expected_samples: int = 0
    policy_error: float = math.nan
    monotone_ok: bool = False
    underestimate_ok: bool = False
    clip_ok: bool = False
    realized: dict = field(default_factory=dict)
    error: str = ""
    axis_value: float | None = None
    wall_time_ms: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def csv_row(self) -> dict:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "axis_value": "" if self.axis_value is None else repr(self.axis_value),
            "status": self.status,
            "samples_used": self.samples_used,
            "expected_samples": self.expected_samples,
            "policy_error": repr(self.policy_error),
            "monotone_ok": int(self.monotone_ok),
            "underestimate_ok": int(self.underestimate_ok),
            "clip_ok": int(self.clip_ok),
            "realized": json.dumps(self.realized, sort_keys=True),
            "error": self.error,
        }


TRIAL_COLUMNS = list(TrialRecord(trial=0, seed=0, status="").csv_row())


@dataclass(frozen=True, eq=False)
class TrialTask:
    """一个试验所需的全部输入；整体可被 pickle 送进 worker 进程"""

    trial: int
    seed: int
    instance: Instance
    solution: ExactSolution
    algorithm: AlgorithmSpec
    oracle_tol: float
    axis_value: float | None = None


def run_trial(task: TrialTask) -> TrialRecord:
    """运行单个试验并用精确解打分；异常转成失败记录"""
    started = time.perf_counter()
    try:
        learner = make_learner(task.algorithm)
        gm = GenerativeModel(task.instance.mdp, seed=task.seed)
        outcome = learner.learn(gm, task.instance)
        if outcome.samples_used != outcome.expected_samples:
            raise RuntimeError(
                f"sample audit failed: used {outcome.samples_used}, expected {outcome.expected_samples}"
            )
        error = policy_error(task.instance.mdp, outcome.policy, task.oracle_tol, solution=task.solution)
        audit = monotonicity_audit(
            task.instance.mdp, task.instance.features, outcome.theta, task.oracle_tol, solution=task.solution
        )
        elapsed = (time.perf_counter() - started) * 1000.0
        logger.info("[harness] trial %d done (%.0fms) error=%.4f", task.trial, elapsed, error)
        return TrialRecord(
            trial=task.trial,
            seed=task.seed,
            status="ok",
            samples_used=outcome.samples_used,
            expected_samples=outcome.expected_samples,
            policy_error=error,
            monotone_ok=audit.bellman_ok,
            underestimate_ok=audit.below_optimal,
            clip_ok=outcome.clip_ok,
            realized=outcome.realized,
            axis_value=task.axis_value,
            wall_time_ms=elapsed,
        )
    except Exception as e:  # noqa: BLE001
        logger.warning("[harness] trial %d failed: %s\n%s", task.trial, e, traceback.format_exc())
        return TrialRecord(
            trial=task.trial,
            seed=task.seed,
            status="failed",
            error=f"{type(e).__name__}: {e}",
            axis_value=task.axis_value,
            wall_time_ms=(time.perf_counter() - started) * 1000.0,
        )


def run_trials(tasks: list[TrialTask], workers: int = 1) -> list[TrialRecord]:
    """workers > 1 时用进程池；结果按任务顺序返回"""
    if workers <= 1 or len(tasks) <= 1:
        return [run_trial(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_trial, tasks))


# ---------------------------------------------------------------------------
# 汇总
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    trials: int
    failures: int
    median_error: float
    p10_error: float
    p90_error: float
    success_rate: float
    total_samples: int
    median_samples: float

    def csv_row(self) -> dict:
        return {k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}


def summarize(records: list[TrialRecord], success_epsilon: float) -> dict:
    """中位数 / p10 / p90 误差、ε 成功率（失败试验计入分母）"""
    errors = np.array([r.policy_error for r in records if r.ok], dtype=np.float64)
    samples = np.array([r.samples_used for r in records if r.ok], dtype=np.float64)
    successes = sum(1 for r in records if r.ok and r.policy_error <= success_epsilon)

    def pct(q: float) -> float:
        return float(np.percentile(errors, q)) if errors.size else math.nan

    return {
        "trials": len(records),
        "failures": sum(1 for r in records if not r.ok),
        "median_error": pct(50),
        "p10_error": pct(10),
        "p90_error": pct(90),
        "success_rate": successes / len(records) if records else math.nan,
        "success_epsilon": success_epsilon,
        "total_samples": int(samples.sum()),
        "median_samples": float(np.median(samples)) if samples.size else math.nan,
        "monotone_rate": sum(1 for r in records if r.ok and r.monotone_ok) / len(records) if records else math.nan,
        "underestimate_rate": (
            sum(1 for r in records if r.ok and r.underestimate_ok) / len(records) if records else math.nan
        ),
    }


def fit_loglog_slope(xs: list[float], ys: list[float]) -> float | None:
    """log y 对 log x 的最小二乘斜率；只使用 y > 0 的点，不足两点返回 None"""
    pairs = [(x, y) for x, y in zip(xs, ys) if x > 0 and y > 0 and math.isfinite(y)]
    if len(pairs) < 2:
        return None
    lx = np.log([p[0] for p in pairs])
    ly = np.log([p[1] for p in pairs])
    slope, _ = np.polyfit(lx, ly, 1)
    return float(slope)


def sweep_summary(axis: str, rows: list[SweepRow], target_error: float | None) -> dict:
    values = [r.value for r in rows]
    out: dict = {"axis": axis, "rows": [asdict(r) for r in rows]}
    if axis == "N":
        out["error_slope"] = fit_loglog_slope(values, [r.median_error for r in rows])
    if axis == "gamma":
        horizons = [1.0 / (1.0 - g) for g in values]
        out["samples_exponent"] = fit_loglog_slope(horizons, [r.median_samples for r in rows])
    if target_error is not None:
        reached = next((r for r in rows if r.median_error <= target_error), None)
        out["target_error"] = target_error
        out["first_reaching_target"] = None if reached is None else reached.value
        out["samples_at_target"] = None if reached is None else reached.median_samples
    return out


def write_trials_csv(records: list[TrialRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        f.write(CSV_SCHEMA + "\n")
        writer = csv.DictWriter(f, fieldnames=TRIAL_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow(r.csv_row())
    return path


def write_sweep_csv(rows: list[SweepRow], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        f.write(CSV_SCHEMA + "\n")
        writer = csv.DictWriter(f, fieldnames=list(rows[0].csv_row()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.csv_row())
    return path


def _timing(records: list[TrialRecord]) -> dict:
    return {"wall_time_ms": [r.wall_time_ms for r in records]}


# ---------------------------------------------------------------------------
# 命令
# ---------------------------------------------------------------------------


def _out_dir(spec: ExperimentSpec, out: Path | None) -> Path:
    if out is not None:
        return Path(out)
    return Path(spec.output) if spec.output else Path("out")


def _instance_path(out_dir: Path, instance_spec: InstanceSpec) -> Path:
    if instance_spec.path is not None:
        return Path(instance_spec.path)
    return out_dir / f"{instance_spec.label}.json"


def prepare_instance(
    instance_spec: InstanceSpec, out_dir: Path, tol: float = DEFAULT_TOL
) -> tuple[Instance, Path, ExactSolution]:
    """生成（或读取）实例文件，并保证精确解缓存存在"""
    path = _instance_path(out_dir, instance_spec)
    try:
        instance = build_instance(instance_spec)
    except ValueError as e:
        raise ValueError(f"instance {instance_spec.label!r}: {e}") from e
    if instance_spec.path is None:
        write_instance(instance, path)
    solution = cached_solution(instance, path, tol)
    return instance, path, solution


def cmd_generate(spec: ExperimentSpec, out: Path | None = None) -> Path:
    """写出实例文件与精确解缓存；同一描述重复执行得到逐字节相同的文件"""
    out_dir = _out_dir(spec, out)
    _, path, _ = prepare_instance(spec.instance, out_dir, spec.oracle_tol)
    logger.info("[harness] instance written to %s", path)
    return path


def cmd_solve_exact(spec: ExperimentSpec, out: Path | None = None) -> ExactSolution:
    out_dir = _out_dir(spec, out)
    instance, path, solution = prepare_instance(spec.instance, out_dir, spec.oracle_tol)
    logger.info(
        "[harness] %s: v* in [%.6f, %.6f], residual %.3e",
        path.name,
        float(solution.v_star.min()),
        float(solution.v_star.max()),
        solution.residual,
    )
    return solution


def _tasks(
    spec: ExperimentSpec,
    instance: Instance,
    solution: ExactSolution,
    algorithm: AlgorithmSpec,
    axis_value: float | None = None,
) -> list[TrialTask]:
    return [
        TrialTask(
            trial=t,
            seed=spec.base_seed + t,
            instance=instance,
            solution=solution,
            algorithm=algorithm,
            oracle_tol=spec.oracle_tol,
            axis_value=axis_value,
        )
        for t in range(spec.trials)
    ]


def cmd_run(spec: ExperimentSpec, out: Path | None = None, workers: int = 1) -> dict:
    """运行 trials 个独立试验，写出 <name>.trials.csv 与 <name>.summary.json"""
    out_dir = _out_dir(spec, out)
    instance, path, solution = prepare_instance(spec.instance, out_dir, spec.oracle_tol)
    learner = make_learner(spec.algorithm)
    logger.info("[harness] run %s: %d trials on %s", spec.name, spec.trials, path.name)

    records = run_trials(_tasks(spec, instance, solution, spec.algorithm), workers)
    write_trials_csv(records, out_dir / f"{spec.name}.trials.csv")
    summary = {
        "spec": spec.to_dict(),
        "learner": learner.metadata(),
        "instance_file": str(path),
        **summarize(records, spec.success_threshold),
        "timing": _timing(records),
    }
    (out_dir / f"{spec.name}.summary.json").write_text(dumps(summary), encoding="utf-8")
    return summary


def _axis_point(spec: ExperimentSpec, value: float) -> tuple[InstanceSpec, AlgorithmSpec]:
    axis = spec.sweep.axis
    inst, alg = spec.instance, spec.algorithm
    if axis == "N":
        return inst, replace(alg, total_samples=int(value))
    if axis == "epsilon":
        return inst, replace(alg, epsilon=float(value))
    if axis == "gamma":
        return replace(inst, discount=float(value), name=f"{inst.label}-gamma{value}"), alg
    return replace(inst, xi=float(value), name=f"{inst.label}-xi{value}"), alg


def _derived_file_instance(spec: ExperimentSpec, value: float, out_dir: Path) -> tuple[Instance, ExactSolution]:
    """文件实例沿 gamma / xi 轴扫描：读入后换折扣或扰动，另存为 <stem>-<axis><value>.json"""
    axis = spec.sweep.axis
    base = read_instance(Path(spec.instance.path))
    name = f"{spec.instance.label}-{axis}{value}"
    try:
        if axis == "gamma":
            instance = derive_instance(base, name, discount=float(value))
        else:
            instance = derive_instance(base, name, xi=float(value))
    except ValueError as e:
        raise ValueError(f"instance {name!r}: {e}") from e
    path = write_instance(instance, out_dir / f"{name}.json")
    return instance, cached_solution(instance, path, spec.oracle_tol)


def cmd_sweep(spec: ExperimentSpec, out: Path | None = None, workers: int = 1) -> dict:
    """
    沿一个轴扫描：每个轴取值运行 trials 个试验

    写出逐试验 CSV、每个轴取值一行的聚合 CSV 与 JSON 汇总。
    """
    if spec.sweep is None:
        raise ValueError("sweep command needs a sweep section in the experiment file")
    out_dir = _out_dir(spec, out)

    tasks: list[TrialTask] = []
    for value in spec.sweep.values:
        inst_spec, alg_spec = _axis_point(spec, value)
        if inst_spec.path is not None and spec.sweep.axis in ("gamma", "xi"):
            instance, solution = _derived_file_instance(spec, value, out_dir)
        else:
            instance, _, solution = prepare_instance(inst_spec, out_dir, spec.oracle_tol)
        tasks.extend(_tasks(spec, instance, solution, alg_spec, axis_value=float(value)))

    records = run_trials(tasks, workers)
    rows: list[SweepRow] = []
    for value in spec.sweep.values:
        point = [r for r in records if r.axis_value == float(value)]
        stats = summarize(point, spec.success_threshold)
        rows.append(
            SweepRow(
                axis=spec.sweep.axis,
                value=float(value),
                trials=stats["trials"],
                failures=stats["failures"],
                median_error=stats["median_error"],
                p10_error=stats["p10_error"],
                p90_error=stats["p90_error"],
                success_rate=stats["success_rate"],
                total_samples=stats["total_samples"],
                median_samples=stats["median_samples"],
            )
        )
        logger.info("[harness] %s=%s median error %.4f", spec.sweep.axis, value, stats["median_error"])

    write_trials_csv(records, out_dir / f"{spec.name}.trials.csv")
    write_sweep_csv(rows, out_dir / f"{spec.name}.sweep.csv")
    summary = {
        "spec": spec.to_dict(),
        "learner": make_learner(spec.algorithm).metadata(),
        **sweep_summary(spec.sweep.axis, rows, spec.target_error),
        "timing": _timing(records),
    }
    (out_dir / f"{spec.name}.summary.json").write_text(dumps(summary), encoding="utf-8")
    return summary


def cmd_audit(instance_path: Path, tol: float = DEFAULT_TOL) -> dict:
    """
    重新校验实例文件

    加载时的结构校验失败抛 ValueError；其余检查结果写入报告，ok 为总结论。
    """
    instance = read_instance(Path(instance_path))
    lm = instance.linear
    residual = factorization_residual(lm.mdp.transitions, lm.features.values, lm.psi)
    _, xi_hat = fit_linear_model(instance.mdp, lm.features, instance.anchors)
    solution = solve_optimal(instance.mdp, tol)
    report = {
        "instance": str(instance_path),
        "n_states": lm.mdp.n_states,
        "n_actions": lm.mdp.n_actions,
        "n_features": lm.features.n_features,
        "discount": lm.mdp.discount,
        "L": instance.anchors.L,
        "anchored": instance.anchors.anchored,
        "factorization_residual": residual,
        "declared_xi": instance.xi,
        "xi_hat": xi_hat,
        "total_variance_ratio": total_variance_bound(instance.mdp, solution),
        "problems": [],
    }
    if instance.xi == 0.0 and xi_hat > 1e-8:
        report["problems"].append(f"exact instance has model mismatch {xi_hat:.3e}")
    if instance.xi > 0.0 and xi_hat > instance.xi + 1e-9:
        report["problems"].append(f"fitted mismatch {xi_hat:.3e} exceeds declared xi {instance.xi}")
    if instance.anchors.anchored:
        try:
            found = find_anchors(lm.features)
            if sorted(found.indices) != sorted(instance.anchors.indices):
                # 重复的特征行可能让顶点代表落在别的行上
                same = np.allclose(
                    np.sort(lm.features.values[list(found.indices)], axis=0),
                    np.sort(lm.features.values[list(instance.anchors.indices)], axis=0),
                )
                if not same:
                    report["problems"].append("declared anchors differ from the convex-hull vertices")
        except ValueError as e:
            report["problems"].append(f"anchor check failed: {e}")
    report["ok"] = not report["problems"]
    return report
