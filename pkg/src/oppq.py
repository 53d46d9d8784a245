"""
OPPQ：最优分阶段参数化 Q 学习

相比 PPQ 增加了四件事：
- 参数化为向量集合 θ，V_θ 取所有 w^(h) 上的最大值，因此单调不减
- 外层循环用大批量 m 估计参考值 P_K V_{θ^(i,0)} 及其方差
- 内层循环用小批量 m₁ 只估计偏移 P_K (V_{θ^(i,j−1)} − V_{θ^(i,0)})
- 经验 Bernstein 置信半径，估计值先下移再截断（shift-and-clip），保证高概率低估

锚点是必需的：特征需为概率分布，锚点行为单位向量。
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .instances import AnchorSet
from .mdp_core import (
    DiscountedMdp,
    FeatureMap,
    KnownModel,
    StackedDecoder,
    StackedParams,
    bellman_apply_policy,
)
from .oracle import DEFAULT_TOL, ExactSolution, solve_optimal
from .sampling import SampleOracle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OppqConfig:
    """ε、δ 以及各个常数；所有常数都会写进结果元数据"""

    epsilon: float
    delta: float
    c_m: float = 1.0
    c_m1: float = 1.0
    c_outer: float = 2.0
    c_inner: float = 2.0
    c_rp: float = 1.5
    c_r: float = 1.5

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0,1), got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0,1), got {self.delta}")
        for name in ("c_m", "c_m1", "c_outer", "c_inner", "c_rp", "c_r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def plan(self, n_features: int, discount: float) -> "OppqPlan":
        """
        由 (ε, δ, K, γ) 推出迭代次数与批量大小

        ln(R′RK/δ) 在 R′、R 确定之后计算，不做不动点迭代。
        """
        if not 0.0 < discount < 1.0:
            raise ValueError(f"discount must lie in (0,1), got {discount}")
        horizon = 1.0 - discount
        outer = max(1, math.ceil(self.c_rp * math.log(1.0 / (self.epsilon * horizon))))
        inner = max(1, math.ceil(self.c_r * outer / horizon))
        log_term = math.log(outer * inner * n_features / self.delta)
        m = math.ceil(self.c_m * log_term ** (4.0 / 3.0) / (self.epsilon**2 * horizon**3))
        m1 = math.ceil(self.c_m1 * log_term / horizon**2)
        return OppqPlan(
            outer_iterations=outer,
            inner_iterations=inner,
            m=m,
            m1=m1,
            log_term=log_term,
            discount=discount,
            c_outer=self.c_outer,
            c_inner=self.c_inner,
        )

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "c_m": self.c_m,
            "c_m1": self.c_m1,
            "c_outer": self.c_outer,
            "c_inner": self.c_inner,
            "c_rp": self.c_rp,
            "c_r": self.c_r,
        }


@dataclass(frozen=True)
class OppqPlan:
    """
    实际执行的迭代计划

    outer_iterations 为 R′（外层共 R′+1 次），inner_iterations 为 R，
    m / m1 为外层 / 内层每个锚点的批量大小。
    """

    outer_iterations: int
    inner_iterations: int
    m: int
    m1: int
    log_term: float
    discount: float
    c_outer: float = 2.0
    c_inner: float = 2.0

    def __post_init__(self) -> None:
        if self.outer_iterations < 1 or self.inner_iterations < 1:
            raise ValueError(
                f"iteration counts must be >= 1, got R'={self.outer_iterations}, R={self.inner_iterations}"
            )
        if self.m1 < 1:
            raise ValueError(f"inner batch size m1 must be >= 1, got {self.m1}")
        if self.m < self.m1:
            raise ValueError(f"outer batch m={self.m} must not be smaller than inner batch m1={self.m1}")
        if self.log_term <= 0:
            raise ValueError(f"log term must be positive, got {self.log_term}")

    @property
    def v_max(self) -> float:
        return 1.0 / (1.0 - self.discount)

    def total_samples(self, n_features: int) -> int:
        """K·(R′+1)·m + K·(R′+1)·R·m₁"""
        outer = self.outer_iterations + 1
        return n_features * outer * self.m + n_features * outer * self.inner_iterations * self.m1

    def outer_radius(self, sigma: np.ndarray) -> np.ndarray:
        m = self.m
        return self.c_outer * (
            np.sqrt(self.log_term * sigma / m) + self.log_term / ((1.0 - self.discount) * m**0.75)
        )

    def inner_radius(self, i: int) -> float:
        return self.c_inner * 2.0 ** (-i) * math.sqrt(self.log_term / self.m1) / (1.0 - self.discount)

    def to_dict(self) -> dict:
        return {
            "R_prime": self.outer_iterations,
            "R": self.inner_iterations,
            "m": self.m,
            "m1": self.m1,
            "log_term": self.log_term,
        }


@dataclass(frozen=True, eq=False)
class IterState:
    """
    一次 (i, j) 迭代的估计量

    w 为原始均值，eps 为置信半径，w_bar = clamp(w − eps, 0, 1/(1−γ))；
    z 与 sigma 只在外层 (j = 0) 存在。values 仅在记录模式下保存 V_θ 快照。
    """

    i: int
    j: int
    w: np.ndarray
    eps: np.ndarray
    w_bar: np.ndarray
    z: np.ndarray | None = None
    sigma: np.ndarray | None = None
    values: np.ndarray | None = field(default=None, repr=False)

    def trace_record(self, samples: int, wall_time: float) -> dict:
        return {
            "i": self.i,
            "j": self.j,
            "w_bar_min": float(self.w_bar.min()),
            "w_bar_max": float(self.w_bar.max()),
            "eps_max": float(self.eps.max()),
            "samples_so_far": samples,
            "wall_time": wall_time,
        }


@dataclass
class OppqTrace:
    """逐 (i,j) 的轨迹；记录模式下另外保存全部 IterState 与每个外层的参考值"""

    records: list[dict] = field(default_factory=list)
    states: list[IterState] = field(default_factory=list)
    reference_values: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class OppqResult:
    theta: StackedParams
    plan: OppqPlan
    samples_used: int
    clip_ok: bool
    trace: OppqTrace = field(repr=False)


def _shift_and_clip(w: np.ndarray, eps: np.ndarray, v_max: float) -> np.ndarray:
    return np.clip(w - eps, 0.0, v_max)


def _anchor_pairs(anchors: AnchorSet, n_actions: int) -> list[tuple[int, int]]:
    return [divmod(row, n_actions) for row in anchors.indices]


def outer_reference(
    gm: SampleOracle,
    decoder: StackedDecoder,
    anchors: AnchorSet,
    plan: OppqPlan,
    i: int,
) -> IterState:
    """外层估计：每个锚点 m 个样本，估计 P_K V_θ、P_K V_θ² 与方差"""
    values = decoder.values()
    K = anchors.size
    w = np.empty(K)
    z = np.empty(K)
    sigma = np.empty(K)
    for k, (s, a) in enumerate(_anchor_pairs(anchors, decoder.mdp.n_actions)):
        x = values[gm.sample_next(s, a, plan.m, stream=(i, 0, k))]
        # 以第一个样本为中心计算，样本全相同时方差恰为 0
        d = x - x[0]
        w[k] = x[0] + d.mean()
        sigma[k] = max(float((d * d).mean() - d.mean() ** 2), 0.0)
        z[k] = sigma[k] + w[k] * w[k]
    eps = plan.outer_radius(sigma)
    return IterState(i=i, j=0, w=w, eps=eps, w_bar=_shift_and_clip(w, eps, plan.v_max), z=z, sigma=sigma)


def inner_update(
    gm: SampleOracle,
    decoder: StackedDecoder,
    ref_values: np.ndarray,
    ref_state: IterState,
    anchors: AnchorSet,
    plan: OppqPlan,
    i: int,
    j: int,
) -> IterState:
    """
    内层更新：每个锚点 m₁ 个样本，只估计偏移 P_K (V_{θ^(i,j−1)} − V_{θ^(i,0)})

    decoder 持有 θ^(i,j−1)，ref_values 为 V_{θ^(i,0)}；w̄ 会被追加进 θ。
    """
    if j < 1:
        raise ValueError(f"inner iteration index must be >= 1, got {j}")
    if ref_state.j != 0 or ref_state.i != i:
        raise ValueError("ref_state must be the outer state of the same outer iteration")
    diff = decoder.values() - ref_values
    K = anchors.size
    w = np.empty(K)
    for k, (s, a) in enumerate(_anchor_pairs(anchors, decoder.mdp.n_actions)):
        x = gm.sample_next(s, a, plan.m1, stream=(i, j, k))
        w[k] = diff[x].mean() + ref_state.w[k]
    eps = ref_state.eps + plan.inner_radius(i)
    w_bar = _shift_and_clip(w, eps, plan.v_max)
    decoder.append(w_bar, (i, j))
    return IterState(i=i, j=j, w=w, eps=eps, w_bar=w_bar)


def oppq_learn(
    gm: SampleOracle,
    features: FeatureMap,
    rewards: np.ndarray,
    discount: float,
    anchors: AnchorSet,
    cfg: OppqConfig,
    *,
    plan: OppqPlan | None = None,
    record: bool = False,
) -> OppqResult:
    """
    运行 R′+1 次外层迭代，每次一个外层估计加 R 次内层更新

    θ 初始化为 {0}；外层 w̄ 只用作参考，不进入 θ。
    record=True 时保存所有 IterState、V_θ 快照与每个外层的参考值。
    """
    if not features.stochastic:
        raise ValueError("OPPQ requires stochastic features")
    if not anchors.anchored:
        raise ValueError("OPPQ requires an anchored representative set")
    known = KnownModel(rewards, features, discount)
    K = features.n_features
    if anchors.size != K:
        raise ValueError(f"anchor set has {anchors.size} rows, expected K = {K}")
    plan = plan or cfg.plan(K, discount)

    decoder = StackedDecoder(known, features, StackedParams.zero(K))
    trace = OppqTrace()
    start_count = gm.sample_count()
    started = time.perf_counter()
    clip_ok = True
    logger.debug("[oppq] K=%d plan=%s", K, plan.to_dict())

    def _log(state: IterState) -> None:
        nonlocal clip_ok
        clip_ok = clip_ok and bool(state.w_bar.min() >= 0.0 and state.w_bar.max() <= plan.v_max)
        trace.records.append(
            state.trace_record(gm.sample_count() - start_count, time.perf_counter() - started)
        )
        if record:
            trace.states.append(
                IterState(
                    i=state.i,
                    j=state.j,
                    w=state.w,
                    eps=state.eps,
                    w_bar=state.w_bar,
                    z=state.z,
                    sigma=state.sigma,
                    values=decoder.values(),
                )
            )

    for i in range(plan.outer_iterations + 1):
        ref_values = decoder.values()
        if record:
            trace.reference_values.append(ref_values.copy())
        ref_state = outer_reference(gm, decoder, anchors, plan, i)
        _log(ref_state)
        for j in range(1, plan.inner_iterations + 1):
            _log(inner_update(gm, decoder, ref_values, ref_state, anchors, plan, i, j))
        logger.debug("[oppq] outer i=%d samples=%d", i, gm.sample_count() - start_count)

    samples_used = gm.sample_count() - start_count
    return OppqResult(
        theta=decoder.theta,
        plan=plan,
        samples_used=samples_used,
        clip_ok=clip_ok,
        trace=trace,
    )


@dataclass(frozen=True)
class MonotonicityReport:
    """
    holds：V_θ ≤ T_{π_θ} V_θ 且 V_θ ≤ v* + tol
    worst_gap：两项中最大的违反量，正数表示违反
    """

    holds: bool
    worst_gap: float
    bellman_gap: float
    optimality_gap: float
    bellman_ok: bool
    below_optimal: bool

    def to_dict(self) -> dict:
        return {
            "holds": self.holds,
            "worst_gap": self.worst_gap,
            "bellman_gap": self.bellman_gap,
            "optimality_gap": self.optimality_gap,
            "bellman_ok": self.bellman_ok,
            "below_optimal": self.below_optimal,
        }


def monotonicity_audit(
    mdp: DiscountedMdp,
    features: FeatureMap,
    theta: StackedParams,
    tol: float = DEFAULT_TOL,
    solution: ExactSolution | None = None,
) -> MonotonicityReport:
    """逐点检查 V_θ ≤ T_{π_θ}V_θ 与 V_θ ≤ v* + tol（需要真实 MDP，只用于评估）"""
    if solution is None:
        solution = solve_optimal(mdp, tol)
    decoder = StackedDecoder(mdp, features, theta)
    v = decoder.values()
    pi = decoder.policy()
    # T_π V 与 V 的比较允许浮点舍入
    bellman_gap = float((v - bellman_apply_policy(mdp, v, pi)).max())
    optimality_gap = float((v - solution.v_star - tol).max())
    bellman_ok = bellman_gap <= 1e-12 * max(1.0, float(np.abs(v).max()))
    below_optimal = optimality_gap <= 0.0
    return MonotonicityReport(
        holds=bellman_ok and below_optimal,
        worst_gap=max(bellman_gap, optimality_gap),
        bellman_gap=bellman_gap,
        optimality_gap=optimality_gap,
        bellman_ok=bellman_ok,
        below_optimal=below_optimal,
    )
