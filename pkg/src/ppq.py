"""
PPQ：分阶段参数化 Q 学习（基础版本）

每一轮在代表集 K 上做一次近似价值迭代：
对每个 (s,a) ∈ K 抽 ⌊N/(K·R)⌋ 个下一状态，求 Π_{[0,1/(1−γ)]}[V_w(s′)] 的均值，
再令 w ← Φ_K^{-1} Q。代表集在所有轮次中保持不变。
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .instances import AnchorSet
from .mdp_core import BasicParams, FeatureMap, KnownModel, basic_q
from .sampling import SampleOracle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpqConfig:
    """N、轮数系数 c_R 与 Φ_K 求解的相对残差容差"""

    total_samples: int
    rounds_coefficient: float = 4.0
    solve_tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.total_samples < 1:
            raise ValueError(f"total_samples must be positive, got {self.total_samples}")
        if self.rounds_coefficient <= 0:
            raise ValueError(f"rounds_coefficient must be positive, got {self.rounds_coefficient}")
        if self.solve_tol <= 0:
            raise ValueError(f"solve_tol must be positive, got {self.solve_tol}")

    def rounds(self, discount: float) -> int:
        """R = ceil(c_R · ln N / (1−γ))，至少 1 轮"""
        R = math.ceil(self.rounds_coefficient * math.log(self.total_samples) / (1.0 - discount))
        return max(R, 1)

    def per_round(self, n_features: int, discount: float) -> int:
        """每个代表对每轮的样本数 ⌊N/(K·R)⌋，余数直接丢弃"""
        n = self.total_samples // (n_features * self.rounds(discount))
        if n == 0:
            raise ValueError(
                f"budget too small for configuration: N={self.total_samples}, "
                f"K={n_features}, R={self.rounds(discount)}"
            )
        return n

    def to_dict(self) -> dict:
        return {
            "total_samples": self.total_samples,
            "rounds_coefficient": self.rounds_coefficient,
            "solve_tol": self.solve_tol,
        }


@dataclass(frozen=True)
class PpqRound:
    round: int
    w_norm: float
    sample_count: int
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "w_norm": self.w_norm,
            "sample_count": self.sample_count,
            "wall_time": self.wall_time,
        }


@dataclass(frozen=True, eq=False)
class PpqResult:
    params: BasicParams
    rounds: int
    per_round: int
    samples_used: int
    trace: tuple[PpqRound, ...] = field(default=(), repr=False)
    clip_ok: bool = True

    @property
    def expected_samples(self) -> int:
        return self.rounds * self.per_round * self.params.w.shape[0]


def ppq_learn(
    gm: SampleOracle,
    features: FeatureMap,
    rewards: np.ndarray,
    discount: float,
    anchors: AnchorSet,
    cfg: PpqConfig,
) -> PpqResult:
    """
    运行 R 轮 PPQ，返回最终参数 w

    anchors 只需要是满足正则性条件的代表集（不要求锚点性质）。
    """
    known = KnownModel(rewards, features, discount)
    K = features.n_features
    if anchors.size != K:
        raise ValueError(f"representative set has {anchors.size} rows, expected K = {K}")

    R = cfg.rounds(discount)
    n = cfg.per_round(K, discount)
    v_max = known.v_max
    lu = scipy.linalg.lu_factor(anchors.phi_K)
    pairs = [divmod(row, known.n_actions) for row in anchors.indices]

    start_count = gm.sample_count()
    started = time.perf_counter()
    w = np.zeros(K)
    clip_ok = True
    trace: list[PpqRound] = []
    logger.debug("[ppq] N=%d K=%d R=%d n=%d", cfg.total_samples, K, R, n)

    for t in range(R):
        v = np.clip(basic_q(known, features, w).max(axis=1), 0.0, v_max)
        q = np.empty(K)
        for k, (s, a) in enumerate(pairs):
            x = gm.sample_next(s, a, n, stream=(t, k))
            q[k] = v[x].mean()
        clip_ok = clip_ok and bool(q.min() >= 0.0 and q.max() <= v_max)

        w = scipy.linalg.lu_solve(lu, q)
        residual = float(np.abs(anchors.phi_K @ w - q).max())
        if residual > cfg.solve_tol * max(1.0, float(np.abs(q).max())):
            raise RuntimeError(f"representative system solve is inaccurate (residual {residual:.3e})")

        trace.append(
            PpqRound(
                round=t + 1,
                w_norm=float(np.abs(w).max()),
                sample_count=gm.sample_count() - start_count,
                wall_time=time.perf_counter() - started,
            )
        )

    samples_used = gm.sample_count() - start_count
    logger.debug("[ppq] done: %d samples in %.3fs", samples_used, time.perf_counter() - started)
    return PpqResult(
        params=BasicParams(w),
        rounds=R,
        per_round=n,
        samples_used=samples_used,
        trace=tuple(trace),
        clip_ok=clip_ok,
    )
