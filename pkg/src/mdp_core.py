"""
MDP 核心数据模型

折扣 MDP、线性转移特征表示、Bellman 算子，以及参数到价值/策略的解码器。

编码约定：
- 状态 0..S-1，动作 0..A-1，(s,a) 对应的行号为 s·A + a
- 所有矩阵为行主序稠密 float64
- 动作平局一律取最小下标
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-12
FACTOR_TOL = 1e-10


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DiscountedMdp:
    """折扣 MDP M = (S, A, P, r, γ)"""

    n_states: int
    n_actions: int
    rewards: np.ndarray
    transitions: np.ndarray
    discount: float

    def __post_init__(self) -> None:
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError(
                f"n_states and n_actions must be positive, got {self.n_states}, {self.n_actions}"
            )
        if not (0.0 < self.discount < 1.0):
            raise ValueError(f"discount must lie in (0,1), got {self.discount}")

        rewards = _frozen(self.rewards)
        transitions = _frozen(self.transitions)
        S, A = self.n_states, self.n_actions
        if rewards.shape != (S, A):
            raise ValueError(f"rewards must have shape ({S}, {A}), got {rewards.shape}")
        if transitions.shape != (S * A, S):
            raise ValueError(f"transitions must have shape ({S * A}, {S}), got {transitions.shape}")
        if not np.all(np.isfinite(rewards)) or rewards.min() < 0.0 or rewards.max() > 1.0:
            raise ValueError("rewards must lie in [0, 1]")
        if transitions.min() < 0.0:
            raise ValueError(f"transitions has a negative entry ({transitions.min():.3e})")
        row_err = np.abs(transitions.sum(axis=1) - 1.0).max()
        if row_err > ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1 (worst deviation {row_err:.3e})")

        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "transitions", transitions)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    def row(self, s: int, a: int) -> int:
        """(s,a) 的行号"""
        if not (0 <= s < self.n_states and 0 <= a < self.n_actions):
            raise ValueError(f"invalid state-action pair ({s}, {a})")
        return s * self.n_actions + a

    def with_transitions(self, transitions: np.ndarray) -> "DiscountedMdp":
        return DiscountedMdp(self.n_states, self.n_actions, self.rewards, transitions, self.discount)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """特征矩阵 Φ，第 (s·A+a) 行为 φ(s,a)"""

    values: np.ndarray
    stochastic: bool = False

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[1] < 1:
            raise ValueError(f"feature values must be a 2-d matrix with K >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")
        if self.stochastic:
            if values.min() < 0.0:
                raise ValueError("stochastic features must be entrywise nonnegative")
            row_err = np.abs(values.sum(axis=1) - 1.0).max()
            if row_err > ROW_SUM_TOL:
                raise ValueError(f"stochastic feature rows must sum to 1 (worst deviation {row_err:.3e})")
        object.__setattr__(self, "values", values)

    @property
    def n_features(self) -> int:
        return int(self.values.shape[1])

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class LinearMdp:
    """满足 P = Φ·Ψ 的 MDP（线性转移特征表示）"""

    mdp: DiscountedMdp
    features: FeatureMap
    psi: np.ndarray

    def __post_init__(self) -> None:
        psi = _frozen(self.psi)
        K = self.features.n_features
        if self.features.n_rows != self.mdp.n_pairs:
            raise ValueError(
                f"features have {self.features.n_rows} rows, expected S*A = {self.mdp.n_pairs}"
            )
        if psi.shape != (K, self.mdp.n_states):
            raise ValueError(f"psi must have shape ({K}, {self.mdp.n_states}), got {psi.shape}")
        residual = factorization_residual(self.mdp.transitions, self.features.values, psi)
        if residual > FACTOR_TOL:
            raise ValueError(f"transitions differ from features @ psi by {residual:.3e}")
        object.__setattr__(self, "psi", psi)

    @classmethod
    def from_factors(
        cls,
        rewards: np.ndarray,
        features: FeatureMap,
        psi: np.ndarray,
        discount: float,
    ) -> "LinearMdp":
        """由 (r, Φ, Ψ, γ) 构造，转移矩阵由 Φ·Ψ 推出"""
        rewards = np.asarray(rewards, dtype=np.float64)
        S, A = rewards.shape
        transitions = features.values @ np.asarray(psi, dtype=np.float64)
        # Φ·Ψ 的行和只在浮点误差内为 1
        transitions = np.where(np.abs(transitions) < 1e-15, 0.0, transitions)
        mdp = DiscountedMdp(S, A, rewards, transitions, discount)
        return cls(mdp=mdp, features=features, psi=psi)

    @property
    def is_soft_aggregation(self) -> bool:
        """φ 与 ψ_k 都是概率分布时即为软状态聚合模型"""
        psi_stochastic = bool(
            self.psi.min() >= 0.0 and np.abs(self.psi.sum(axis=1) - 1.0).max() <= ROW_SUM_TOL
        )
        return self.features.stochastic and psi_stochastic

    @property
    def known(self) -> "KnownModel":
        return KnownModel(self.mdp.rewards, self.features, self.mdp.discount)


@dataclass(frozen=True, eq=False)
class KnownModel:
    """
    学习者已知的部分：r、φ、γ

    不含转移矩阵 P；解码器只需要这些字段，学习算法只能通过生成模型接触 P。
    """

    rewards: np.ndarray
    features: FeatureMap
    discount: float

    def __post_init__(self) -> None:
        rewards = _frozen(self.rewards)
        if rewards.ndim != 2:
            raise ValueError(f"rewards must be an S x A matrix, got shape {rewards.shape}")
        if rewards.size != self.features.n_rows:
            raise ValueError(
                f"features have {self.features.n_rows} rows, expected S*A = {rewards.size}"
            )
        if not (0.0 < self.discount < 1.0):
            raise ValueError(f"discount must lie in (0,1), got {self.discount}")
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.rewards.shape[1])

    @property
    def n_pairs(self) -> int:
        return int(self.rewards.size)

    @property
    def v_max(self) -> float:
        return 1.0 / (1.0 - self.discount)


def factorization_residual(transitions: np.ndarray, features: np.ndarray, psi: np.ndarray) -> float:
    """‖P − ΦΨ‖_max"""
    return float(np.abs(np.asarray(transitions) - np.asarray(features) @ np.asarray(psi)).max())


@dataclass(frozen=True, eq=False)
class BasicParams:
    """PPQ 的参数 w ∈ R^K"""

    w: np.ndarray

    def __post_init__(self) -> None:
        w = _frozen(self.w).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("parameter vector must be finite")
        object.__setattr__(self, "w", w)

    @classmethod
    def zero(cls, n_features: int) -> "BasicParams":
        return cls(np.zeros(n_features))


@dataclass(frozen=True, eq=False)
class StackedParams:
    """OPPQ 的参数集合 θ = {w^(h)}，每个向量带有 (outer, inner) 来源下标"""

    ws: tuple[np.ndarray, ...] = ()
    origins: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if len(self.ws) != len(self.origins):
            raise ValueError("every stacked vector needs exactly one origin index")
        ws = tuple(_frozen(w).reshape(-1) for w in self.ws)
        if ws and len({w.shape for w in ws}) != 1:
            raise ValueError("stacked vectors must share one length K")
        object.__setattr__(self, "ws", ws)
        object.__setattr__(self, "origins", tuple((int(i), int(j)) for i, j in self.origins))

    @classmethod
    def zero(cls, n_features: int) -> "StackedParams":
        """初始 θ = {0}"""
        return cls(ws=(np.zeros(n_features),), origins=((0, 0),))

    @property
    def size(self) -> int:
        """实际的 Z"""
        return len(self.ws)

    def append(self, w: np.ndarray, origin: tuple[int, int]) -> "StackedParams":
        """返回追加了 w 的新集合，原有元素保持不变"""
        return StackedParams(ws=self.ws + (w,), origins=self.origins + (origin,))

    def to_dict(self) -> dict:
        return {
            "ws": [w.tolist() for w in self.ws],
            "origins": [list(o) for o in self.origins],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StackedParams":
        return cls(
            ws=tuple(np.asarray(w, dtype=np.float64) for w in data["ws"]),
            origins=tuple((int(i), int(j)) for i, j in data["origins"]),
        )


# ---------------------------------------------------------------------------
# Bellman 算子
# ---------------------------------------------------------------------------


def _check_value(mdp: DiscountedMdp, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"value vector must have length {mdp.n_states}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("value vector must be finite")
    return v


def _check_policy(mdp: DiscountedMdp, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi)
    if pi.shape != (mdp.n_states,):
        raise ValueError(f"policy must have length {mdp.n_states}, got shape {pi.shape}")
    if not np.issubdtype(pi.dtype, np.integer):
        raise ValueError("policy entries must be integer action indices")
    if pi.min() < 0 or pi.max() >= mdp.n_actions:
        raise ValueError(f"policy action out of range [0, {mdp.n_actions})")
    return pi.astype(np.int64)


def q_values(mdp: DiscountedMdp, v: np.ndarray) -> np.ndarray:
    """Q(s,a) = r(s,a) + γ P(·|s,a)ᵀ v，形状 S×A"""
    v = _check_value(mdp, v)
    return mdp.rewards + mdp.discount * (mdp.transitions @ v).reshape(mdp.n_states, mdp.n_actions)


def bellman_apply(mdp: DiscountedMdp, v: np.ndarray) -> np.ndarray:
    """最优 Bellman 算子 T v"""
    return q_values(mdp, v).max(axis=1)


def greedy_policy(mdp: DiscountedMdp, v: np.ndarray) -> np.ndarray:
    """关于 v 的贪心策略（平局取最小动作下标）"""
    return np.argmax(q_values(mdp, v), axis=1).astype(np.int64)


def policy_rows(mdp: DiscountedMdp, pi: np.ndarray) -> np.ndarray:
    pi = _check_policy(mdp, pi)
    return np.arange(mdp.n_states) * mdp.n_actions + pi


def bellman_apply_policy(mdp: DiscountedMdp, v: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """策略 Bellman 算子 T_π v"""
    v = _check_value(mdp, v)
    rows = policy_rows(mdp, pi)
    states = np.arange(mdp.n_states)
    return mdp.rewards[states, np.asarray(pi)] + mdp.discount * (mdp.transitions[rows] @ v)


# ---------------------------------------------------------------------------
# 参数解码
# ---------------------------------------------------------------------------


def _check_features(mdp: DiscountedMdp | KnownModel, features: FeatureMap, w: np.ndarray) -> np.ndarray:
    if features.n_rows != mdp.n_pairs:
        raise ValueError(f"features have {features.n_rows} rows, expected {mdp.n_pairs}")
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape != (features.n_features,):
        raise ValueError(f"parameter must have length {features.n_features}, got {w.shape}")
    return w


def basic_q(mdp: DiscountedMdp | KnownModel, features: FeatureMap, w: BasicParams | np.ndarray) -> np.ndarray:
    """Q_w(s,a) = r(s,a) + γ φ(s,a)ᵀ w，形状 S×A"""
    vec = w.w if isinstance(w, BasicParams) else w
    vec = _check_features(mdp, features, vec)
    return mdp.rewards + mdp.discount * (features.values @ vec).reshape(mdp.n_states, mdp.n_actions)


def decode_basic(
    mdp: DiscountedMdp,
    features: FeatureMap,
    w: BasicParams | np.ndarray,
    s: int,
) -> tuple[float, int]:
    """返回 (V_w(s), π_w(s))"""
    if not 0 <= s < mdp.n_states:
        raise ValueError(f"state {s} out of range")
    q = basic_q(mdp, features, w)[s]
    a = int(np.argmax(q))
    return float(q[a]), a


def decode_stacked(
    mdp: DiscountedMdp,
    features: FeatureMap,
    theta: StackedParams,
    s: int,
) -> tuple[float, int]:
    """
    返回 (V_θ(s), π_θ(s))

    V_θ(s) = max_h max_a [r(s,a) + γ φ(s,a)ᵀ w^(h)]；平局先取最小 h，再取最小动作。
    """
    if theta.size == 0:
        raise ValueError("theta must contain at least one parameter vector")
    if not 0 <= s < mdp.n_states:
        raise ValueError(f"state {s} out of range")
    rows = slice(s * mdp.n_actions, (s + 1) * mdp.n_actions)
    phi_s = features.values[rows]
    best_value, best_action = -np.inf, 0
    for w in theta.ws:
        q = mdp.rewards[s] + mdp.discount * (phi_s @ _check_features(mdp, features, w))
        a = int(np.argmax(q))
        if q[a] > best_value:
            best_value, best_action = float(q[a]), a
    return best_value, best_action


@dataclass(eq=False)
class StackedDecoder:
    """
    θ 的增量解码器

    维护所有 h 上的逐点最大 Q 以及取到最大值的最小 h，
    追加一个向量只需 O(S·A·K)。
    """

    mdp: DiscountedMdp | KnownModel
    features: FeatureMap
    theta: StackedParams
    _q_max: np.ndarray = field(init=False, repr=False)
    _h_arg: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.theta.size == 0:
            raise ValueError("theta must contain at least one parameter vector")
        S, A = self.mdp.n_states, self.mdp.n_actions
        self._q_max = np.full((S, A), -np.inf)
        self._h_arg = np.zeros((S, A), dtype=np.int64)
        for h, w in enumerate(self.theta.ws):
            self._absorb(w, h)

    def _absorb(self, w: np.ndarray, h: int) -> None:
        q = basic_q(self.mdp, self.features, w)
        better = q > self._q_max
        self._q_max = np.where(better, q, self._q_max)
        self._h_arg = np.where(better, h, self._h_arg)

    def append(self, w: np.ndarray, origin: tuple[int, int]) -> None:
        self.theta = self.theta.append(w, origin)
        self._absorb(self.theta.ws[-1], self.theta.size - 1)

    def q_max(self) -> np.ndarray:
        return self._q_max.copy()

    def values(self) -> np.ndarray:
        """V_θ，长度 S"""
        return self._q_max.max(axis=1)

    def policy(self) -> np.ndarray:
        """π_θ，平局按 (最小 h, 最小动作)"""
        A = self.mdp.n_actions
        best = self._q_max.max(axis=1, keepdims=True)
        key = self._h_arg * A + np.arange(A)[None, :]
        key = np.where(self._q_max == best, key, np.iinfo(np.int64).max)
        return (np.argmin(key, axis=1) % A).astype(np.int64)


def product_features(state_features: np.ndarray, action_features: np.ndarray) -> FeatureMap:
    """
    由状态特征 φ₁(s) 和动作特征 φ₂(a) 构造联合特征 φ(s,a) = φ₁(s) ⊗ φ₂(a)

    两个因子都是概率分布时，乘积特征也是概率分布。
    """
    phi_s = np.asarray(state_features, dtype=np.float64)
    phi_a = np.asarray(action_features, dtype=np.float64)
    if phi_s.ndim != 2 or phi_a.ndim != 2:
        raise ValueError("state and action features must be 2-d matrices")
    S, K1 = phi_s.shape
    A, K2 = phi_a.shape
    values = np.einsum("si,aj->saij", phi_s, phi_a).reshape(S * A, K1 * K2)
    stochastic = bool(
        phi_s.min() >= 0
        and phi_a.min() >= 0
        and np.allclose(phi_s.sum(axis=1), 1.0, atol=ROW_SUM_TOL)
        and np.allclose(phi_a.sum(axis=1), 1.0, atol=ROW_SUM_TOL)
    )
    if stochastic:
        values = values / values.sum(axis=1, keepdims=True)
    return FeatureMap(values, stochastic=stochastic)
