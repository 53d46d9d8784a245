"""
实例构造

生成各类线性转移 MDP，并负责锚点发现与正则性常数计算：
- 带锚点的随机线性 MDP（锚点特征为单位向量，其余为单纯形上的 Dirichlet 点）
- 软状态聚合 MDP（聚合/解聚分布）
- 下界归约实例：把任意表格 MDP 嵌入到 K = |S'||A'| + 1 的特征模型中
- 转移核扰动：总变差不超过 ξ 的近似线性模型
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from .mdp_core import DiscountedMdp, FeatureMap, LinearMdp

logger = logging.getLogger(__name__)

ANCHOR_TOL = 1e-8
SINGULAR_COND = 1e12
NOISE_SEED_OFFSET = 1_000_003


class AnchorsNotFound(ValueError):
    """凸包顶点个数与 K 不符，或顶点无法构成锚点集"""

    def __init__(self, message: str, vertices: list[int]) -> None:
        super().__init__(message)
        self.vertices = vertices


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """
    代表性 (s,a) 集合 K

    indices[k] 是第 k 个代表行的行号，phi_K 为对应的 K×K 特征子矩阵，
    L = max_{(s,a)} ‖φ(s,a)ᵀ Φ_K^{-1}‖₁。anchored 表示所有特征行都是锚点行的凸组合。
    """

    indices: tuple[int, ...]
    phi_K: np.ndarray
    phi_K_inv: np.ndarray
    L: float
    anchored: bool = False
    weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        K = len(self.indices)
        if self.phi_K.shape != (K, K) or self.phi_K_inv.shape != (K, K):
            raise ValueError(f"anchor matrices must be {K}x{K}")
        err = np.abs(self.phi_K @ self.phi_K_inv - np.eye(K)).max()
        if err > 1e-8:
            raise ValueError(f"phi_K_inv is not an inverse of phi_K (error {err:.3e})")

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class LowerBoundEmbedding:
    """下界实例中内层 MDP 的位置：前 S' 个状态、前 A' 个动作"""

    inner_states: int
    inner_actions: int

    @property
    def absorbing_state(self) -> int:
        return self.inner_states

    @property
    def extra_action(self) -> int:
        return self.inner_actions

    def restrict_policy(self, pi: np.ndarray) -> np.ndarray:
        """把外层策略限制到内层 MDP"""
        inner = np.asarray(pi)[: self.inner_states]
        if inner.max(initial=0) >= self.inner_actions:
            raise ValueError("policy uses the extra action on an inner state")
        return inner.astype(np.int64)

    def restrict_values(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v)[: self.inner_states]


@dataclass(frozen=True, eq=False)
class Instance:
    """
    一个实验实例

    linear 是线性转移模型；mdp 是真实 MDP（ξ > 0 时为扰动后的核，否则与 linear.mdp 相同）。
    """

    linear: LinearMdp
    anchors: AnchorSet
    mdp: DiscountedMdp
    name: str
    generator: str
    seed: int
    params: dict = field(default_factory=dict)
    xi: float = 0.0

    @property
    def features(self) -> FeatureMap:
        return self.linear.features


# ---------------------------------------------------------------------------
# 正则性与代表集
# ---------------------------------------------------------------------------


def _anchor_matrix(features: FeatureMap, indices: list[int] | tuple[int, ...]) -> tuple[np.ndarray, float]:
    K = features.n_features
    indices = list(indices)
    if len(indices) != K:
        raise ValueError(f"representative set must contain exactly K = {K} rows, got {len(indices)}")
    if min(indices) < 0 or max(indices) >= features.n_rows:
        raise ValueError("representative row index out of range")
    phi_K = features.values[indices]
    cond = float(np.linalg.cond(phi_K))
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise ValueError(f"Phi_K is singular (condition estimate {cond:.3e})")
    return phi_K, cond


def regularity_profile(features: FeatureMap, indices: list[int] | tuple[int, ...]) -> np.ndarray:
    """每一行的 ‖φ(s,a)ᵀ Φ_K^{-1}‖₁"""
    phi_K, _ = _anchor_matrix(features, indices)
    coords = scipy.linalg.solve(phi_K.T, features.values.T).T
    return np.abs(coords).sum(axis=1)


def regularity_L(features: FeatureMap, indices: list[int] | tuple[int, ...]) -> float:
    """L = max_{(s,a)} ‖φ(s,a)ᵀ Φ_K^{-1}‖₁"""
    return float(regularity_profile(features, indices).max())


def anchor_set(
    features: FeatureMap,
    indices: list[int] | tuple[int, ...],
    anchored: bool = False,
) -> AnchorSet:
    phi_K, _ = _anchor_matrix(features, indices)
    phi_K_inv = scipy.linalg.inv(phi_K)
    weights = features.values @ phi_K_inv if anchored else None
    return AnchorSet(
        indices=tuple(indices),
        phi_K=phi_K,
        phi_K_inv=phi_K_inv,
        L=regularity_L(features, indices),
        anchored=anchored,
        weights=weights,
    )


def select_representative_set(features: FeatureMap) -> AnchorSet:
    """列主元 QR 选出条件数较好的 K 行作为代表集"""
    K = features.n_features
    _, r, piv = scipy.linalg.qr(features.values.T, mode="economic", pivoting=True)
    if abs(r[K - 1, K - 1]) < 1e-12 * max(abs(r[0, 0]), 1.0):
        raise ValueError(f"features have rank < K = {K}; no representative set exists")
    return anchor_set(features, sorted(int(i) for i in piv[:K]))


def _distinct_rows(values: np.ndarray, tol: float) -> np.ndarray:
    """按行序保留代表行：与已保留的某行最大坐标差不超过 tol 的行视为重复"""
    kept: list[int] = []
    for i, row in enumerate(values):
        if not kept or np.abs(values[kept] - row).max(axis=1).min() > tol:
            kept.append(i)
    return np.asarray(kept, dtype=np.int64)


def find_anchors(features: FeatureMap, tol: float = ANCHOR_TOL) -> AnchorSet:
    """
    找出所有特征行凸包的顶点

    对每个（去重后的）行求解可行性问题：它能否表示为其余行的凸组合？
    不能的即为顶点。顶点个数等于 K 时返回锚点集并缓存每行的凸组合权重 λ，
    否则抛出 AnchorsNotFound 并附上顶点列表。
    """
    if not features.stochastic:
        raise ValueError("anchor discovery needs stochastic features")
    values = features.values
    K = features.n_features

    unique_rows = _distinct_rows(values, tol)
    candidates = values[unique_rows]

    vertices: list[int] = []
    for pos, row in enumerate(unique_rows):
        others = np.delete(candidates, pos, axis=0)
        if others.shape[0] == 0:
            vertices.append(int(row))
            continue
        a_eq = np.vstack([others.T, np.ones(others.shape[0])])
        b_eq = np.append(candidates[pos], 1.0)
        res = linprog(
            c=np.zeros(others.shape[0]),
            A_eq=a_eq,
            b_eq=b_eq,
            bounds=(0, None),
            method="highs",
            options={"primal_feasibility_tolerance": tol},
        )
        if res.status == 2:
            vertices.append(int(row))
        elif res.status != 0:
            raise RuntimeError(f"feasibility program for row {row} failed: {res.message}")

    logger.debug("[anchors] %d vertices among %d distinct rows", len(vertices), len(unique_rows))
    if len(vertices) != K:
        raise AnchorsNotFound(
            f"found {len(vertices)} convex-hull vertices, expected K = {K}", vertices
        )
    try:
        anchors = anchor_set(features, vertices, anchored=True)
    except ValueError as e:
        raise AnchorsNotFound(f"vertices do not form an anchor set: {e}", vertices) from e
    if anchors.weights.min() < -tol:
        raise AnchorsNotFound("some rows are not convex combinations of the vertices", vertices)
    return anchors


# ---------------------------------------------------------------------------
# 生成器
# ---------------------------------------------------------------------------


def _check_sizes(S: int, A: int, K: int, gamma: float) -> None:
    if S < 1 or A < 1 or K < 1:
        raise ValueError(f"sizes must be positive, got S={S}, A={A}, K={K}")
    if K > S * A:
        raise ValueError(f"K = {K} exceeds the number of state-action pairs S*A = {S * A}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0,1), got {gamma}")


def _simplex_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.dirichlet(np.ones(dim), size=n)
    return rows / rows.sum(axis=1, keepdims=True)


def _random_psi(rng: np.random.Generator, K: int, S: int, density: float) -> np.ndarray:
    """归一化指数分布，按 density 稀疏化，每行至少 2 个非零（S ≥ 2 时）"""
    weights = rng.exponential(size=(K, S))
    mask = rng.random((K, S)) < density
    need = min(2, S)
    for k in range(K):
        if mask[k].sum() < need:
            mask[k, rng.choice(S, size=need, replace=False)] = True
    weights = np.where(mask, weights, 0.0)
    return weights / weights.sum(axis=1, keepdims=True)


def make_random_linear_mdp(
    S: int,
    A: int,
    K: int,
    gamma: float,
    seed: int,
    anchored: bool = True,
    density: float = 0.5,
) -> tuple[LinearMdp, AnchorSet]:
    """
    随机线性 MDP

    anchored 时随机指定 K 个 (s,a) 行为单位向量（锚点），其余行为 Dirichlet(1,…,1) 点；
    ψ 的每行是 S 上的随机分布，奖励在 [0,1] 上均匀。
    """
    _check_sizes(S, A, K, gamma)
    n = S * A
    if anchored and K > n - K:
        raise ValueError(f"anchored instances need K <= S*A - K, got K={K}, S*A={n}")

    rng = np.random.default_rng(seed)
    phi = _simplex_rows(rng, n, K)
    anchor_rows: list[int] = []
    if anchored:
        anchor_rows = sorted(int(i) for i in rng.choice(n, size=K, replace=False))
        phi[anchor_rows] = 0.0
        for k, row in enumerate(anchor_rows):
            phi[row, k] = 1.0
    psi = _random_psi(rng, K, S, density)
    rewards = rng.random((S, A))

    features = FeatureMap(phi, stochastic=True)
    lm = LinearMdp.from_factors(rewards, features, psi, gamma)
    anchors = anchor_set(features, anchor_rows, anchored=True) if anchored else select_representative_set(features)
    return lm, anchors


def make_soft_aggregation_mdp(
    S: int,
    A: int,
    K: int,
    gamma: float,
    seed: int,
    identity_aggregation: bool = False,
) -> tuple[LinearMdp, AnchorSet]:
    """
    软状态聚合 MDP

    φ(s,a) = q_s · M_a：状态 s 先按聚合分布 q_s 落到 K 个元状态，再经动作相关的
    随机矩阵 M_a 混合；ψ_k 为元状态 k 的解聚分布。
    identity_aggregation（要求 K = S）时 q_s = e_s、ψ = I，退化为无约束的表格核。
    """
    _check_sizes(S, A, K, gamma)
    rng = np.random.default_rng(seed)
    if identity_aggregation:
        if K != S:
            raise ValueError(f"identity aggregation needs K = S, got K={K}, S={S}")
        aggregation = np.eye(S)
    else:
        aggregation = _simplex_rows(rng, S, K)
    mixing = np.stack([_simplex_rows(rng, K, K) for _ in range(A)])
    phi = np.einsum("sk,akj->saj", aggregation, mixing).reshape(S * A, K)
    phi = phi / phi.sum(axis=1, keepdims=True)
    psi = np.eye(S) if identity_aggregation else _simplex_rows(rng, K, S)
    rewards = rng.random((S, A))

    features = FeatureMap(phi, stochastic=True)
    lm = LinearMdp.from_factors(rewards, features, psi, gamma)
    return lm, select_representative_set(features)


def make_lower_bound_instance(inner: DiscountedMdp) -> tuple[LinearMdp, AnchorSet, LowerBoundEmbedding]:
    """
    下界归约实例

    在内层 MDP M' 之外加一个零奖励吸收态 s⁰ 和一个额外动作；
    (s,a) ∈ S'×A' 的特征为 1_k（第 k 个内层对），其余对的特征都是 1_K。
    """
    S1, A1 = inner.n_states, inner.n_actions
    S, A = S1 + 1, A1 + 1
    K = S1 * A1 + 1

    phi = np.zeros((S * A, K))
    anchor_rows: list[int] = []
    for s in range(S):
        for a in range(A):
            row = s * A + a
            if s < S1 and a < A1:
                phi[row, s * A1 + a] = 1.0
                anchor_rows.append(row)
            else:
                phi[row, K - 1] = 1.0
    # 第一个内层之外的对：(0, 额外动作)
    anchor_rows.append(A1)

    psi = np.zeros((K, S))
    psi[: K - 1, :S1] = inner.transitions
    psi[K - 1, S1] = 1.0
    rewards = np.zeros((S, A))
    rewards[:S1, :A1] = inner.rewards

    features = FeatureMap(phi, stochastic=True)
    lm = LinearMdp.from_factors(rewards, features, psi, inner.discount)
    anchors = anchor_set(features, anchor_rows, anchored=True)
    return lm, anchors, LowerBoundEmbedding(inner_states=S1, inner_actions=A1)


def mixing_noise(n_rows: int, n_states: int, seed: int) -> np.ndarray:
    """扰动用的随机分布 U(s,a)，由种子完全确定"""
    return _simplex_rows(np.random.default_rng(seed), n_rows, n_states)


def perturb_kernel(lm: LinearMdp, xi: float, seed: int) -> DiscountedMdp:
    """P_new = (1−ξ)·P + ξ·U，每行与线性模型的总变差不超过 ξ"""
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    if xi == 0.0:
        return lm.mdp
    noise = mixing_noise(lm.mdp.n_pairs, lm.mdp.n_states, seed)
    transitions = (1.0 - xi) * lm.mdp.transitions + xi * noise
    transitions = transitions / transitions.sum(axis=1, keepdims=True)
    return lm.mdp.with_transitions(transitions)


def derive_instance(
    instance: Instance,
    name: str,
    discount: float | None = None,
    xi: float | None = None,
) -> Instance:
    """
    由已有实例换折扣因子或扰动强度得到新实例

    r、Φ、Ψ 与代表集不变；扰动核用实例记录的噪声种子（没有时按实例种子推出）重新生成。
    """
    lm = instance.linear
    if discount is not None:
        lm = LinearMdp.from_factors(lm.mdp.rewards, lm.features, lm.psi, discount)
    xi = instance.xi if xi is None else float(xi)
    params = {**instance.params, "discount": lm.mdp.discount}
    mdp = lm.mdp
    if xi > 0:
        params.setdefault("noise_seed", instance.seed + NOISE_SEED_OFFSET)
        mdp = perturb_kernel(lm, xi, params["noise_seed"])
    else:
        params.pop("noise_seed", None)
    return Instance(
        linear=lm,
        anchors=instance.anchors,
        mdp=mdp,
        name=name,
        generator=instance.generator,
        seed=instance.seed,
        params=params,
        xi=xi,
    )


def make_two_state_mdp(gamma: float = 0.5) -> tuple[LinearMdp, AnchorSet]:
    """
    两状态示例：动作 stay=0 / go=1，只有状态 1 有奖励 1

    go 总是到状态 1，stay 留在原地；特征为每个 (s,a) 的独热向量。
    """
    rewards = np.array([[0.0, 0.0], [1.0, 1.0]])
    transitions = np.array(
        [
            [1.0, 0.0],  # (0, stay)
            [0.0, 1.0],  # (0, go)
            [0.0, 1.0],  # (1, stay)
            [0.0, 1.0],  # (1, go)
        ]
    )
    features = FeatureMap(np.eye(4), stochastic=True)
    lm = LinearMdp.from_factors(rewards, features, transitions, gamma)
    return lm, anchor_set(features, [0, 1, 2, 3], anchored=True)


def one_hot_features(S: int, A: int) -> tuple[FeatureMap, AnchorSet]:
    """每个 (s,a) 一个独热特征，K = S·A，能表示任意转移核"""
    features = FeatureMap(np.eye(S * A), stochastic=True)
    return features, anchor_set(features, list(range(S * A)), anchored=True)


def make_random_tabular_mdp(S: int, A: int, gamma: float, seed: int) -> DiscountedMdp:
    """随机表格 MDP，转移行为 Dirichlet 分布"""
    _check_sizes(S, A, 1, gamma)
    rng = np.random.default_rng(seed)
    transitions = _simplex_rows(rng, S * A, S)
    rewards = rng.random((S, A))
    return DiscountedMdp(S, A, rewards, transitions, gamma)


def with_one_hot_features(mdp: DiscountedMdp) -> LinearMdp:
    """把任意表格 MDP 看作 K = S·A 的线性模型"""
    features, _ = one_hot_features(mdp.n_states, mdp.n_actions)
    return LinearMdp(mdp=mdp, features=features, psi=mdp.transitions)
