"""
精确求解（oracle）

提供真值计算，用于给学到的策略打分以及检验命题和引理：
- 最优价值 v*、Q*、π*（价值迭代）
- 策略评估（线性方程求解 / 迭代两条路径）
- 方差函数 σ_{s,a}[V]
- 线性可实现性检查：Q^π ∈ Span(r, φ)、Bellman 闭包残差、ξ 估计
- 全方差界 ‖(I − γP^{π*})^{-1} √σ_{v*}‖∞ 的比值
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg

from .mdp_core import (
    DiscountedMdp,
    FeatureMap,
    bellman_apply,
    policy_rows,
    q_values,
)

if TYPE_CHECKING:  # pragma: no cover
    from .instances import AnchorSet

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
MAX_ITERATIONS = 1_000_000


class OracleError(RuntimeError):
    """精确求解失败（例如迭代上限内未收敛）"""

    def __init__(self, message: str, *, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True, eq=False)
class ExactSolution:
    """v*, Q*, π* 以及最终残差 ‖T v − v‖∞"""

    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: np.ndarray
    residual: float
    tol: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "v_star": self.v_star.tolist(),
            "q_star": self.q_star.tolist(),
            "pi_star": self.pi_star.tolist(),
            "residual": self.residual,
            "tol": self.tol,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExactSolution":
        return cls(
            v_star=np.asarray(data["v_star"], dtype=np.float64),
            q_star=np.asarray(data["q_star"], dtype=np.float64),
            pi_star=np.asarray(data["pi_star"], dtype=np.int64),
            residual=float(data["residual"]),
            tol=float(data["tol"]),
            iterations=int(data.get("iterations", 0)),
        )


def solve_optimal(mdp: DiscountedMdp, tol: float = DEFAULT_TOL, max_iterations: int = MAX_ITERATIONS) -> ExactSolution:
    """
    从 v = 0 开始做价值迭代

    停止条件 ‖T v − v‖∞ ≤ tol·(1−γ)/(2γ)，保证 ‖v − v*‖∞ ≤ tol。
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    gamma = mdp.discount
    threshold = tol * (1.0 - gamma) / (2.0 * gamma)

    v = np.zeros(mdp.n_states)
    residual = np.inf
    for iteration in range(1, max_iterations + 1):
        tv = bellman_apply(mdp, v)
        residual = float(np.abs(tv - v).max())
        v = tv
        if residual <= threshold:
            break
    else:
        raise OracleError(
            f"value iteration did not converge in {max_iterations} iterations",
            diagnostics={"residual": residual, "threshold": threshold, "discount": gamma},
        )

    q = q_values(mdp, v)
    pi = np.argmax(q, axis=1).astype(np.int64)
    final_residual = float(np.abs(q.max(axis=1) - v).max())
    logger.debug("[oracle] value iteration converged after %d sweeps (residual %.3e)", iteration, final_residual)
    return ExactSolution(v_star=v, q_star=q, pi_star=pi, residual=final_residual, tol=tol, iterations=iteration)


def _policy_system(mdp: DiscountedMdp, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = policy_rows(mdp, pi)
    p_pi = mdp.transitions[rows]
    r_pi = mdp.rewards[np.arange(mdp.n_states), np.asarray(pi)]
    return p_pi, r_pi


def evaluate_policy(
    mdp: DiscountedMdp,
    pi: np.ndarray,
    tol: float = DEFAULT_TOL,
    method: str = "solve",
) -> np.ndarray:
    """
    求解 v = T_π v

    method="solve"：直接解 (I − γP^π) v = r^π
    method="iterate"：迭代到 ‖v − v^π‖∞ ≤ tol
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    p_pi, r_pi = _policy_system(mdp, pi)
    gamma = mdp.discount

    if method == "solve":
        system = np.eye(mdp.n_states) - gamma * p_pi
        try:
            return scipy.linalg.solve(system, r_pi)
        except scipy.linalg.LinAlgError as e:
            raise OracleError(f"policy evaluation system is singular: {e}") from e

    if method == "iterate":
        threshold = tol * (1.0 - gamma) / (2.0 * gamma)
        v = np.zeros(mdp.n_states)
        for _ in range(MAX_ITERATIONS):
            nv = r_pi + gamma * (p_pi @ v)
            done = float(np.abs(nv - v).max()) <= threshold
            v = nv
            if done:
                return v
        raise OracleError("policy evaluation did not converge", diagnostics={"discount": gamma})

    raise ValueError(f"unknown policy evaluation method {method!r}")


def policy_error(
    mdp: DiscountedMdp,
    pi: np.ndarray,
    tol: float = DEFAULT_TOL,
    solution: ExactSolution | None = None,
) -> float:
    """‖v* − v^π‖∞ 形式的次优性（截断到 0）"""
    if solution is None:
        solution = solve_optimal(mdp, tol)
    v_pi = evaluate_policy(mdp, pi, tol)
    return max(float((solution.v_star - v_pi).max()), 0.0)


def variance_function(mdp: DiscountedMdp, v: np.ndarray) -> np.ndarray:
    """σ_{s,a}[v] = P v² − (P v)²，形状 S×A，负的舍入误差截断为 0"""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mdp.n_states,) or not np.all(np.isfinite(v)):
        raise ValueError(f"value vector must be finite with length {mdp.n_states}")
    mean = mdp.transitions @ v
    second = mdp.transitions @ (v * v)
    sigma = np.maximum(second - mean * mean, 0.0)
    return sigma.reshape(mdp.n_states, mdp.n_actions)


def _projection_residual(basis: np.ndarray, target: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return float(np.abs(target - basis @ coef).max())


def check_span(
    mdp: DiscountedMdp,
    features: FeatureMap,
    pi: np.ndarray,
    tol: float = DEFAULT_TOL,
) -> float:
    """Q^π ≈ r + Φc 的最小二乘残差（max 范数）"""
    v_pi = evaluate_policy(mdp, pi, tol)
    q_pi = q_values(mdp, v_pi).reshape(-1)
    return _projection_residual(features.values, q_pi - mdp.rewards.reshape(-1))


def bellman_closure_residual(mdp: DiscountedMdp, features: FeatureMap, q: np.ndarray) -> float:
    """
    T q 在 Span(r, φ) 上的投影残差（ℓ∞）

    对 q ∈ Span(r, φ) 取上确界即为 F = Span(r, φ) 的 Bellman 误差。
    """
    q = np.asarray(q, dtype=np.float64).reshape(mdp.n_states, mdp.n_actions)
    tq = q_values(mdp, q.max(axis=1)).reshape(-1)
    basis = np.column_stack([mdp.rewards.reshape(-1), features.values])
    return _projection_residual(basis, tq)


def _max_tv(transitions: np.ndarray, features: np.ndarray, psi: np.ndarray) -> float:
    return float(0.5 * np.abs(transitions - features @ psi).sum(axis=1).max())


def fit_linear_model(
    mdp: DiscountedMdp,
    features: FeatureMap,
    anchors: "AnchorSet | None" = None,
) -> tuple[np.ndarray, float]:
    """
    由 P 与 Φ 拟合 Ψ̂，返回 (Ψ̂, ξ̂)

    ξ̂ = max_{s,a} ‖P(·|s,a) − φ(s,a)ᵀΨ̂‖_TV 是真实 ξ 的上界，而非精确的最小值。
    给定锚点时同时尝试 Ψ̂ = P_K，取较小者。
    """
    phi = features.values
    rank = np.linalg.matrix_rank(phi)
    if rank < features.n_features:
        raise ValueError(
            f"features are rank deficient: rank {rank} < K = {features.n_features}"
        )
    psi_hat, *_ = np.linalg.lstsq(phi, mdp.transitions, rcond=None)
    xi_hat = _max_tv(mdp.transitions, phi, psi_hat)

    if anchors is not None:
        psi_anchor = scipy.linalg.solve(anchors.phi_K, mdp.transitions[list(anchors.indices)])
        xi_anchor = _max_tv(mdp.transitions, phi, psi_anchor)
        if xi_anchor < xi_hat:
            psi_hat, xi_hat = psi_anchor, xi_anchor
    return psi_hat, xi_hat


def total_variance_bound(mdp: DiscountedMdp, solution: ExactSolution) -> float:
    """
    ‖(I − γP^{π*})^{-1} √σ_{v*}(·, π*)‖∞ 与 (1−γ)^{-3/2} 的比值

    全方差定律保证这个比值是 O(1)。
    """
    pi = solution.pi_star
    sigma = variance_function(mdp, solution.v_star)[np.arange(mdp.n_states), pi]
    p_pi, _ = _policy_system(mdp, pi)
    x = scipy.linalg.solve(np.eye(mdp.n_states) - mdp.discount * p_pi, np.sqrt(sigma))
    return float(np.abs(x).max() * (1.0 - mdp.discount) ** 1.5)
