"""
JSON 读写：实例文件与精确解缓存

实例文件只保存 (r, Φ, Ψ, γ) 与元数据，转移矩阵在加载时由 Φ·Ψ 重建；
扰动实例额外保存 {xi, seed}，加载时重新推出扰动后的核。
同一实例总是序列化为逐字节相同的文本（键排序、浮点数按 repr 写出）。
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .instances import (
    AnchorSet,
    AnchorsNotFound,
    Instance,
    anchor_set,
    find_anchors,
    perturb_kernel,
    select_representative_set,
)
from .mdp_core import ROW_SUM_TOL, FeatureMap, LinearMdp
from .oracle import DEFAULT_TOL, ExactSolution, solve_optimal

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def instance_to_dict(instance: Instance) -> dict:
    lm = instance.linear
    data = {
        "schema": SCHEMA_VERSION,
        "n_states": lm.mdp.n_states,
        "n_actions": lm.mdp.n_actions,
        "discount": lm.mdp.discount,
        "rewards": lm.mdp.rewards.tolist(),
        "features": lm.features.values.tolist(),
        "stochastic_features": lm.features.stochastic,
        "psi": lm.psi.tolist(),
        "anchors": {
            "indices": list(instance.anchors.indices),
            "anchored": instance.anchors.anchored,
        },
        "metadata": {
            "name": instance.name,
            "generator": instance.generator,
            "seed": instance.seed,
            "params": instance.params,
        },
    }
    if instance.xi > 0:
        data["mixing"] = {"xi": instance.xi, "seed": instance.params["noise_seed"]}
    return data


def _stochastic_flag(data: dict) -> bool:
    """没有 stochastic_features 字段时按数值判断：非负且每行和为 1"""
    if "stochastic_features" in data:
        return bool(data["stochastic_features"])
    values = np.asarray(data["features"], dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        return False
    return bool(values.min() >= 0.0 and np.abs(values.sum(axis=1) - 1.0).max() <= ROW_SUM_TOL)


def _anchors(features: FeatureMap, stored: dict | None) -> AnchorSet:
    """读取保存的代表集；缺省时在随机特征上找锚点，找不到再退回列主元 QR"""
    if stored is not None:
        return anchor_set(features, stored["indices"], anchored=bool(stored["anchored"]))
    if features.stochastic:
        try:
            return find_anchors(features)
        except AnchorsNotFound as e:
            logger.info("[codec] no anchors (%s), using a representative set", e)
    return select_representative_set(features)


def instance_from_dict(data: dict) -> Instance:
    if data.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported instance schema {data.get('schema')!r}")
    try:
        features = FeatureMap(data["features"], stochastic=_stochastic_flag(data))
        lm = LinearMdp.from_factors(data["rewards"], features, data["psi"], data["discount"])
        if (lm.mdp.n_states, lm.mdp.n_actions) != (data["n_states"], data["n_actions"]):
            raise ValueError("n_states / n_actions disagree with the reward matrix")
        anchors = _anchors(features, data.get("anchors"))
        meta = data["metadata"]
    except KeyError as e:
        raise ValueError(f"instance file is missing field {e.args[0]!r}") from e

    mixing = data.get("mixing")
    xi = float(mixing["xi"]) if mixing else 0.0
    mdp = perturb_kernel(lm, xi, int(mixing["seed"])) if mixing else lm.mdp
    return Instance(
        linear=lm,
        anchors=anchors,
        mdp=mdp,
        name=str(meta.get("name", "")),
        generator=str(meta.get("generator", "")),
        seed=int(meta.get("seed", 0)),
        params=dict(meta.get("params", {})),
        xi=xi,
    )


def dumps(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=1) + "\n"


def write_instance(instance: Instance, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(instance_to_dict(instance)), encoding="utf-8")
    return path


def read_instance(path: Path) -> Instance:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ValueError(f"instance file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"instance file {path} is not valid JSON: {e}") from e
    return instance_from_dict(data)


def instance_hash(instance: Instance) -> str:
    return hashlib.sha256(dumps(instance_to_dict(instance)).encode("utf-8")).hexdigest()


def solution_path(instance_path: Path) -> Path:
    """<name>.json → <name>.solution.json"""
    instance_path = Path(instance_path)
    return instance_path.with_name(f"{instance_path.stem}.solution.json")


def write_solution(instance: Instance, solution: ExactSolution, path: Path) -> Path:
    payload = {"instance_sha256": instance_hash(instance), **solution.to_dict()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload), encoding="utf-8")
    return path


def load_solution(instance: Instance, path: Path, tol: float = DEFAULT_TOL) -> ExactSolution | None:
    """缓存命中（实例哈希与 tol 都一致）时返回精确解，否则返回 None"""
    path = Path(path)
    if not path.exists():
        return None
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("instance_sha256") != instance_hash(instance) or float(data.get("tol", -1)) != tol:
        logger.info("[cache] stale solution cache %s", path)
        return None
    return ExactSolution.from_dict(data)


def cached_solution(instance: Instance, instance_path: Path, tol: float = DEFAULT_TOL) -> ExactSolution:
    """读取缓存的精确解；没有或已过期时重新求解并写回"""
    path = solution_path(instance_path)
    solution = load_solution(instance, path, tol)
    if solution is None:
        solution = solve_optimal(instance.mdp, tol)
        write_solution(instance, solution, path)
        logger.info("[cache] wrote %s", path)
    return solution
