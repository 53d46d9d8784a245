"""
生成模型（generative model）

对任意 (s,a) 返回 P(·|s,a) 的独立样本，并精确统计总采样数 N。

随机数使用计数器型的 Philox 生成器：
- 主流：同一 (seed, 查询序列) 得到完全相同的样本
- 派生流：按 (i, j, k) 之类的键派生独立子流，结果与调度顺序无关
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .mdp_core import DiscountedMdp

DEFAULT_SEED = 20240601


class SampleOracle(Protocol):
    """学习算法对采样器的全部要求"""

    def sample_next(
        self, s: int, a: int, n: int, stream: tuple[int, ...] | None = None
    ) -> np.ndarray:
        """返回 n 个来自 P(·|s,a) 的下一状态"""

    def sample_count(self) -> int:
        """目前为止的总采样数"""


def _philox(seed: int, key: tuple[int, ...] = ()) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(eq=False)
class GenerativeModel:
    """
    带种子的生成模型

    samples_used 恰好等于构造以来的下一状态抽样次数。
    一个实例只属于一个 worker；并行试验各自用试验种子构造自己的实例。
    """

    mdp: DiscountedMdp
    seed: int = DEFAULT_SEED
    samples_used: int = 0
    _cdf: dict[int, np.ndarray] = field(default_factory=dict, init=False, repr=False)
    _rng: np.random.Generator = field(init=False, repr=False)
    _streams: dict[tuple[int, ...], np.random.Generator] = field(
        default_factory=dict, init=False, repr=False
    )

    def __post_init__(self) -> None:
        self._rng = _philox(self.seed)

    def _cumulative(self, row: int) -> np.ndarray:
        cdf = self._cdf.get(row)
        if cdf is None:
            cdf = np.cumsum(self.mdp.transitions[row])
            # 归一化后最后一项恰为 1.0，零概率的尾部状态不会被抽到
            cdf = cdf / cdf[-1]
            self._cdf[row] = cdf
        return cdf

    def _generator(self, stream: tuple[int, ...] | None) -> np.random.Generator:
        if stream is None:
            return self._rng
        key = tuple(int(k) for k in stream)
        rng = self._streams.get(key)
        if rng is None:
            rng = _philox(self.seed, key)
            self._streams[key] = rng
        return rng

    def sample_next(
        self, s: int, a: int, n: int, stream: tuple[int, ...] | None = None
    ) -> np.ndarray:
        """逆 CDF 抽取 n 个 i.i.d. 下一状态；samples_used 恰好增加 n"""
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        row = self.mdp.row(s, a)
        u = self._generator(stream).random(int(n))
        draws = np.searchsorted(self._cumulative(row), u, side="right").astype(np.int64)
        self.samples_used += int(n)
        return draws

    def sample_count(self) -> int:
        return self.samples_used


def sample_next(
    gm: SampleOracle, s: int, a: int, n: int, stream: tuple[int, ...] | None = None
) -> np.ndarray:
    return gm.sample_next(s, a, n, stream)


def sample_count(gm: SampleOracle) -> int:
    return gm.sample_count()
