"""
Streaming Moments
=================

Mergeable mean/variance accumulators for Monte Carlo reductions
"""

from typing import Tuple

import numpy as np


class RunningMoments:
    """
    Count, mean and sum of squared deviations over a stream of blocks

    Blocks are reduced with numpy's pairwise summation and combined with the
    parallel update of Chan et al., so the result depends only on the order in
    which blocks are merged.
    """

    def __init__(self, shape: Tuple[int, ...] = ()):
        """
        Initialize an empty accumulator

        Args:
            shape: Shape of one observation (one entry per grid point)
        """
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    @classmethod
    def from_block(cls, block: np.ndarray) -> "RunningMoments":
        """Moments of a block whose first axis indexes observations"""
        block = np.asarray(block, dtype=float)
        acc = cls(block.shape[1:])
        acc.count = block.shape[0]
        if acc.count:
            acc.mean = block.mean(axis=0)
            acc.m2 = ((block - acc.mean) ** 2).sum(axis=0)
        return acc

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        """Fold another accumulator into this one and return self"""
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / total)
        self.count = total
        return self

    def update(self, block: np.ndarray) -> "RunningMoments":
        return self.merge(RunningMoments.from_block(block))

    def variance(self, ddof: int = 1) -> np.ndarray:
        if self.count - ddof <= 0:
            return np.full_like(self.mean, np.nan)
        return self.m2 / (self.count - ddof)

    def std(self, ddof: int = 1) -> np.ndarray:
        return np.sqrt(self.variance(ddof))

    def standard_error(self) -> np.ndarray:
        return self.std() / np.sqrt(max(self.count, 1))

    def sharpe(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.mean / self.std()
