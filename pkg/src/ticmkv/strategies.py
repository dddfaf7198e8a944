"""Closed-loop feedback strategies u(t, x).

A strategy is callable on a scalar time and an ``(n, dim)`` state block and
returns an ``(n, control_dim)`` control block.  Concrete families live next to
the solvers that produce them (affine with the Riccati solver, gridded with
the finite-difference solver); the generic ones here cover probes and tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FeedbackStrategy:
    """Base class: subclasses implement ``__call__`` and report a label."""

    control_dim: int = 1
    lipschitz_x: float = 0.0
    label: str = "strategy"

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


def _control_block(values, n: int, control_dim: int) -> np.ndarray:
    out = np.asarray(values, dtype=float)
    if out.ndim == 0:
        out = np.full((n, control_dim), float(out))
    elif out.ndim == 1:
        out = np.broadcast_to(out[:, None] if out.size == n else out[None, :], (n, control_dim)).copy()
    return out


@dataclass
class ConstantStrategy(FeedbackStrategy):
    """u(t, x) = value, regardless of state."""

    value: np.ndarray
    label: str = "constant"

    def __post_init__(self):
        self.value = np.atleast_1d(np.asarray(self.value, dtype=float))
        self.control_dim = self.value.size
        self.lipschitz_x = 0.0

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(self.value, (x.shape[0], self.control_dim)).copy()


def zero_strategy(control_dim: int = 1) -> ConstantStrategy:
    return ConstantStrategy(value=np.zeros(control_dim), label="zero")


@dataclass
class CallableStrategy(FeedbackStrategy):
    """Wrap a plain function ``fn(t, x block) -> control block``."""

    fn: object
    control_dim: int = 1
    lipschitz_x: float = float("nan")
    label: str = "callable"

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return _control_block(self.fn(t, x), x.shape[0], self.control_dim)


@dataclass
class CompositeStrategy(FeedbackStrategy):
    """``head`` on [start, switch), ``tail`` from the switch time on.

    This is the spike composite: a probe control on a short window followed by
    the strategy under test.
    """

    head: FeedbackStrategy
    tail: FeedbackStrategy
    start: float
    switch: float
    label: str = "composite"

    def __post_init__(self):
        self.control_dim = self.tail.control_dim
        self.lipschitz_x = max(self.head.lipschitz_x, self.tail.lipschitz_x)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.start <= t < self.switch:
            return self.head(t, x)
        return self.tail(t, x)
