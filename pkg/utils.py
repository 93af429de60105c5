#!/usr/bin/env python3

import numpy as np
from scipy.special import expit, logit
from typing import Callable


PROBABILITY_CLAMP = 1e-12
CSV_FLOAT_FORMAT = '%.17g'


class StratamatchError(Exception):
    """
    Base class of every domain error raised by the stratification and matching code.
    The cli maps these to exit code 1.
    """
    pass


def clamped_logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    return logit(p)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def make_rng(seed: int) -> np.random.Generator:
    """
    Philox is a counter based bit generator, so the streams are identical across platforms.
    """
    return np.random.Generator(np.random.Philox(int(seed)))


def central_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Differentiate a scalar function f(x) of a vector x using the central difference method.
    """
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(len(x)):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad
