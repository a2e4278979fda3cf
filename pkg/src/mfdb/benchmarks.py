"""Analytic low/high-fidelity benchmark pair for exercising the regression stack.

The two functions share broad trends but the high-fidelity one adds polynomial
offsets and a high-frequency oscillation the low-fidelity one lacks, which is
what makes the pair a useful desk-scale check that fusing fidelity levels
beats fitting scarce high-fidelity data alone.
"""

import numpy as np


def low_fidelity(x):
    """Cheap approximation: 0.5*(6x-2)^2*sin(12x-4) + 10*(x-0.5) - 5."""
    x = np.asarray(x, dtype=float)
    return 0.5 * (6.0 * x - 2.0) ** 2 * np.sin(12.0 * x - 4.0) + 10.0 * (x - 0.5) - 5.0


def high_fidelity(x):
    """Truth function: 2*f_lo(x) - 20x + 20 + sin(10*cos(5x))."""
    x = np.asarray(x, dtype=float)
    return 2.0 * low_fidelity(x) - 20.0 * x + 20.0 + np.sin(10.0 * np.cos(5.0 * x))
