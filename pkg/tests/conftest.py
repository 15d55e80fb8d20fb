import numpy as np
import pytest

from rescue.core import ConfigSpace, CostModel, FidelitySpace, Problem


class ToyProblem(Problem):
    """Two objectives on [0, 1] with an optional lower-bound constraint ``h = x >= 0.2``."""

    name = "toy"

    def __init__(self, fidelities=(0.2, 0.5, 1.0), constrained=False, cost_model=None, noise_std=0.0):
        super().__init__(
            ConfigSpace(np.array([[0.0, 1.0]]), ("x",)),
            FidelitySpace(values=fidelities),
            ("y1", "y2"),
            ("h",) if constrained else (),
            (0.2,) if constrained else (),
            ("ge",) if constrained else (),
            cost_model=cost_model or CostModel(rate=4.8),
            noise_std=noise_std,
        )

    def _evaluate_raw(self, x, s):
        x = float(x[0])
        bias = (1.0 - s) * np.sin(3 * x)
        y = np.array([x ** 2 + bias, (x - 1.0) ** 2 - bias])
        h = np.array([x]) if self.Q else np.zeros(0)
        return y, h


@pytest.fixture
def toy():
    return ToyProblem()


@pytest.fixture
def toy_constrained():
    return ToyProblem(constrained=True)
