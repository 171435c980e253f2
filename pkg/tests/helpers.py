"""Small models shared by several test modules."""
import numpy as np

from ctbnids.ctbn import Cim, CtbnModel


def two_state(a, b):
    return np.array([[-a, a], [b, -b]], dtype=float)


def independent_pair(a, b):
    sizes = {"A": 2, "B": 2}
    cims = {"A": Cim("A", (), (), two_state(a, a)), "B": Cim("B", (), (), two_state(b, b))}
    return CtbnModel(sizes, cims)


def chained_pair():
    """A -> B, both binary; B flips fast when A = 1."""
    sizes = {"A": 2, "B": 2}
    cims = {
        "A": Cim("A", (), (), two_state(0.5, 1.0)),
        "B": Cim("B", ("A",), (2,), np.stack([two_state(0.2, 0.4), two_state(3.0, 1.5)])),
    }
    return CtbnModel(sizes, cims)


def cyclic_triple():
    """X (3 states) <-> Y (2 states) with a toggle child of Y."""
    rng = np.random.default_rng(4)

    def rand(n):
        off = rng.uniform(0.2, 2.0, (n, n))
        np.fill_diagonal(off, 0.0)
        np.fill_diagonal(off, -off.sum(axis=1))
        return off

    sizes = {"X": 3, "Y": 2, "E": 2}
    cims = {
        "X": Cim("X", ("Y",), (2,), np.stack([rand(3), rand(3)])),
        "Y": Cim("Y", ("X",), (3,), np.stack([rand(2) for _ in range(3)])),
        "E": Cim("E", ("Y",), (2,), np.stack([two_state(0.0, 0.0), two_state(2.5, 2.5)]), toggle=True),
    }
    return CtbnModel(sizes, cims)
