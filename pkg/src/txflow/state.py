from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from txflow.network import Network


@dataclass(frozen=True)
class SolutionState:
    """Unknown vector plus the NR bookkeeping that travels with it.

    ``x`` follows :class:`~txflow.network.IndexMap`; ``zeta`` is the PV
    damping factor and ``k`` the iteration counter.
    """

    x: np.ndarray
    n_bus: int
    zeta: float = 1.0
    k: int = 0

    def voltages(self) -> np.ndarray:
        nb2 = 2 * self.n_bus
        return self.x[0:nb2:2] + 1j * self.x[1:nb2:2]

    def evolve(self, **changes) -> SolutionState:
        return replace(self, **changes)

    @classmethod
    def from_voltages(cls, network: Network, v, q=None, zeta: float = 1.0) -> SolutionState:
        idx = network.index
        x = np.zeros(idx.n)
        v = np.broadcast_to(np.asarray(v, dtype=complex), (idx.n_bus,))
        x[0 : 2 * idx.n_bus : 2] = v.real
        x[1 : 2 * idx.n_bus : 2] = v.imag
        if q is not None:
            x[idx.q(np.arange(idx.n_ctrl))] = q
        return cls(x=x, n_bus=idx.n_bus, zeta=zeta)
