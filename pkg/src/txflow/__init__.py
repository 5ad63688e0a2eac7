"""AC power flow in current-voltage (split-circuit) form with Tx-stepping continuation."""

from txflow.case_io import load_network, read_case, to_network
from txflow.homotopy import HomotopySchedule, SolveReport, solve_plain_nr, solve_tx_stepping
from txflow.network import Network
from txflow.nr import NRConfig, SolveStatus, flat_start, solve_nr
from txflow.stamps import HomotopyConfig

__version__ = "0.1.0"

__all__ = [
    "HomotopyConfig",
    "HomotopySchedule",
    "NRConfig",
    "Network",
    "SolveReport",
    "SolveStatus",
    "flat_start",
    "load_network",
    "read_case",
    "solve_nr",
    "solve_plain_nr",
    "solve_tx_stepping",
    "to_network",
]
