"""Exception hierarchy shared by the solver modules."""


class TxFlowError(Exception):
    """Base class for all solver errors."""


class CaseError(TxFlowError):
    """Malformed or inconsistent case input."""


class MalformedTable(CaseError):
    pass


class MissingSection(CaseError):
    pass


class DuplicateBusId(CaseError):
    pass


class UnknownBusReference(CaseError):
    pass


class NoSlackBus(CaseError):
    pass


class NonPositiveBase(CaseError):
    pass


class NetworkValidationError(TxFlowError):
    """Raised when a network fails validation; carries the diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        msg = "; ".join(f"{d.code}: {d.message}" for d in self.diagnostics)
        super().__init__(msg or "invalid network")


class IslandWithoutSlack(NetworkValidationError):
    pass


class ZeroImpedanceBranch(TxFlowError, ValueError):
    pass


class VoltageCollapseFloor(TxFlowError):
    """|V|^2 at a constant-power device fell below the collapse floor."""

    def __init__(self, buses):
        self.buses = list(buses)
        super().__init__(f"|V|^2 below collapse floor at bus indices {self.buses[:10]}")


class LinearSolverError(TxFlowError):
    pass


class StructurallySingular(LinearSolverError):
    pass


class NumericallySingular(LinearSolverError):
    pass


class DimensionMismatch(LinearSolverError, ValueError):
    pass


class NonFiniteStep(TxFlowError):
    pass


class StepUnderflow(TxFlowError):
    pass
