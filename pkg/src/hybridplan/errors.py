"""Exception hierarchy shared by the planner modules and the CLI."""


class HybridPlanError(Exception):
    """Base class for all planner errors."""


class InvalidSpecError(HybridPlanError, ValueError):
    """A layer or network description violates its invariants."""


class InvalidPlanError(HybridPlanError, ValueError):
    """A partition plan does not cover its network."""


class InvalidClusterError(HybridPlanError, ValueError):
    """A device has a non-positive capacity or bandwidth."""


class InfeasibleInstanceError(HybridPlanError):
    """No capacity-respecting assignment of partitions to devices was found."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or message


class InstanceTooLargeError(HybridPlanError, ValueError):
    """Exhaustive enumeration was requested for an instance above the size guard."""


class NumericError(HybridPlanError, ArithmeticError):
    """A non-finite value appeared during a numeric computation."""


class DivergenceError(NumericError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory if trajectory is not None else {}


class SchemaError(HybridPlanError, ValueError):
    """A spec file failed validation; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [str(v) for v in self.violations]
        super().__init__("; ".join(lines) if lines else "schema error")
