"""Exception types. CLI exit statuses are keyed on these classes."""


class StableWalkError(Exception):
    pass


class ConfigError(StableWalkError, ValueError):
    """Invalid parameters or configuration."""


class ModelError(ConfigError):
    """A chain model violates its structural requirements."""


class StatisticalAbort(StableWalkError, RuntimeError):
    """A Monte Carlo estimate cannot be formed with the given budget."""


class AcceptanceFloorError(StatisticalAbort):
    """Rejection sampling acceptance rate fell below the configured floor."""

    def __init__(self, rate: float, floor: float, simulated: int):
        super().__init__(f"acceptance rate {rate:.3g} below floor {floor:.3g} after {simulated} paths")
        self.rate = rate
        self.floor = floor
        self.simulated = simulated
