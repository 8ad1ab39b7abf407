"""Exception types raised across the simulator."""


class ShimError(Exception):
    """Base class for all simulator errors."""


class OutOfRange(ShimError, ValueError):
    pass


class InfiniteBeatPeriod(ShimError, ValueError):
    pass


class CorruptSlot(ShimError, ValueError):
    pass


class CorruptStream(ShimError, ValueError):
    pass


class UnjustifiableRate(ShimError, ValueError):
    pass


class Misconfiguration(ShimError, ValueError):
    pass


class UnstableQueue(ShimError, ValueError):
    pass


class NoData(ShimError, ValueError):
    pass


class ContractFailure(ShimError, RuntimeError):
    """A runtime contract of the simulation was broken (exit code 2)."""


class FifoOverflow(ContractFailure):
    pass


class FifoUnderrun(ContractFailure):
    pass


class TxUnderflow(ContractFailure):
    pass


class GrossRateMisconfiguration(ContractFailure):
    pass


class ValidationError(ShimError, ValueError):
    """Carries the full list of problems found by scenario validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
