"""Exception hierarchy.

Every error carries a ``category`` that the CLI maps onto an exit code:
``validation`` -> 3, ``data`` -> 4, ``numeric`` -> 5.
"""


class PulseformError(Exception):
    category = "data"

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        out = {"error": self.category, "type": type(self).__name__, "message": str(self)}
        out.update({k: str(v) for k, v in self.details.items()})
        return out


class ValidationError(PulseformError, ValueError):
    category = "validation"


class DataError(PulseformError):
    category = "data"


class NumericError(PulseformError, ArithmeticError):
    category = "numeric"


# validation
class InvalidConfig(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class OddDimension(ValidationError):
    pass


class IndivisibleLength(ValidationError):
    pass


class WindowTooLarge(ValidationError):
    pass


class InvalidPercentages(ValidationError):
    pass


# data
class MalformedFile(DataError):
    pass


class RecordRejected(DataError):
    pass


class NonFiniteSample(DataError):
    pass


class LengthMismatch(DataError):
    pass


class IoFailure(DataError):
    pass


class CorruptFile(DataError):
    pass


class VersionMismatch(DataError):
    pass


class SignalTooShort(DataError):
    pass


class DegenerateCycle(DataError):
    pass


class EmptyInput(DataError):
    pass


class TooFewSamples(DataError):
    pass


class ZeroVarianceTargets(DataError):
    pass


class MissingGradient(DataError):
    pass


class GraphCycle(DataError):
    pass


# numeric
class NonFiniteDetected(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass
