"""Exception types shared across the package."""


class QueryCropError(Exception):
    pass


class EmptyDataset(QueryCropError, ValueError):
    pass


class EmptyConditioningSet(QueryCropError, ValueError):
    pass


class ZeroVector(QueryCropError, ValueError):
    pass


class MalformedBox(QueryCropError, ValueError):
    pass


class OutOfBounds(QueryCropError, ValueError):
    pass


class ConfigInfeasible(QueryCropError, ValueError):
    pass


class MissingPositive(QueryCropError, ValueError):
    pass


class MissingClass(QueryCropError, ValueError):
    pass


class NonFiniteGradient(QueryCropError, FloatingPointError):
    pass


class DimensionMismatch(QueryCropError, ValueError):
    pass


class SchemaError(QueryCropError, ValueError):
    def __init__(self, row: int, field: str, message: str = ""):
        self.row = row
        self.field = field
        text = f"row {row}: field {field!r}"
        if message:
            text += f": {message}"
        super().__init__(text)


class EmptySplit(UserWarning):
    """Emitted (not raised) when a behavior-analysis split has no queries."""


# decision parser errors


class ParseError(QueryCropError, ValueError):
    pass


class NoDecisionField(ParseError):
    pass


class UnknownDecisionValue(ParseError):
    pass


class MissingToolCall(ParseError):
    pass


class BadBBoxArity(ParseError):
    pass


class MalformedJson(ParseError):
    pass
