"""Exception hierarchy shared by every gifdl module."""


class GifdlError(Exception):
    """Base class for all package errors."""


class ShapeError(GifdlError, ValueError):
    pass


class PgmParseError(GifdlError, ValueError):
    def __init__(self, field, detail):
        super().__init__(f"PGM {field}: {detail}")
        self.field = field


class BackendError(GifdlError, RuntimeError):
    def __init__(self, request, detail):
        super().__init__(f"backend failed for {request!r}: {detail}")
        self.request = request


class GenerationExhaustedError(GifdlError, RuntimeError):
    def __init__(self, accepted, wanted, tried):
        super().__init__(
            f"accepted only {accepted}/{wanted} fluctuations after {tried} candidates"
        )
        self.accepted = accepted
        self.wanted = wanted
        self.tried = tried


class SizeError(GifdlError, ValueError):
    pass


class ConfigError(GifdlError, ValueError):
    pass


class NumericError(GifdlError, FloatingPointError):
    pass


class DomainError(GifdlError, ValueError):
    pass


class PayloadError(GifdlError, ValueError):
    pass


class InfeasibleError(GifdlError, RuntimeError):
    pass


class DegenerateScalingError(GifdlError, ValueError):
    pass


class EvaluationError(GifdlError, ValueError):
    pass
