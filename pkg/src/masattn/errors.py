"""Exception hierarchy. Every error carries a short machine-readable code."""


class MasError(Exception):
    code = "E_MAS"

    def __str__(self) -> str:
        return f"{self.code}: {super().__str__()}"


class DimensionError(MasError, ValueError):
    code = "E_DIM"


class NonFiniteError(MasError, FloatingPointError):
    code = "E_NONFINITE"


class DegenerateRowError(MasError, ValueError):
    code = "E_DEGENERATE_ROW"


class StateError(MasError, RuntimeError):
    code = "E_STATE"


class ConfigError(MasError, ValueError):
    code = "E_CONFIG"


class ValidationError(MasError, ValueError):
    code = "E_VALIDATION"


class CacheError(MasError, ValueError):
    code = "E_CACHE"


class DivergenceError(MasError, RuntimeError):
    code = "E_DIVERGED"


class FormatError(MasError, ValueError):
    code = "E_FORMAT"


class RemoteError(MasError, RuntimeError):
    code = "E_REMOTE"
