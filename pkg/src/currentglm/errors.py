"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class CurrentGLMError(Exception):
    """Base class for all package errors."""


class ConfigError(CurrentGLMError):
    """Invalid or missing configuration (CLI exit code 1).

    ``key`` names the offending configuration key, when there is one.
    """

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"[{key}] {message}" if key else message)


class DataError(CurrentGLMError, ValueError):
    """Malformed or insufficient input data (CLI exit code 2)."""


class MeshFormatError(DataError):
    """A mesh file failed to parse.

    ``lineno`` is the 1-based line of the offending record, when known.
    """

    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}"
            if lineno is not None:
                where += f":{lineno}"
            where += ": "
        super().__init__(where + message)


class NumericalError(CurrentGLMError, ArithmeticError):
    """Singular systems, rank deficiency, non-convergence (CLI exit code 3)."""


class SingularSystemError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
