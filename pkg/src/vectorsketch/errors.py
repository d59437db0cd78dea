"""Exception hierarchy. CLI exit codes are attached to the top-level families."""


class VectorSketchError(Exception):
    exit_code = 1


class DomainError(VectorSketchError, ValueError):
    """Argument outside the documented domain of an operation."""


class DegenerateGeometryError(DomainError):
    pass


class ConstraintError(DomainError):
    pass


class ConfigError(VectorSketchError):
    exit_code = 2


class BackendError(VectorSketchError):
    exit_code = 3


class InterfaceError(BackendError):
    """A backend was asked for something its interface does not provide."""


class NumericError(VectorSketchError, ArithmeticError):
    exit_code = 4


class UnsupportedElementError(VectorSketchError, ValueError):
    def __init__(self, element, line=None):
        self.element = element
        self.line = line
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"unsupported SVG element <{element}>{where}")
