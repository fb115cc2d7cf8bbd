"""Exception hierarchy. The CLI maps each family onto an exit code."""


class MasfError(Exception):
    exit_code = 1


class ConfigError(MasfError, ValueError):
    """Invalid configuration or incompatible shapes."""

    exit_code = 2


class ShapeError(ConfigError):
    pass


class PartitionError(ConfigError):
    pass


class DataError(MasfError):
    exit_code = 3


class AnnotationFormatError(DataError):
    def __init__(self, path, line_no, text, reason=""):
        self.path = str(path)
        self.line_no = line_no
        self.text = text
        msg = f"{self.path}:{line_no}: malformed annotation {text!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class NumericalError(MasfError):
    exit_code = 4


class GradientCheckError(NumericalError):
    def __init__(self, param, index, message="non-finite gradient"):
        self.param = param
        self.index = index
        super().__init__(f"{message} at parameter {param!r}, index {index}")


class AnnotationNotFoundError(DataError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"annotation file not found: {self.path}")
