"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class GALTrajError(Exception):
    exit_code = 1


class ConfigurationError(GALTrajError, ValueError):
    exit_code = 2


class DataError(GALTrajError, ValueError):
    exit_code = 3


class GenerationError(DataError):
    """Scenario synthesis or trajectory generation failed."""


class ScenarioParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class SchemaError(DataError):
    pass


class ShapeError(DataError):
    pass


class EvaluationError(DataError):
    pass


class NumericError(GALTrajError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass
