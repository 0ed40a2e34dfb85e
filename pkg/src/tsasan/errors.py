"""Exception hierarchy shared by all subsystems.

Each class carries the process exit code the CLI maps it to.
"""


class TsaSanError(Exception):
    exit_code = 2


class ConfigurationError(TsaSanError):
    exit_code = 1


class DimensionError(TsaSanError, ValueError):
    exit_code = 3


class SimulationError(TsaSanError):
    exit_code = 3


class DatasetError(TsaSanError):
    exit_code = 2


class ParseError(DatasetError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class GenerationError(TsaSanError):
    exit_code = 2


class TrainingError(TsaSanError):
    exit_code = 3


class InferenceError(TsaSanError):
    exit_code = 3
