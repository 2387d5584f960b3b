from typing import Optional


class SsmError(Exception):
    pass


class InvalidArgumentError(SsmError, ValueError):
    pass


class DegenerateVectorError(SsmError, ValueError):
    pass


class DeterminismError(SsmError):
    pass


class ConfigurationError(SsmError):
    pass


class SpecError(SsmError):
    pass


class UndefinedMetricError(SsmError):
    pass


class FacsLookupError(SsmError, KeyError):

    def __init__(self, key):
        self.key = key
        super().__init__(f"Unknown FACS entry: {key!r}")

    def __str__(self) -> str:
        return self.args[0]


class NonFiniteError(SsmError):

    def __init__(self, tensor_name: str, detail: str = ""):
        self.tensor_name = tensor_name
        message = f"Non-finite values in tensor '{tensor_name}'"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class ConfigError(SsmError):
    """A config file that fails to parse or validate, located by key and line."""

    def __init__(self, key: Optional[str], line: Optional[int], message: str):
        self.key = key
        self.line = line
        location = []
        if key is not None:
            location.append(f"key '{key}'")
        if line is not None:
            location.append(f"line {line}")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class OverwriteRefusedError(SsmError):

    def __init__(self, path):
        self.path = path
        super().__init__(f"Refusing to overwrite non-empty run directory {path} (use --force)")
