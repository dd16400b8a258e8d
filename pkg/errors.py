from typing import Optional

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_IO = 2
EXIT_MODEL_MISMATCH = 3
EXIT_USAGE = 64


class MobilityError(Exception):
    exit_code = 1


class ConfigError(MobilityError):
    exit_code = EXIT_USAGE


class DataFileError(MobilityError):
    exit_code = EXIT_IO


class RowError(MobilityError):
    exit_code = EXIT_IO

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.reason = message


class ShapeError(MobilityError):
    pass


class NumericError(MobilityError):
    pass


class EmptyLossError(MobilityError):
    def __init__(self, message: str = "empty loss"):
        super().__init__(message)


class ArchitectureMismatchError(MobilityError):
    exit_code = EXIT_MODEL_MISMATCH

    def __init__(self, differences: dict):
        listed = ", ".join(f"{k}: checkpoint={a} config={b}" for k, (a, b) in sorted(differences.items()))
        super().__init__(f"architecture mismatch ({listed})")
        self.differences = differences


class CheckpointFormatError(MobilityError):
    exit_code = EXIT_MODEL_MISMATCH


def exit_code_for(exc: BaseException, default: Optional[int] = None) -> int:
    if isinstance(exc, MobilityError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1 if default is None else default
