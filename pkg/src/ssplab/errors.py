"""Exception types shared across the lab. CLI exit codes key off these."""


class SSPLabError(Exception):
    exit_code = 1


class InputDomainError(SSPLabError, ValueError):
    """An argument lies outside the operation's domain."""


class ConfigError(SSPLabError, ValueError):
    exit_code = 2


class MissingDependencyError(SSPLabError, FileNotFoundError):
    """A pipeline stage needs an artifact that an earlier stage has not produced."""

    exit_code = 3

    def __init__(self, stage: str, path=None):
        self.stage = stage
        self.path = path
        msg = f"missing prerequisite from stage '{stage}'"
        if path is not None:
            msg += f": {path}"
        super().__init__(msg)


class NumericError(SSPLabError, ArithmeticError):
    exit_code = 4
