"""Exception hierarchy. The CLI maps each class to its own exit code."""

import difflib


class WGPNNError(Exception):
    exit_code = 1
    category = "error"


class DataFormatError(WGPNNError, ValueError):
    exit_code = 2
    category = "data"

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class UnknownTokenError(WGPNNError, KeyError):
    exit_code = 3
    category = "lookup"

    def __init__(self, token, vocabulary=(), kind="entity"):
        self.token = token
        self.suggestions = difflib.get_close_matches(str(token), [str(v) for v in vocabulary], n=5)
        message = f"unknown {kind} {token!r}"
        if self.suggestions:
            message += f" (nearest matches: {', '.join(self.suggestions)})"
        super().__init__(message)

    def __str__(self):
        return self.args[0]


class ConfigError(WGPNNError, ValueError):
    exit_code = 4
    category = "config"


class CheckpointError(WGPNNError):
    exit_code = 5
    category = "checkpoint"


class NumericalError(WGPNNError, FloatingPointError):
    exit_code = 6
    category = "numerical"
