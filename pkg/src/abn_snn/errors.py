"""Exception hierarchy shared across the package.

Each class carries an ``exit_code`` used by the command-line runner.
"""


class AbnError(Exception):
    exit_code = 1


class ConfigError(AbnError, ValueError):
    exit_code = 2


class DecodeError(AbnError, ValueError):
    exit_code = 3

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class OutOfRangeError(DecodeError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericError(AbnError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, neuron_index=None):
        super().__init__(message)
        self.neuron_index = neuron_index


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
