"""Exception hierarchy shared by every promptmix module."""


class PromptmixError(Exception):
    """Base class for all package errors."""


class ConfigError(PromptmixError):
    """Invalid configuration or incompatible shapes; maps to CLI exit code 2."""


class InputError(PromptmixError):
    """Malformed runtime input (bad token id, label out of range, empty eval set)."""


class TrainingDiverged(PromptmixError):
    """Loss became non-finite during optimization."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
