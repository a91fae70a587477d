"""Exception hierarchy shared by all pipeline stages."""


class T2IError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(T2IError, ValueError):
    """A file or configuration failed validation (CLI exit code 2)."""


class ContractError(T2IError, ValueError):
    """An operation was called with arguments violating its precondition."""


class InputError(T2IError, ValueError):
    """An input item (image, prompt) could not be processed."""

    def __init__(self, message, item_id=None):
        super().__init__(message)
        self.item_id = item_id


class GenerationError(T2IError):
    """Caption generation failed for an image."""

    def __init__(self, message, image_id=None, stage=None):
        super().__init__(message)
        self.image_id = image_id
        self.stage = stage


class MiningError(T2IError):
    """No valid negative exists for an anchor in the batch."""


class EvaluationError(T2IError):
    """Retrieval evaluation could not be carried out."""


class NumericError(T2IError, FloatingPointError):
    """A loss or embedding became non-finite."""
