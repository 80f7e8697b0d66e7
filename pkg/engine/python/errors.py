"""
Exception hierarchy for the FedPAW engine
"""

from typing import Optional


class FedPawError(Exception):
    """Base class for every error raised by the engine"""


class ContractError(FedPawError):
    """A precondition of an operation was violated"""


class CongruenceError(ContractError):
    """Two ParamSets (or tensors) do not share layer/name/shape structure"""


class EmptyInputError(ContractError):
    """An operation that needs at least one element received none"""


class NumericError(FedPawError):
    """A non-finite value appeared during a computation"""

    def __init__(self, message: str, layer: Optional[str] = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer: {layer})"
        super().__init__(message)


class DivergedClientError(NumericError):
    """Local training produced a non-finite loss"""

    def __init__(self, client_id: str, batch_index: int, loss: float):
        self.client_id = client_id
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(
            f"Client {client_id} diverged at batch {batch_index} (loss={loss})"
        )


class DatasetError(FedPawError):
    """Problems reading or validating driving data"""


class ParseError(DatasetError):
    """A CSV row could not be parsed"""

    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(DatasetError):
    """A driving record breaks a record invariant"""

    def __init__(self, message: str, client_id: Optional[str] = None, column: Optional[str] = None):
        self.client_id = client_id
        self.column = column
        super().__init__(message)


class SerializationError(FedPawError):
    """A ParamSet file is malformed"""


class ConfigError(FedPawError):
    """An experiment configuration is invalid"""


class CorpusExistsError(FedPawError):
    """Corpus output already exists and --force was not given"""
