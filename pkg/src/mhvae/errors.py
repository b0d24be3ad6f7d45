class ContractError(ValueError):
    """A caller violated a documented precondition (shape, range, mask...)."""


class CheckpointError(RuntimeError):
    """A checkpoint failed verification or does not match the requested model."""
