"""Shared error types."""


class NonFiniteError(RuntimeError):
    """A named tensor went non-finite; training treats this as divergence."""

    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite values in {tensor_name}")
        self.tensor_name = tensor_name
