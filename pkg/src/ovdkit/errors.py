class ValidationError(ValueError):
    """Raised when an input violates an operation's contract.

    The CLI maps this to exit code 2; anything else escaping is an internal
    error (exit code 1).
    """
