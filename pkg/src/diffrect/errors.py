class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


def require(cond, msg):
    if not cond:
        raise ContractError(msg)
