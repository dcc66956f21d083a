"""Exception hierarchy shared by the package."""


class DDCError(Exception):
    """Base class for all errors raised by ddc_welfare."""


class ModelValidationError(DDCError, ValueError):
    """A model primitive violates one of its invariants.

    ``path`` locates the offending entry, e.g. ``"kernel[3][1]"``.
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DomainError(DDCError, ValueError):
    """An input lies outside the domain of a transform (e.g. log of 0)."""


class ConvergenceError(DDCError, RuntimeError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")


class ReducibleChainError(DDCError, ValueError):
    """The controlled chain has more than one closed class."""

    def __init__(self, message, components=None):
        self.components = components or []
        super().__init__(message)


class DegenerateStateError(DDCError, ValueError):
    pass


class SupportError(DDCError, ValueError):
    pass


class BoundInapplicableError(DDCError, ValueError):
    pass


class EstimationError(DDCError, RuntimeError):
    def __init__(self, message, fold=None, state=None):
        self.fold = fold
        self.state = state
        where = []
        if fold is not None:
            where.append(f"fold {fold}")
        if state is not None:
            where.append(f"state {state}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class UnsupportedVariantError(DDCError, ValueError):
    pass
