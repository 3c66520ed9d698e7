"""Named numeric failures shared across the package."""


class LabError(Exception):
    """A numeric failure carrying a stable, machine-readable name.

    The ``name`` is what the CLI reports verbatim (``empty-support``,
    ``singular-gram``, ``qp-stall`` ...); ``detail`` holds optional context
    such as the last duality gap of a stalled solver.
    """

    def __init__(self, name, message="", **detail):
        self.name = name
        self.detail = detail
        super().__init__(f"{name}: {message}" if message else name)


class ColdChainWarning(RuntimeWarning):
    """Metropolis acceptance fell below 1%; the proposal step is too large."""
