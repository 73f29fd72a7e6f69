class ConfigurationError(ValueError):
    """A platform, scenario or request that can never be valid."""


class AccessFault(Exception):
    """Raised by a slave when a bus access cannot be served.

    The interconnect turns it into a faulted response; it never escapes the
    kernel.
    """

    def __init__(self, kind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind
        self.detail = detail
