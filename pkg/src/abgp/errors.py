"""Exception hierarchy shared by every abgp module."""


class AbgpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDigest(AbgpError, ValueError):
    pass


class InvalidKey(AbgpError, ValueError):
    pass


class InvalidPoint(AbgpError, ValueError):
    pass


class EmptyAggregate(AbgpError, ValueError):
    pass


class UnknownSigner(AbgpError, ValueError):
    pass


class BadBitmap(AbgpError, ValueError):
    pass


class DuplicateRecord(AbgpError):
    pass


class QuorumNotReached(AbgpError):
    pass


class InternalError(AbgpError):
    """A store invariant would have been violated."""


class NoPeers(AbgpError):
    pass


class PeerUnavailable(AbgpError):
    """A pull exchange could not be completed."""


class ConfigError(AbgpError, ValueError):
    pass


class WireError(AbgpError, ValueError):
    """A frame or message could not be decoded."""

    def __init__(self, code, detail=""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
