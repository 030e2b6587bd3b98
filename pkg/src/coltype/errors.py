"""Exception hierarchy shared across the package."""


class ColtypeError(Exception):
    """Base class for all package errors."""


class CorpusError(ColtypeError):
    """Corpus directory or record is malformed.

    Carries a human-readable locus (file and record) in the message.
    """


class GatewayError(ColtypeError):
    """Backend call failed after exhausting retries."""


class ProviderError(GatewayError):
    """The provider returned an error payload (non-retryable)."""


class CassetteMissError(GatewayError):
    """A replay backend was asked for a prompt absent from its cassette."""

    def __init__(self, digest: str):
        super().__init__(f"no cassette entry for prompt digest {digest}")
        self.digest = digest


class ResponseParseError(ColtypeError):
    """No usable JSON object could be extracted from a model response."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class RunFormatError(ColtypeError):
    """A persisted run directory is corrupt or has an unknown version."""
