"""Exception hierarchy shared across the package."""


class MoesigError(Exception):
    """Base class for all errors raised by this package."""


class TraceError(MoesigError):
    """Malformed, inconsistent, or out-of-range routing trace data."""


class SignatureError(MoesigError):
    """Signature computation failed (empty domain, missing layer, ...)."""


class TransportError(MoesigError):
    """Distance computation failed (shape mismatch, bad distributions, ...)."""


class DetectorError(MoesigError):
    """Detection or benchmark failed (incompatible candidates, ...)."""


class ShadowMoeError(MoesigError):
    """Proxy model construction or training failed."""


class ScenarioError(MoesigError):
    """Invalid synthetic scenario configuration."""
