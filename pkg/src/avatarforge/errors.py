"""Exception types shared across the engine."""


class AvatarForgeError(Exception):
    """Base class for all engine errors."""


class ParseError(AvatarForgeError):
    """Malformed asset container or sequence file."""


class InvariantError(AvatarForgeError):
    """Loaded data violates a model invariant (weight sums, tree structure, ...)."""


class DimensionError(AvatarForgeError):
    """Array shape incompatible with the model or operation."""


class IoError(AvatarForgeError):
    """Filesystem read/write failure."""


class StaleTapeError(AvatarForgeError):
    """Backward called after the inputs recorded by the forward pass were mutated."""


class DegenerateCameraError(AvatarForgeError):
    """Camera eye coincides with the look-at target."""


class ProviderError(AvatarForgeError):
    """Guidance provider failed (transport, shape mismatch, malformed response)."""


class NonFiniteError(AvatarForgeError):
    """NaN or Inf encountered in a parameter block or gradient."""

    def __init__(self, block: str, message: str = ""):
        self.block = block
        super().__init__(message or f"non-finite values in block '{block}'")


class TopologyMismatchError(AvatarForgeError):
    """Two avatar states do not share the same mesh topology / UV layout."""


class ConfigError(AvatarForgeError):
    """Invalid or unknown configuration key/value."""
