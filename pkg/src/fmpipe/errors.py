"""Exception taxonomy shared by every module in the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ToolkitError):
    """Tensor dimensions do not match a declared contract."""


class LayoutError(ToolkitError):
    """Embedding layout tag does not match the requested operation."""


class InputError(ToolkitError):
    """Input data violates an invariant (non-finite values, bad dims)."""


class ConfigurationError(ToolkitError):
    """A component or experiment configuration is invalid."""


class RegistryError(ToolkitError):
    """Unknown or duplicate name in a component registry."""


class StateError(ToolkitError):
    """Operation invoked in an invalid state (unfitted, double-merge, ...)."""


class NumericalError(ToolkitError):
    """A numerical procedure failed (singular system, non-finite loss)."""


class CheckpointError(ToolkitError):
    """A component file is malformed (bad magic, version, truncation)."""


class ChecksumError(CheckpointError):
    """Component file checksum does not match its contents."""


class KindMismatchError(CheckpointError):
    """Loaded component kind differs from the requested slot kind."""
