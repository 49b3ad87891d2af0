"""Exception types shared across the package."""


class BoxsegError(Exception):
    """Base class for all errors raised by this package."""


class ModalityMismatchError(BoxsegError):
    """An operation was applied to a volume of the wrong modality."""


class ShapeMismatchError(BoxsegError):
    """Paired arrays (mask/mask, probs/mask, grads/params) disagree in shape."""


class DegenerateBoxError(BoxsegError):
    """A bounding box with zero area (or inverted corners) was supplied."""


class SliceIndexError(BoxsegError):
    """A slice index outside the volume's depth range."""


class ConfigError(BoxsegError):
    """A model or training configuration violates its invariants."""


class EmptyMaskError(BoxsegError):
    """A nonempty mask was required (e.g. to derive a tight bounding box)."""


class SplitError(BoxsegError):
    """Dataset splitting cannot satisfy the requested fractions."""


class DivergenceError(BoxsegError):
    """Training produced a non-finite loss or gradients."""


class FormatError(BoxsegError):
    """Base class for file/wire format violations."""


class MagicMismatchError(FormatError):
    """A container file does not start with the expected magic bytes."""


class TruncatedPayloadError(FormatError):
    """A container file ends before its declared payload does."""


class HeaderConsistencyError(FormatError):
    """Container header fields contradict each other or the payload."""


class ChecksumError(FormatError):
    """Stored content hash does not match the payload."""


class CheckpointVersionError(FormatError):
    """Checkpoint format version is not supported."""


class MissingParameterError(FormatError):
    """Checkpoint manifest lacks a parameter required by its config."""

    def __init__(self, name: str):
        super().__init__(f"checkpoint manifest is missing parameter {name!r}")
        self.name = name


class RleError(FormatError):
    """Run-length counts are malformed or inconsistent with the dims."""


class SessionError(BoxsegError):
    """Annotation session state violation (e.g. refining an unsegmented slice)."""


class MarkerError(BoxsegError):
    """A linear marker is malformed or placed outside its slice."""
