"""Exception types raised across the toolkit."""


class DesmokeError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(DesmokeError):
    """Inputs that must share a shape or grid do not."""


class MissingPSFrame(DesmokeError):
    """Clip directory has no ps.png."""


class CorruptClip(DesmokeError):
    """Clip directory has a gap or other inconsistency in its frame files."""


class InvalidClip(DesmokeError):
    """Clip violates a structural invariant (e.g. empty frame list)."""


class InvalidFlow(DesmokeError):
    """Flow field contains NaN/Inf or is otherwise unusable."""


class InvalidConfig(DesmokeError):
    """Configuration value out of its documented range."""


class InvalidInput(DesmokeError):
    """Operation called with structurally invalid arguments."""


class InvalidDataset(DesmokeError):
    """Dataset is empty, has duplicate clip ids, or a broken manifest."""


class StateMismatch(DesmokeError):
    """Recurrent state incompatible with the current frame/model."""


class NumericalError(DesmokeError):
    """A loss or metric became NaN/Inf."""
