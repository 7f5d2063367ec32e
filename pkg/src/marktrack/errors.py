"""Exception types shared across the engine."""


class MarkTrackError(Exception):
    """Base class for engine errors."""


class ManifestError(MarkTrackError):
    """Manifest missing, malformed, or inconsistent with its frames."""


class FrameIndexError(MarkTrackError, IndexError):
    """Frame index outside [1, frame_count]."""


class DegenerateMarkError(MarkTrackError):
    """Mark whose three points coincide."""


class InsufficientExamplesError(MarkTrackError):
    """Too few training examples; caller should fall back to gate-only detection."""


class DegenerateTrainingError(MarkTrackError):
    """Positive and negative training sets are indistinguishable."""


class InsufficientStatesError(MarkTrackError):
    """Too few tracklet states to train the confidence model."""


class StageError(MarkTrackError):
    """Operation requested out of pipeline-stage order."""


class OperationError(MarkTrackError):
    """Invalid correction operation payload."""
