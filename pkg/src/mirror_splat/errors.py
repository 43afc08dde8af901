"""Exception hierarchy. CLI maps these to distinct exit codes."""


class MirrorSplatError(Exception):
    """Base class for all package errors."""


class InvalidPlaneError(MirrorSplatError):
    """Degenerate or non-normalized plane where a unit normal is required."""


class ConfigError(MirrorSplatError):
    """Bad configuration value or unusable config file."""


class DatasetError(MirrorSplatError):
    """Dataset directory is missing, malformed, or inconsistent."""


class CheckpointError(MirrorSplatError):
    """Checkpoint is missing, corrupt, or has an unsupported version."""


class RenderError(MirrorSplatError):
    """Renderer misuse: empty scene, shape mismatch of gradients, etc."""


class SynthesisError(MirrorSplatError):
    """Toy-scene synthesizer cannot produce a valid dataset."""


class TrainingError(MirrorSplatError):
    """Training cannot proceed (e.g. no mirror Gaussians found)."""


class PlaneEstimationError(MirrorSplatError):
    """RANSAC plane fit failed (too few or degenerate points)."""
