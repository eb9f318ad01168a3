"""Shared exception types."""


class PegrlError(Exception):
    pass


class ConfigError(PegrlError):
    """Invalid gains, dimensions, or configuration values."""


class SingularityError(PegrlError):
    """Jacobian rank deficiency beyond the damping tolerance."""


class ModelStateError(PegrlError):
    """Invalid dynamic model state (e.g. non-PD mass matrix)."""


class SimulationDiverged(PegrlError):
    """Non-finite state encountered while integrating."""


class CheckpointError(PegrlError):
    pass


class CorruptCheckpointError(CheckpointError):
    """Truncated or malformed checkpoint file."""


class TopologyMismatchError(CheckpointError):
    """Checkpoint fingerprint does not match the expected topology."""


class TrainingDiverged(PegrlError):
    """NaN loss during an update; last good state is retained by the caller."""
