"""
Exception hierarchy for calseg
"""

from __future__ import annotations


class CalsegError(RuntimeError):
    """Base class for every error raised by calseg."""


class ConfigError(CalsegError, ValueError):
    """Invalid or unreadable configuration."""


class ShapeError(CalsegError, ValueError):
    """Tensor or array shapes do not satisfy an operation's contract."""


class NonFiniteError(CalsegError, ValueError):
    """NaN or infinity where finite values are required."""


class TapeError(CalsegError):
    """Misuse of the gradient tape (non-scalar loss, second backward)."""


class EmptyInputError(CalsegError, ValueError):
    """An operation received nothing to work on (no pixels, no images, no checkpoints)."""


class StageMaskError(CalsegError):
    """Trainable masks do not match the stage an operation requires."""


class DivergenceError(CalsegError):
    """Training produced a non-finite loss."""

    def __init__(self, stage: str, epoch: int, iteration: int, components: dict[str, float]) -> None:
        self.stage = stage
        self.epoch = epoch
        self.iteration = iteration
        self.components = dict(components)
        parts = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(
            f"{stage} diverged at epoch {epoch}, iteration {iteration}: {parts}"
        )


class FormatError(CalsegError):
    """A dataset record or checkpoint file is malformed."""

    def __init__(self, path: object, reason: str) -> None:
        self.path = path
        super().__init__(f"{path}: {reason}")


class MissingArtifactError(CalsegError):
    """A stage prerequisite is not on disk."""

    def __init__(self, stage: str, path: object) -> None:
        self.stage = stage
        self.path = path
        super().__init__(f"missing artifact from stage '{stage}': {path} (run it first)")


class OutputExistsError(CalsegError):
    """Refusing to overwrite a non-empty output directory."""


class RangeError(CalsegError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ArtifactIOError(CalsegError, OSError):
    """An artifact could not be written."""
