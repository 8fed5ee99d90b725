"""Exception types raised across the package."""


class PoseDiffError(Exception):
    """Base class for all package errors."""

    code = "error"


class DegenerateRotationError(PoseDiffError, ValueError):
    """A 6-D rotation block cannot be orthonormalised."""

    code = "degenerate_rotation"

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (hypothesis index {index})"
        super().__init__(message)
        self.index = index


class InvalidRotationError(PoseDiffError, ValueError):
    code = "invalid_rotation"


class CropDomainError(PoseDiffError, ValueError):
    """Crop box with zero extent, so offsets cannot be normalised."""

    code = "crop_domain"


class NumericalError(PoseDiffError, FloatingPointError):
    """Non-finite value produced inside the network or the integrator."""

    code = "numerical"

    def __init__(self, message, layer=None, step=None, index=None):
        parts = [message]
        if layer is not None:
            parts.append(f"layer={layer}")
        if step is not None:
            parts.append(f"step={step}")
        if index is not None:
            parts.append(f"hypothesis={index}")
        super().__init__(" ".join(parts))
        self.layer = layer
        self.step = step
        self.index = index


class TrainingDivergedError(PoseDiffError, RuntimeError):
    code = "diverged"

    def __init__(self, message, step, loss_curve):
        super().__init__(f"{message} at step {step}")
        self.step = step
        self.loss_curve = loss_curve


class ConfigError(PoseDiffError, ValueError):
    code = "config"


class CheckpointError(PoseDiffError, ValueError):
    code = "checkpoint"
