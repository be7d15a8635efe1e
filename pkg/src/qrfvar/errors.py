"""Exception hierarchy. Every error carries a short ``kind`` used by the CLI."""


class QrfVarError(Exception):
    kind = "error"


class ConfigError(QrfVarError, ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    kind = "config"

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FactorizationError(ConfigError):
    kind = "factorization"

    def __init__(self, minor, message):
        self.minor = minor
        super().__init__("rho", message)


class CalibrationSetTooSmall(QrfVarError, ValueError):
    kind = "calibration"

    def __init__(self, alpha, n_calib, minimum):
        self.alpha = alpha
        self.n_calib = n_calib
        self.minimum = minimum
        super().__init__(
            f"calibration set of size {n_calib} is too small for alpha={alpha}: "
            f"the finite-sample rank exceeds the set size; need at least {minimum} "
            "calibration points (use more data or a larger calibration fraction)"
        )


class DimensionMismatch(QrfVarError, ValueError):
    kind = "dimension"


class ModelFormatError(QrfVarError, ValueError):
    kind = "model-format"
