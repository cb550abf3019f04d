"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Malformed or inconsistent input (dimensions, signs, config schema)."""


class CertificationError(RuntimeError):
    """A certification entry point cannot proceed (e.g. unstabilizable pair)."""
