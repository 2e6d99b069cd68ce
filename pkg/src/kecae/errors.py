"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class RankError(ValueError):
    """An operation required a scalar (or specific-rank) tensor."""


class DataError(Exception):
    """Dataset contents violate a pipeline precondition."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class PgmParseError(ValueError):
    """Malformed PGM stream; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Run configuration is malformed or contains unknown keys."""
