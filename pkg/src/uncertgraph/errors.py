"""Exception hierarchy shared across the package."""


class UncertGraphError(ValueError):
    """Base class for every error raised deliberately by this package."""


class ShapeError(UncertGraphError):
    pass


class DomainError(UncertGraphError):
    """An argument lies outside the range an operation is defined on."""


class ParseError(UncertGraphError):
    """Malformed serialized payload.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(UncertGraphError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class MissingArtifactError(UncertGraphError):
    def __init__(self, path, subcommand: str):
        super().__init__(f"missing artifact {path}; run `{subcommand}` first")
        self.path = path
        self.subcommand = subcommand
