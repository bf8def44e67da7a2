from __future__ import annotations


class NLFError(RuntimeError):
    """Root of every error raised by the package."""


class ShapeError(NLFError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        self.op = op
        self.shapes = shapes
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class AutodiffError(NLFError):
    pass


class GeometryError(NLFError, ValueError):
    pass


class ScanFormatError(NLFError, ValueError):
    def __init__(self, message: str, *, offset: int | None = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(NLFError):
    pass


class NumericalAbort(NLFError):
    def __init__(self, message: str, *, checkpoint: str | None = None) -> None:
        self.checkpoint = checkpoint
        super().__init__(message)
