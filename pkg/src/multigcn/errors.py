from __future__ import annotations


class MultiGCNError(Exception):
    pass


class ConfigError(MultiGCNError, ValueError):
    """Invalid configuration; ``key`` names the offending setting when known."""

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class ParseError(MultiGCNError, ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SimulationDeadlock(MultiGCNError, RuntimeError):
    """The event queue drained while work was still pending."""

    def __init__(self, message: str, state: dict) -> None:
        super().__init__(message)
        self.state = state


class OracleError(MultiGCNError, ValueError):
    pass
