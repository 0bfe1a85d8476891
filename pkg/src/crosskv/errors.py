"""Exception types shared across the package."""

from __future__ import annotations


class CacheMissError(LookupError):
    """A required sender-side cache entry is absent.

    Carries the layer index and cache kind ("kv" or "e") so callers can
    tell exactly which piece of state was missing.
    """

    def __init__(self, layer: int, kind: str, detail: str = ""):
        self.layer = layer
        self.kind = kind
        msg = f"missing {kind} cache for layer {layer}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DegenerateInputError(ValueError):
    """Input too short to carry a reuse window (needs at least 2 tokens)."""


class CapacityError(RuntimeError):
    """A bounded store could not make room for a payload."""


class SchemaError(ValueError):
    """A persisted artifact failed parsing or validation."""

    def __init__(self, path: str, field: str, detail: str):
        self.path = path
        self.field = field
        super().__init__(f"{path}: field {field!r}: {detail}")
