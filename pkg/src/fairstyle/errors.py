"""Exception hierarchy shared by all fairstyle modules."""


class FairStyleError(Exception):
    """Base class; ``code`` is the machine-readable kind used in CLI error JSON."""

    code = "error"

    def __init__(self, message: str, *, field: str | None = None, index: int | None = None):
        super().__init__(message)
        self.field = field
        self.index = index

    def to_json(self) -> dict:
        out = {"error": self.code, "message": str(self)}
        if self.field is not None:
            out["field"] = self.field
        if self.index is not None:
            out["index"] = self.index
        return out


class ConfigurationError(FairStyleError, ValueError):
    code = "configuration"


class AddressError(ConfigurationError, IndexError):
    code = "address"


class DegenerateChannelError(ConfigurationError):
    code = "degenerate_channel"


class FingerprintMismatchError(ConfigurationError):
    code = "fingerprint_mismatch"


class GenerationError(FairStyleError, RuntimeError):
    code = "generation"


class LabelingError(FairStyleError, RuntimeError):
    code = "labeling"

    def __init__(self, message: str, *, attribute: str, index: int | None = None):
        super().__init__(message, index=index)
        self.attribute = attribute

    def to_json(self) -> dict:
        return {**super().to_json(), "attribute": self.attribute}
