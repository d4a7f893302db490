"""Exception types shared across the pipeline."""


class HpnetError(Exception):
    """Base class for all errors raised by this package."""


class FrameTooShort(HpnetError):
    """Frame is shorter than its link-layer header."""


class UnsupportedProtocol(HpnetError):
    """Packet is outside the strict IPv4 + TCP/UDP scope."""


class CaptureError(HpnetError):
    """A capture file cannot be read (bad magic, truncated, unsupported link type)."""


class UnsupportedLinkType(CaptureError):
    pass


class RecordFileError(HpnetError):
    pass


class BadMagic(RecordFileError):
    pass


class VersionMismatch(RecordFileError):
    pass


class TruncatedRecord(RecordFileError):
    def __init__(self, index, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"record {index} truncated{where}")
        self.index = index


class ShapeMismatch(HpnetError, ValueError):
    pass


class LabelOutOfRange(HpnetError, ValueError):
    pass


class ClassTooSmall(HpnetError):
    pass


class InvalidSpec(HpnetError, ValueError):
    pass


class EmptySplit(HpnetError):
    pass


class DivergedLoss(HpnetError):
    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


class ConfigError(HpnetError, ValueError):
    """A config, rule or manifest file is malformed."""
