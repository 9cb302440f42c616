"""Exception hierarchy shared by every layer.

Each family carries the process exit code the CLI maps it to.
"""


class GygesError(Exception):
    exit_code = 10


class StoreIOError(GygesError):
    """Backing-file failure (short read, short write, OS error)."""
    exit_code = 10


class PathExistsError(GygesError):
    exit_code = 16


class AlignmentError(GygesError, ValueError):
    exit_code = 15


class OutOfRangeError(GygesError, IndexError):
    exit_code = 15


class UnmappedSectorError(OutOfRangeError):
    pass


class OutOfLabelRangeError(OutOfRangeError):
    pass


class FormatError(GygesError):
    """Image, footer or metadata bytes do not parse."""
    exit_code = 18


class CorruptFooterError(FormatError):
    pass


class FooterPresentError(GygesError):
    exit_code = 16


class BadPasswordError(GygesError):
    exit_code = 11


class BadChunkSizeError(GygesError, ValueError):
    exit_code = 19


class DeviceTooSmallError(GygesError):
    exit_code = 19


class AlreadyMappedError(GygesError):
    exit_code = 16


class StorageFullError(GygesError):
    """Full-storage condition.

    ``written`` is the number of bytes of the failing request that were
    accepted before the condition was hit, mirroring a short ``write(2)``
    followed by ``ENOSPC``.
    """
    exit_code = 14

    def __init__(self, message="no space left on volume", written=0):
        super().__init__(message)
        self.written = written


class PoolExhaustedError(StorageFullError):
    def __init__(self, message="thin pool exhausted", written=0):
        super().__init__(message, written)


class OuterExistsError(GygesError):
    exit_code = 16


class NameCollisionError(GygesError):
    exit_code = 16


class NoOuterVolumeError(GygesError):
    exit_code = 13


class VolumeTableFullError(GygesError):
    exit_code = 14


class UnknownVolumeError(GygesError):
    exit_code = 13


class InvalidTokenError(GygesError):
    exit_code = 12


class AlreadyMountedError(GygesError):
    exit_code = 17


class StaleHandleError(GygesError):
    exit_code = 17


class InconsistentInputsError(GygesError, ValueError):
    exit_code = 19


class ReadOnlyTargetError(GygesError):
    exit_code = 19


class TargetTooSmallError(GygesError):
    exit_code = 19


class ConfigError(GygesError):
    exit_code = 19
