class ConfrankError(Exception):
    """Base class for errors raised by this package."""


class DataError(ConfrankError, ValueError):
    """Input data is unreadable, malformed or inconsistent."""


class UndefinedMetricError(ConfrankError, ValueError):
    """A metric was requested on inputs where it is not defined (e.g. one class)."""


class MissingTeacherError(ConfrankError, KeyError):
    """A teacher logit is absent for an example that needs one."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericalError(ConfrankError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class SnapshotError(ConfrankError):
    """Base class for snapshot file problems."""


class SnapshotChecksumError(SnapshotError):
    pass


class SnapshotDescriptorError(SnapshotError):
    pass


class SnapshotTruncatedError(SnapshotError):
    pass
