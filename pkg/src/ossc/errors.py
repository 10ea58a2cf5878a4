"""Exception hierarchy.

Every error carries a stable ``kind`` string (the class name) used by the
CLI and the scenario runner to match expected failures.
"""


class OsscError(Exception):
    """Base class for all platform errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# -- scheduler --------------------------------------------------------------

class InvalidSpec(OsscError):
    pass


class WalltimeExceeded(OsscError):
    pass


class CapacityExceeded(OsscError):
    pass


class NotFound(OsscError):
    pass


class AlreadyTerminal(OsscError):
    pass


# -- provisioner ------------------------------------------------------------

class DuplicateWorkEnv(OsscError):
    pass


class NoWorkEnv(OsscError):
    pass


class DuplicateDataManagerEnv(OsscError):
    pass


class InvalidPhase(OsscError):
    pass


class KeyNotFound(OsscError):
    pass


# -- network model ----------------------------------------------------------

class UnknownHost(OsscError):
    pass


class ProjectMismatch(OsscError):
    pass


class WorkNotRunning(OsscError):
    pass


# -- storage ----------------------------------------------------------------

class PermissionDenied(OsscError):
    pass


# -- data flows -------------------------------------------------------------

class NotAuthenticated(OsscError):
    pass


class NoVpnEdge(OsscError):
    pass


class KeyAccessDenied(OsscError):
    pass


class CollisionDetected(OsscError):
    pass


class NotTtp(OsscError):
    pass


class SchemaMismatch(OsscError):
    pass


class WrongState(OsscError):
    pass


class NotReviewer(OsscError):
    pass


# -- audit ------------------------------------------------------------------

class WrongSink(OsscError):
    pass


# -- benchmarks -------------------------------------------------------------

class InvalidSize(OsscError):
    pass


class InvalidLanes(OsscError):
    pass


class Diverged(OsscError):
    pass


class IoFailure(OsscError):
    pass


class ConfigMismatch(OsscError):
    pass


# -- scenarios --------------------------------------------------------------

class ParseError(OsscError):
    pass


class StepFailed(OsscError):
    def __init__(self, index: int, message: str):
        super().__init__(f"step {index}: {message}")
        self.index = index
