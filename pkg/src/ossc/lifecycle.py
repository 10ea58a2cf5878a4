"""Environment kinds and the provisioning phase ladder.

Shared by the provisioner (which drives transitions) and the network model
(which gates management reachability and join preconditions on phases).
"""

from enum import Enum, IntEnum


class EnvKind(Enum):
    WORK = "Work"
    COMPUTE = "Compute"
    MANAGEMENT = "Management"
    DATA_MANAGER = "DataManager"


class Phase(IntEnum):
    REQUESTED = 0
    ALLOCATED = 1
    INITIALIZING = 2
    CONFIGURED = 3
    LOCKED_DOWN = 4
    RUNNING = 5
    DESTROYING = 6
    DESTROYED = 7

    @property
    def label(self) -> str:
        return {
            Phase.REQUESTED: "Requested",
            Phase.ALLOCATED: "Allocated",
            Phase.INITIALIZING: "Initializing",
            Phase.CONFIGURED: "Configured",
            Phase.LOCKED_DOWN: "LockedDown",
            Phase.RUNNING: "Running",
            Phase.DESTROYING: "Destroying",
            Phase.DESTROYED: "Destroyed",
        }[self]


PHASE_BY_LABEL = {p.label: p for p in Phase}
