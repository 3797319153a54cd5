"""Base enumerations."""

from enum import Enum
from typing import List


class ProfileVariant(str, Enum):
    """Which radial ODE a profile solves."""

    STANDARD = 'standard'
    MODIFIED = 'modified'


class ClosedSetKind(str, Enum):
    """Supported descriptions of the prescribed singular set K."""

    FINITE_POINTS = 'finite_points'
    INTERVAL_UNION = 'interval_union'
    CANTOR_LIKE = 'cantor_like'


class YBoundary(str, Enum):
    """Treatment of the first and last y rows of a grid."""

    PERIODIC = 'periodic'
    ONE_SIDED = 'one_sided'
    REFLECT = 'reflect'


class SliceStatus(str, Enum):
    """Outcome of a rescaled slice comparison."""

    PASSED = 'passed'
    FAILED = 'failed'
    HYPOTHESIS_UNMET = 'hypothesis_unmet'


class StageName(str, Enum):
    """Pipeline stages in execution order."""

    RADIAL = 'radial'
    ENVELOPE = 'envelope'
    SUPERSOLUTION = 'supersolution'
    BVP = 'bvp'
    METRIC = 'metric'
    STABILITY = 'stability'

    @classmethod
    def ordered(cls) -> List['StageName']:
        return [cls.RADIAL, cls.ENVELOPE, cls.SUPERSOLUTION, cls.BVP, cls.METRIC, cls.STABILITY]

    @classmethod
    def with_prerequisites(cls, stages: List['StageName']) -> List['StageName']:
        """
        Close a stage selection under its prerequisites and return it in execution order.

        Every stage needs all stages before it, except that the envelope does not need the radial
        profiles and the stability stage on its own only needs the radial profiles.
        """
        prerequisites = {
            cls.RADIAL: set(),
            cls.ENVELOPE: set(),
            cls.SUPERSOLUTION: {cls.RADIAL, cls.ENVELOPE},
            cls.BVP: {cls.RADIAL, cls.ENVELOPE, cls.SUPERSOLUTION},
            cls.METRIC: {cls.RADIAL, cls.ENVELOPE, cls.SUPERSOLUTION, cls.BVP},
            cls.STABILITY: {cls.RADIAL},
        }
        selected = set(stages)
        pending = list(stages)
        while pending:
            for dep in prerequisites[pending.pop()]:
                if dep not in selected:
                    selected.add(dep)
                    pending.append(dep)
        return [stage for stage in cls.ordered() if stage in selected]
