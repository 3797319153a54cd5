"""Stage abstraction and registry of the construction pipeline."""

import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from ..core.bvp_solver import BvpProblem, EpsFamily, GluedField
from ..core.characteristics import MetricFactor
from ..core.envelope import Envelope, EnvelopeFn
from ..core.radial_ode import ConeParams, RadialProfile, make_cone_params
from ..errors import MissingArtifact
from ..model import PipelineConfig, StageName, StageResult
from ..utils.io import ensure_dir


@dataclass
class PipelineContext:
    """State shared between stages of one run.

    Every stage reads what its prerequisites left here and stores its own products for the stages after it.
    """

    config: PipelineConfig
    output_dir: str
    params: Optional[ConeParams] = None
    std: Optional[RadialProfile] = None
    mod: Optional[RadialProfile] = None
    env: Optional[EnvelopeFn] = None
    domain_env: Optional[Envelope] = None
    problem: Optional[BvpProblem] = None
    family: Optional[EpsFamily] = None
    glued: Optional[GluedField] = None
    glued_digest: Optional[str] = None
    metric: Optional[MetricFactor] = None
    results: Dict[str, StageResult] = field(default_factory=dict)

    def __post_init__(self):
        if self.params is None:
            c = self.config
            self.params = make_cone_params(c.n, c.m, c.ell, c.eta, c.e_exponent)

    def stage_dir(self, name: StageName) -> str:
        return ensure_dir(os.path.join(self.output_dir, name.value))

    def path(self, name: StageName, filename: str) -> str:
        return os.path.join(self.stage_dir(name), filename)

    def require(self, attribute: str, stage: StageName) -> Any:
        """Fetch a product of an earlier stage.

        Raises:
            MissingArtifact: If the producing stage did not run or did not finish.
        """
        value = getattr(self, attribute)
        if value is None:
            raise MissingArtifact(f'{attribute} is not available; run the {stage.value} stage first')
        return value


class Stage(ABC):
    """One step of the pipeline.

    Subclasses fill ``self.result`` while running; artifacts recorded there before an error are kept in the
    report of a failed stage.
    """

    name: StageName

    def __init__(self, context: PipelineContext):
        self.context = context
        self.config = context.config
        self.result = StageResult(name=self.name.value)

    @abstractmethod
    def run(self) -> StageResult:
        """Execute the stage and return its result with ``passed`` set."""
        raise NotImplementedError()

    def add_artifacts(self, paths: List[str]) -> None:
        self.result.artifacts.extend(os.path.relpath(p, self.context.output_dir) for p in paths)

    def finish(self) -> StageResult:
        """Mark the stage passed iff every recorded check holds."""
        self.result.passed = all(self.result.checks.values())
        return self.result


class StageFactory:
    """Factory for creating pipeline stages."""

    _registry: Dict[StageName, type] = {}

    @classmethod
    def register(cls, stage_name: StageName, stage_class: type) -> None:
        """Register a stage class.

        Args:
            stage_name: Stage name to register
            stage_class: Stage class to register
        """
        cls._registry[stage_name] = stage_class

    @classmethod
    def create_stage(cls, stage_name: StageName, context: PipelineContext) -> Stage:
        """Create a stage bound to a pipeline context.

        Args:
            stage_name: Name of the stage to create
            context: Shared pipeline context

        Returns:
            Stage instance

        Raises:
            ValueError: If the stage name is not registered
        """
        stage_name = StageName(stage_name)
        if stage_name not in cls._registry:
            raise ValueError(
                f"Stage '{stage_name.value}' not registered. "
                f'Available stages: {[s.value for s in cls._registry]}'
            )
        return cls._registry[stage_name](context)

    @classmethod
    def get_registered_types(cls) -> List[StageName]:
        """Get list of registered stage names.

        Returns:
            List of registered stage names
        """
        return list(cls._registry.keys())


def register_stage(stage_name: StageName) -> Callable[..., type]:
    """Decorator to register a pipeline stage class.

    Args:
        stage_name: Stage name to register

    Returns:
        Decorator function
    """

    def decorator(stage_class: type) -> type:
        stage_class.name = stage_name
        StageFactory.register(stage_name, stage_class)
        return stage_class

    return decorator
