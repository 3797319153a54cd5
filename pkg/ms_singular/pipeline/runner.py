"""Run the stages of a configuration in order and collect their results."""

import hashlib
import json
import os
import shutil
from typing import Iterable, List, Optional

import numpy as np

from ..core.sme_operator import load_grid
from ..errors import MissingArtifact, SingularSurfaceError
from ..model import PipelineConfig, RunReport, StageName, StageResult
from ..utils import get_logger, read_csv, read_json, write_csv, write_json
from ..utils.io import ensure_dir
from . import stages  # noqa: F401 registers the stages
from .base import PipelineContext, StageFactory

logger = get_logger()

REPORT_FILE = 'run_report.json'
PLOT_DIR = 'plots'


def load_config(path: Optional[str] = None, **overrides) -> PipelineConfig:
    """Load a JSON config file, or the defaults, and apply top-level overrides that are not None."""
    payload = {}
    if path is not None:
        payload = PipelineConfig.from_json_file(path).model_dump()
    payload.update({key: value for key, value in overrides.items() if value is not None})
    return PipelineConfig.model_validate(payload)


def config_digest(config: PipelineConfig) -> str:
    """SHA-256 of the canonical JSON form of the config; the output directory is excluded."""
    payload = config.model_dump(mode='json', exclude={'output_dir'})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()


def _blocked_by(name: StageName, report: RunReport) -> Optional[str]:
    for dep in StageName.with_prerequisites([name]):
        if dep == name:
            continue
        result = report.stages.get(dep.value)
        if result is not None and result.error is not None:
            return dep.value
    return None


def run_pipeline(config: PipelineConfig, stages: Optional[Iterable[StageName]] = None) -> RunReport:
    """Execute the selected stages and their prerequisites, then write plot data and the run report.

    A stage raising a package error is recorded with its tag and the artifacts it already wrote; stages
    depending on it are recorded as skipped.

    Args:
        config: Validated pipeline configuration.
        stages: Stage selection; defaults to ``config.stages``.

    Returns:
        The run report, also written to ``<output_dir>/run_report.json``.
    """
    selected = StageName.with_prerequisites(list(stages or config.stages))
    output_dir = ensure_dir(config.output_dir)
    context = PipelineContext(config=config, output_dir=output_dir)
    report = RunReport(
        config_digest=config_digest(config),
        chosen_constants=config.chosen_constants.model_dump(),
    )
    logger.info('Running stages %s into %s', [s.value for s in selected], output_dir)

    for name in selected:
        blocker = _blocked_by(name, report)
        if blocker is not None:
            logger.warning('Skipping stage %s: prerequisite %s failed', name.value, blocker)
            report.stages[name.value] = StageResult(name=name.value, error=f'[{name.value}] skipped: {blocker} failed')
            continue
        stage = StageFactory.create_stage(name, context)
        logger.info('Stage %s started', name.value)
        try:
            result = stage.run()
        except SingularSurfaceError as e:
            logger.error('Stage %s failed: %s', name.value, e)
            result = stage.result
            result.passed = False
            result.error = f'[{name.value}] {type(e).__name__}: {e}'
        context.results[name.value] = result
        report.stages[name.value] = result
        failed = [check for check, ok in result.checks.items() if not ok]
        logger.info('Stage %s %s%s', name.value, 'passed' if result.passed else 'failed',
                    f' (failing checks: {failed})' if failed else '')

    emit_plot_data(report, output_dir)
    write_json(os.path.join(output_dir, REPORT_FILE), report.model_dump(mode='json'))
    logger.info('Run %s; report written to %s', 'passed' if report.passed else 'failed',
                os.path.join(output_dir, REPORT_FILE))
    return report


def _completed(report: RunReport, name: StageName) -> bool:
    result = report.stages.get(name.value)
    return result is not None and result.error is None


def emit_plot_data(report: RunReport, output_dir: str) -> List[str]:
    """Write the plot series of every completed stage under ``<output_dir>/plots``.

    Series: profile on log axes (radial), u - alpha0 r heatmap and slice curves (bvp), f - 1 heatmap (metric)
    and the stability quotient table (stability).

    Raises:
        MissingArtifact: If a completed stage's artifact is not on disk.
    """
    plots = os.path.join(output_dir, PLOT_DIR)
    written = []

    if _completed(report, StageName.RADIAL):
        cols = read_csv(os.path.join(output_dir, StageName.RADIAL.value, 'profile_standard.csv'))
        written.append(
            write_csv(
                os.path.join(plots, 'profile_log.csv'), {
                    'log10_r': np.log10(cols['r']),
                    'phi': cols['phi'],
                    'excess': cols['excess'],
                    'log10_excess': np.log10(cols['excess']),
                }
            )
        )

    if _completed(report, StageName.BVP):
        bvp_dir = os.path.join(output_dir, StageName.BVP.value)
        grid_path = os.path.join(bvp_dir, 'u_tau.csv')
        grid = load_grid(grid_path)
        alpha0 = read_json(os.path.splitext(grid_path)[0] + '.json')['alpha0']
        r = grid.r
        written.append(
            write_csv(
                os.path.join(plots, 'excess_heatmap.csv'), {
                    'rho': np.broadcast_to(grid.rho[None, :], r.shape),
                    'y': grid.y_mesh,
                    'r': r,
                    'excess': grid.values - alpha0 * r,
                }
            )
        )
        curves = os.path.join(bvp_dir, 'slice_curves.csv')
        if not os.path.exists(curves):
            raise MissingArtifact(f'CSV file not found: {curves}')
        target = os.path.join(ensure_dir(plots), 'slice_curves.csv')
        shutil.copyfile(curves, target)
        written.append(target)

    if _completed(report, StageName.METRIC):
        cols = read_csv(os.path.join(output_dir, StageName.METRIC.value, 'metric_strip.csv'))
        written.append(
            write_csv(os.path.join(plots, 'metric_heatmap.csv'), {
                'r': cols['r'],
                'y': cols['y'],
                'f_minus_one': -cols['z']
            })
        )

    if _completed(report, StageName.STABILITY):
        stability_dir = os.path.join(output_dir, StageName.STABILITY.value)
        families, index, quotient = [], [], []
        for k, name in enumerate(('quotients_slice.csv', 'quotients_glued.csv')):
            path = os.path.join(stability_dir, name)
            if k > 0 and not os.path.exists(path):
                continue
            cols = read_csv(path)
            families.append(np.full(cols['index'].shape, float(k)))
            index.append(cols['index'])
            quotient.append(cols['quotient'])
        written.append(
            write_csv(
                os.path.join(plots, 'stability_quotients.csv'), {
                    'family': np.concatenate(families),
                    'index': np.concatenate(index),
                    'quotient': np.concatenate(quotient),
                }
            )
        )

    for path in written:
        logger.debug('Wrote plot series %s', path)
    return written
