from .base import PipelineContext, Stage, StageFactory, register_stage
from .runner import config_digest, emit_plot_data, load_config, run_pipeline
