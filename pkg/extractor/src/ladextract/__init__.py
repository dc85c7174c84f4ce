"""Model adapter emitting trace files for the calibration engine."""

from .attention import AttentionError, RawAttentionCapture, aggregate_attention
from .job import ExtractionJob, InstanceSpec, JobError, job_from_dict, load_job, scheme_labels
from .runner import EOS_MARKER, ExtractionError, extract_traces, load_template, render_prompt
from .session import ModelSession, PreparedInstance
from .spans import SpanError, locate_image_spans
from .toy import ToySession

__version__ = "0.1.0"
