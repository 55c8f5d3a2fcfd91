"""Exception types shared across the package."""

from __future__ import annotations


class ToolScoutError(Exception):
    """Base class for every error raised by this package."""


class CatalogError(ToolScoutError):
    """Invalid tool catalog data or unknown tool reference."""


class DatasetError(ToolScoutError):
    """Invalid query dataset data."""


class EmbeddingError(ToolScoutError):
    """An embedding provider failed or returned malformed output."""


class TemplateError(ToolScoutError):
    """A prompt template could not be rendered."""


class ProviderError(ToolScoutError):
    """A language-model provider failed after retries."""


class TranscriptMissError(ProviderError):
    """A strict scripted provider had no entry for the requested key."""


class PlanningError(ToolScoutError):
    """The planner produced unusable output."""


class StaleIndexError(ToolScoutError):
    """A dense index was built from an older catalog version; rebuild it."""


class PipelineError(ToolScoutError):
    """A query run failed mid-way; carries the partial trace."""

    def __init__(self, query_id: str, message: str, trace: list | None = None):
        super().__init__(f"query {query_id}: {message}")
        self.query_id = query_id
        self.trace = list(trace or [])


class TrainingDivergedError(ToolScoutError):
    """Training hit a non-finite loss."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class OptimizerError(ToolScoutError):
    """A description-optimization step produced unusable output."""


class FixtureError(ToolScoutError):
    """Fixture generation failed a construction check."""


class ConfigError(ToolScoutError):
    """Invalid or incomplete configuration."""
