"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class OvemotionError(Exception):
    """Base class for all toolkit errors."""


# --- label space ---------------------------------------------------------


class EmptyLabel(OvemotionError):
    """Raised when a raw label contains no non-whitespace character."""


class GrouperUnavailable(OvemotionError):
    """Raised when the grouping backend keeps failing after retries."""


class ParseFailure(OvemotionError):
    """A model reply could not be parsed. Preserves the raw reply for audit."""

    def __init__(self, message: str, reply: str):
        super().__init__(message)
        self.reply = reply


# --- metrics -------------------------------------------------------------


class EmptyAnnotation(OvemotionError):
    """Raised when a sample is scored without any annotated label."""


class EmptyCorpus(OvemotionError):
    """Raised when corpus-level scoring receives no samples."""


# --- model gateway -------------------------------------------------------


class GatewayError(OvemotionError):
    """Base class for backend call failures."""


class BackendTimeout(GatewayError):
    """The backend did not answer within the configured timeout."""


class BackendRejected(GatewayError):
    """The backend answered with a non-2xx status. Body is preserved."""

    def __init__(self, message: str, status: int = 0, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class ConnectionFailed(GatewayError):
    """The backend endpoint could not be reached."""


class RetriesExhausted(GatewayError):
    """All retry attempts for a backend call failed."""

    def __init__(self, message: str, attempts: int, last_error: Exception | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class TemplateBindingError(OvemotionError):
    """A prompt template was rendered with missing placeholder bindings."""


class UnknownBackend(OvemotionError):
    """A configuration referenced a backend name the gateway does not know."""


# --- pipeline ------------------------------------------------------------


class MissingPrerequisite(OvemotionError):
    """A pipeline stage ran before the stages it depends on."""


class ManifestInvalid(OvemotionError):
    """The input manifest is malformed (duplicate or missing sample ids)."""


class PipelineAbort(OvemotionError):
    """Fatal error that must stop the whole batch (crash semantics).

    Unlike per-sample failures, this propagates out of the runner. State
    written so far stays on disk so a resume run can pick up from it.
    """


# --- dataset -------------------------------------------------------------


class SchemaViolation(OvemotionError):
    """A dataset file violated the record schema."""

    def __init__(self, message: str, line: int = 0, field: str = ""):
        super().__init__(message)
        self.line = line
        self.field = field


class CountMismatch(OvemotionError):
    """Split counts do not add up to the dataset size."""


# --- harness / cli -------------------------------------------------------


class PredictionsMissing(OvemotionError):
    """The predictions file for an experiment is absent or unreadable."""


class UnknownBaseline(OvemotionError):
    """A baseline name was not found among the report rows."""


class ConfigError(OvemotionError):
    """A configuration file is invalid. Names the offending key."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key
