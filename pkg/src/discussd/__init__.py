"""discussd: generate, expand, evaluate, and serve proactive-AI discussions."""

__version__ = "0.1.0"

from discussd.transcript import (  # noqa: F401
    Discussion,
    InterventionType,
    Role,
    Turn,
    ValidationReport,
    normalize_headers,
    parse_transcript,
    serialize_transcript,
    validate,
    validate_text,
)
