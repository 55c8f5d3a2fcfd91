"""Tool retrieval engine: query planning, dense + lexical retrieval with
LM reranking, and an edit-and-evaluate loop that improves tool descriptions.

Subpackages are intentionally small and composable; see README for the
pipeline wiring and the CLI.
"""

from .errors import ToolScoutError

__all__ = ["ToolScoutError"]
__version__ = "0.1.0"
