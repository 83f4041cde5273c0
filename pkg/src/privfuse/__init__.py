"""Privacy-preserving cross-network user embeddings.

Sanitize each network locally (numeric/categorical attributes, friendship
edges and post text under separate budgets), embed it with a relation-aware
graph encoder, align the two embedding spaces without supervision and fuse
them over the predicted anchor users.
"""

from importlib.resources import files

__version__ = "0.1.0"


def fixtures_dir():
    """Directory holding the bundled synthetic fixtures."""
    return files(__package__) / "fixtures"
