"""
Exception hierarchy for fedforest.
The CLI maps these onto its exit codes; the HTTP service maps them onto status codes.
"""
from typing import Optional


class FedForestError(Exception):
    """Base class for every error raised by the package"""


class ConfigError(FedForestError, ValueError):
    """Invalid or unknown configuration"""


class DataError(FedForestError):
    """Unreadable or inconsistent input data"""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        row: Optional[int] = None,
        column: Optional[str] = None,
    ):
        self.path = path
        self.row = row
        self.column = column
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class EmptyNodeError(FedForestError, ValueError):
    """Impurity or leaf value requested for a node with no samples"""


class TaskMismatchError(FedForestError, ValueError):
    """Statistics or shards belonging to different task kinds were combined"""


class ProtocolInconsistencyError(FedForestError):
    """A client reply contradicts a summary the same client sent earlier"""

    def __init__(
        self,
        message: str,
        tree_id: Optional[int] = None,
        path: Optional[str] = None,
        client_id: Optional[int] = None,
    ):
        self.tree_id = tree_id
        self.path = path
        self.client_id = client_id
        super().__init__(
            f"{message} [tree={tree_id}, node='{path}', client={client_id}]"
            if tree_id is not None
            else message
        )


class ModelFormatError(DataError):
    """Model document with an unknown version or a malformed body"""


class MissingSiteError(FedForestError, ValueError):
    """Routing reached a client-set split without a site id and fallback was disabled"""
