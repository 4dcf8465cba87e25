"""
Model registry
In-memory store of loaded forests for the model service.
Ids are the first 12 hex digits of the SHA-256 of the canonical model document, so loading the
same forest twice (from a file or an upload) yields the same id.
"""
import hashlib
import logging
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from errors import ModelFormatError
from forest import Forest
from models import ModelInfo

logger = logging.getLogger(__name__)


class ModelRegistry:
    """Thread-safe in-memory model store"""

    def __init__(self):
        self.models: Dict[str, Tuple[Forest, float]] = {}
        self._lock = threading.Lock()

    # ─── CRUD ────────────────────────────────

    @staticmethod
    def model_id(document: str) -> str:
        return hashlib.sha256(document.encode("utf-8")).hexdigest()[:12]

    def add_document(self, document: str) -> Tuple[str, Forest]:
        forest = Forest.from_json(document)
        model_id = self.model_id(forest.to_json())
        with self._lock:
            if model_id not in self.models:
                self.models[model_id] = (forest, time.time())
                logger.info("registered model %s (%d trees)", model_id, len(forest.trees))
        return model_id, self.models[model_id][0]

    def get_model(self, model_id: str) -> Optional[Forest]:
        entry = self.models.get(model_id)
        return None if entry is None else entry[0]

    def info(self, model_id: str) -> Optional[ModelInfo]:
        entry = self.models.get(model_id)
        if entry is None:
            return None
        forest, loaded_at = entry
        return ModelInfo(
            modelId=model_id,
            method=forest.method,
            task=forest.task,
            trees=len(forest.trees),
            nFeatures=forest.n_features,
            sites=forest.sites,
            ledger=forest.ledger,
            loadedAt=loaded_at,
        )

    def list_models(self) -> List[ModelInfo]:
        return [self.info(model_id) for model_id in sorted(self.models)]

    def remove_model(self, model_id: str) -> bool:
        with self._lock:
            if model_id in self.models:
                del self.models[model_id]
                return True
        return False

    def get_model_count(self) -> int:
        return len(self.models)

    def clear(self) -> None:
        with self._lock:
            self.models.clear()

    # ─── Startup ──────────────────────────────

    def load_directory(self, directory: Union[str, Path]) -> List[str]:
        """Register every *.json model document of a directory; broken files are skipped"""
        loaded = []
        for path in sorted(Path(directory).glob("*.json")):
            try:
                model_id, _ = self.add_document(path.read_text())
            except (ModelFormatError, OSError) as exc:
                logger.warning("skipping %s: %s", path, exc)
                continue
            loaded.append(model_id)
        return loaded


# Global singleton
model_registry = ModelRegistry()
