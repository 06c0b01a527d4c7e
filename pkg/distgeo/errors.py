from __future__ import annotations

from typing import Iterable, Optional


class DistGeoError(Exception):
    """Base class for every error raised by distgeo."""


class InvalidInputError(DistGeoError, ValueError):
    pass


class InvalidArgumentError(DistGeoError, ValueError):
    pass


class DegenerateTargetError(DistGeoError, ValueError):
    pass


class DegenerateEdgeError(DistGeoError, ValueError):
    pass


class DegenerateOverlapError(DistGeoError, ValueError):
    pass


class NumericalFailureError(DistGeoError, RuntimeError):
    pass


class InitializationError(DistGeoError, RuntimeError):
    pass


class ConfigError(DistGeoError, ValueError):
    pass


class StoreError(DistGeoError, RuntimeError):
    pass


class CsvFormatError(InvalidInputError):
    def __init__(self, path: str, message: str, line: Optional[int] = None) -> None:
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {message}")


class IdMismatchError(InvalidInputError):
    def __init__(self, missing_in_pred: Iterable[str], missing_in_gt: Iterable[str]) -> None:
        self.missing_in_pred = sorted(missing_in_pred)
        self.missing_in_gt = sorted(missing_in_gt)
        parts = []
        if self.missing_in_pred:
            parts.append(f"missing in prediction: {', '.join(self.missing_in_pred[:20])}")
        if self.missing_in_gt:
            parts.append(f"missing in ground truth: {', '.join(self.missing_in_gt[:20])}")
        super().__init__("id sets differ; " + "; ".join(parts))


class StageError(DistGeoError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")
