"""
Exception hierarchy for mtl-lab
"""
from typing import Optional


class MtlLabError(ValueError):
    """Base class for every error raised by the toolkit"""


class TensorIOError(MtlLabError):
    """A byte sink or source failed mid-transfer"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FormatError(MtlLabError):
    """Malformed tensor file or CSV input

    `field` names the header field or column that failed; `line` is set for
    text formats.
    """

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        where = f" [line {line}]" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.field = field
        self.line = line


class DimensionError(MtlLabError):
    """Shapes or counts that have to agree do not"""


class DomainError(MtlLabError):
    """An argument is outside the domain of the operation"""


class DegenerateRankingError(MtlLabError):
    """A ranked vector is constant, so rank correlation is undefined"""


class CapacityError(MtlLabError):
    """Input size exceeds a hard enumeration guard"""


class InfeasibleBudgetError(MtlLabError):
    """No branch tree fits the resource budget"""

    def __init__(self, budget: float, cheapest: float):
        super().__init__(
            f"no tree fits budget {budget:g}; cheapest tree needs {cheapest:g}"
        )
        self.budget = budget
        self.cheapest = cheapest


class MissingHistoryError(MtlLabError):
    """A trace lacks the iterations a strategy needs"""


class GeometryError(MtlLabError):
    """Crop sampling cannot satisfy its geometric constraints"""


class QueueError(MtlLabError):
    """Embedding queue misuse: non-unit vectors, misaligned dual batches, short queue"""


class PairSetMismatchError(MtlLabError):
    """Two pixel-pair sets were built on different geometry"""
