"""
File formats and numeric containers shared by every mtl-lab module

MTKT tensor layout (little-endian throughout):

    magic      4 bytes   b"MTKT"
    version    u32       1
    dtype      u8        0 = float32, 1 = float64
    ndim       u8
    dims       u64 * ndim
    data       row-major elements
"""
import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import numpy.typing as npt

from errors import DimensionError, DomainError, FormatError, MissingHistoryError, TensorIOError

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.floating]
PathOrText = Union[str, Path, TextIO]

MAGIC = b"MTKT"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}

_HEADER = struct.Struct('<4sIBB')
_DIM = struct.Struct('<Q')

TRACE_HEADER = ['iter', 'task', 'loss', 'grad_norm']
METRIC_HEADER = ['task', 'metric', 'lower_is_better']
KPI_HEADER = ['iter', 'task', 'kpi']


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

def check_tensor(t: np.ndarray, allow_non_finite: bool = False) -> np.ndarray:
    """Return `t` if it is a valid Tensor (f32/f64, finite unless allowed)"""
    if not isinstance(t, np.ndarray):
        raise DomainError(f"tensor must be a numpy array, got {type(t).__name__}")
    if t.dtype not in DTYPE_CODES:
        raise DomainError(f"unsupported tensor dtype {t.dtype}; use float32 or float64")
    if t.ndim > 255:
        raise DimensionError(f"tensor rank {t.ndim} exceeds 255")
    if not allow_non_finite and not np.all(np.isfinite(t)):
        raise DomainError("tensor contains non-finite elements")
    return t


def encode_tensor(t: np.ndarray, allow_non_finite: bool = False) -> bytes:
    """Serialize a tensor to MTKT bytes"""
    check_tensor(t, allow_non_finite)
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_CODES[t.dtype], t.ndim)
    dims = b''.join(_DIM.pack(d) for d in t.shape)
    data = np.ascontiguousarray(t, dtype=CODE_DTYPES[DTYPE_CODES[t.dtype]]).tobytes()
    return header + dims + data


def write_tensor(t: np.ndarray, destination: BinaryIO, allow_non_finite: bool = False) -> int:
    """
    Write `t` to a binary sink in MTKT format

    Returns:
        Total number of bytes written
    """
    payload = encode_tensor(t, allow_non_finite)
    view = memoryview(payload)
    offset = 0
    try:
        while offset < len(payload):
            written = destination.write(view[offset:])
            if written is None:
                written = len(payload) - offset
            if written <= 0:
                raise OSError("sink accepted no bytes")
            offset += written
    except OSError as e:
        raise TensorIOError(f"write failed: {e}", offset) from e
    return offset


def _read_exact(source: BinaryIO, n: int, what: str, offset: int) -> bytes:
    try:
        chunk = source.read(n)
    except OSError as e:
        raise TensorIOError(f"read failed while reading {what}: {e}", offset) from e
    chunk = chunk or b''
    if len(chunk) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(chunk)}", field=what)
    return chunk


def read_tensor(source: BinaryIO, allow_non_finite: bool = False) -> np.ndarray:
    """Read one MTKT tensor from a binary source (inverse of write_tensor)"""
    raw = _read_exact(source, _HEADER.size, 'header', 0)
    magic, version, code, ndim = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError("bad magic", field='magic')
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", field='version')
    if code not in CODE_DTYPES:
        raise FormatError(f"unsupported dtype code {code}", field='dtype')

    offset = _HEADER.size
    shape = []
    for axis in range(ndim):
        (dim,) = _DIM.unpack(_read_exact(source, _DIM.size, f'dim[{axis}]', offset))
        shape.append(dim)
        offset += _DIM.size

    dtype = CODE_DTYPES[code]
    count = math.prod(shape)
    expected = count * dtype.itemsize
    try:
        data = source.read(expected) or b''
    except OSError as e:
        raise TensorIOError(f"read failed while reading data: {e}", offset) from e
    if len(data) != expected:
        raise FormatError(
            f"truncated data: header declares {count} elements, "
            f"{len(data) // dtype.itemsize} present",
            field='data',
        )

    t = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    if not allow_non_finite:
        bad = np.flatnonzero(~np.isfinite(t))
        if bad.size:
            raise FormatError(f"non-finite element at flat index {int(bad[0])}", field='data')
    return t


def write_tensor_file(path: Union[str, Path], t: np.ndarray,
                      metadata: Optional[Mapping[str, object]] = None) -> int:
    """Write a tensor file; metadata goes to a `<path>.meta` sidecar"""
    path = Path(path)
    with open(path, 'wb') as f:
        n = write_tensor(t, f)
    if metadata is not None:
        Path(f"{path}.meta").write_text('\n'.join(metadata_lines(metadata)) + '\n', encoding='utf-8')
    logger.debug("wrote %s (%d bytes, shape %s)", path, n, t.shape)
    return n


def read_tensor_file(path: Union[str, Path], allow_non_finite: bool = False) -> np.ndarray:
    """Read a tensor file written by write_tensor_file"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tensor file not found: {path}")
    with open(path, 'rb') as f:
        return read_tensor(f, allow_non_finite)


# ---------------------------------------------------------------------------
# Task traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    task: int
    loss: float
    grad_norm: Optional[float] = None


@dataclass
class TaskTrace:
    """Per-iteration, per-task loss values and shared-layer gradient magnitudes"""

    tasks: List[str]
    records: List[TraceRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        last = -1
        for rec in self.records:
            if rec.iteration < 0:
                raise DomainError(f"negative iteration {rec.iteration}")
            if rec.iteration < last:
                raise FormatError("iterations must be non-decreasing", field='iter')
            if not 0 <= rec.task < len(self.tasks):
                raise DimensionError(f"task index {rec.task} out of range")
            key = (rec.iteration, rec.task)
            if key in seen:
                raise FormatError(f"duplicate record for {key}", field='task')
            if not math.isfinite(rec.loss) or rec.loss < 0:
                raise DomainError(f"invalid loss {rec.loss} at {key}")
            if rec.grad_norm is not None and not rec.grad_norm >= 0:
                raise DomainError(f"invalid grad_norm {rec.grad_norm} at {key}")
            seen.add(key)
            last = rec.iteration

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def iterations(self) -> List[int]:
        """Distinct iterations in ascending order"""
        return sorted({rec.iteration for rec in self.records})

    def has_iteration(self, iteration: int) -> bool:
        return any(rec.iteration == iteration for rec in self.records)

    def _column(self, iteration: int, attr: str) -> np.ndarray:
        values: Dict[int, Optional[float]] = {
            rec.task: getattr(rec, attr) for rec in self.records if rec.iteration == iteration
        }
        missing = [self.tasks[i] for i in range(self.num_tasks) if values.get(i) is None]
        if missing:
            raise MissingHistoryError(
                f"iteration {iteration} has no {attr} for task(s): {', '.join(missing)}"
            )
        return np.array([values[i] for i in range(self.num_tasks)], dtype=np.float64)

    def losses_at(self, iteration: int) -> np.ndarray:
        return self._column(iteration, 'loss')

    def grad_norms_at(self, iteration: int) -> np.ndarray:
        return self._column(iteration, 'grad_norm')

    def up_to(self, iteration: int) -> 'TaskTrace':
        """Trace restricted to iterations <= `iteration`"""
        return TaskTrace(list(self.tasks), [r for r in self.records if r.iteration <= iteration])


def _open_text(source: PathOrText) -> Tuple[TextIO, bool]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"CSV file not found: {path}")
        return open(path, newline='', encoding='utf-8'), True
    return source, False


def _data_lines(stream: TextIO) -> Iterable[Tuple[int, List[str]]]:
    """Yield (line number, cells), skipping `#` metadata and blank lines"""
    for lineno, line in enumerate(stream, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        yield lineno, next(csv.reader([stripped]))


def _parse_float(text: str, column: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"unparsable {column} {text!r}", field=column, line=lineno) from None


def read_trace(source: PathOrText) -> TaskTrace:
    """
    Parse a trace CSV with header `iter,task,loss,grad_norm`

    Tasks are indexed in order of first appearance; grad_norm may be empty.
    """
    stream, owned = _open_text(source)
    try:
        rows = _data_lines(stream)
        first = next(rows, None)
        if first is None:
            raise FormatError("empty trace", field='header', line=1)
        lineno, header = first
        if [h.strip() for h in header] != TRACE_HEADER:
            raise FormatError(f"bad header {header!r}; expected {','.join(TRACE_HEADER)}",
                              field='header', line=lineno)

        tasks: List[str] = []
        index: Dict[str, int] = {}
        records: List[TraceRecord] = []
        seen = set()
        last = -1
        for lineno, cells in rows:
            if len(cells) != 4:
                raise FormatError(f"expected 4 columns, got {len(cells)}", line=lineno)
            it_text, task, loss_text, grad_text = (c.strip() for c in cells)
            try:
                iteration = int(it_text)
            except ValueError:
                raise FormatError(f"unparsable iter {it_text!r}", field='iter', line=lineno) from None
            if iteration < 0:
                raise FormatError("negative iteration", field='iter', line=lineno)
            if iteration < last:
                raise FormatError("iterations must be non-decreasing", field='iter', line=lineno)
            if not task:
                raise FormatError("empty task name", field='task', line=lineno)

            loss = _parse_float(loss_text, 'loss', lineno)
            if not math.isfinite(loss):
                raise FormatError("non-finite loss", field='loss', line=lineno)
            if loss < 0:
                raise FormatError("negative loss", field='loss', line=lineno)

            grad_norm = None
            if grad_text:
                grad_norm = _parse_float(grad_text, 'grad_norm', lineno)
                if not math.isfinite(grad_norm) or grad_norm < 0:
                    raise FormatError("negative or non-finite grad_norm", field='grad_norm', line=lineno)

            if task not in index:
                index[task] = len(tasks)
                tasks.append(task)
            key = (iteration, task)
            if key in seen:
                raise FormatError(f"duplicate record for ({iteration}, {task})", field='task', line=lineno)
            seen.add(key)
            last = iteration
            records.append(TraceRecord(iteration, index[task], loss, grad_norm))
    finally:
        if owned:
            stream.close()

    logger.debug("read trace: %d tasks, %d records", len(tasks), len(records))
    return TaskTrace(tasks, records)


def read_table(source: PathOrText, header: Sequence[str]) -> List[Tuple[int, List[str]]]:
    """Read a small CSV with an exact header; returns (line number, cells) rows"""
    stream, owned = _open_text(source)
    try:
        rows = list(_data_lines(stream))
    finally:
        if owned:
            stream.close()
    if not rows or [h.strip() for h in rows[0][1]] != list(header):
        line = rows[0][0] if rows else 1
        raise FormatError(f"bad header; expected {','.join(header)}", field='header', line=line)
    for lineno, cells in rows[1:]:
        if len(cells) != len(header):
            raise FormatError(f"expected {len(header)} columns, got {len(cells)}", line=lineno)
    return [(lineno, [c.strip() for c in cells]) for lineno, cells in rows[1:]]


# ---------------------------------------------------------------------------
# Metric reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-task metric values with lower-is-better flags"""

    tasks: List[str]
    values: np.ndarray
    lower_is_better: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lower_is_better = np.asarray(self.lower_is_better, dtype=np.int64)
        if not (len(self.tasks) == self.values.size == self.lower_is_better.size):
            raise DimensionError("tasks, values and flags must have equal lengths")
        if not np.all(np.isin(self.lower_is_better, (0, 1))):
            raise DomainError("lower_is_better flags must be 0 or 1")


_FLAGS = {'0': 0, '1': 1, 'false': 0, 'true': 1}


def read_metrics(source: PathOrText) -> MetricReport:
    """Parse a metric CSV with header `task,metric,lower_is_better`"""
    tasks, values, flags = [], [], []
    for lineno, (task, metric, flag) in read_table(source, METRIC_HEADER):
        if flag.lower() not in _FLAGS:
            raise FormatError(f"bad lower_is_better {flag!r}", field='lower_is_better', line=lineno)
        value = _parse_float(metric, 'metric', lineno)
        if not math.isfinite(value):
            raise FormatError("non-finite metric", field='metric', line=lineno)
        tasks.append(task)
        values.append(value)
        flags.append(_FLAGS[flag.lower()])
    return MetricReport(tasks, np.array(values), np.array(flags))


def read_kpis(source: PathOrText, tasks: Sequence[str]) -> Dict[int, np.ndarray]:
    """Parse `iter,task,kpi` rows into per-iteration KPI vectors ordered as `tasks`"""
    index = {t: i for i, t in enumerate(tasks)}
    partial: Dict[int, Dict[int, float]] = {}
    for lineno, (it_text, task, kpi_text) in read_table(source, KPI_HEADER):
        try:
            iteration = int(it_text)
        except ValueError:
            raise FormatError(f"unparsable iter {it_text!r}", field='iter', line=lineno) from None
        if task not in index:
            raise FormatError(f"unknown task {task!r}", field='task', line=lineno)
        row = partial.setdefault(iteration, {})
        if index[task] in row:
            raise FormatError(f"duplicate record for ({iteration}, {task})", field='task', line=lineno)
        row[index[task]] = _parse_float(kpi_text, 'kpi', lineno)

    kpis = {}
    for iteration, row in partial.items():
        if len(row) != len(tasks):
            raise MissingHistoryError(f"iteration {iteration} lacks a KPI for some task")
        kpis[iteration] = np.array([row[i] for i in range(len(tasks))], dtype=np.float64)
    return kpis


# ---------------------------------------------------------------------------
# Label maps
# ---------------------------------------------------------------------------

@dataclass
class LabelMap:
    """Dense per-pixel labels: categorical class ids or continuous values"""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ('categorical', 'continuous'):
            raise DomainError(f"unknown label map kind {self.kind!r}")
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got shape {values.shape}")
        if self.kind == 'categorical':
            if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
                raise DomainError("categorical labels must be integers")
            if np.any(values < 0):
                raise DomainError("categorical labels must be non-negative")
            self.values = values.astype(np.int64)
        else:
            if not np.all(np.isfinite(values)):
                raise DomainError("continuous labels must be finite")
            self.values = values.astype(np.float64)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def load_label_map(path: Union[str, Path], kind: str) -> LabelMap:
    """Read an [H, W] MTKT tensor as a label map of the given kind"""
    return LabelMap(kind, read_tensor_file(path))


# ---------------------------------------------------------------------------
# Text outputs
# ---------------------------------------------------------------------------

def metadata_lines(metadata: Mapping[str, object]) -> List[str]:
    return [f"# {key}={value}" for key, value in metadata.items()]


def _cell(value: object) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    return str(value)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[object]],
              metadata: Optional[Mapping[str, object]] = None) -> None:
    """Write a CSV with optional `# key=value` metadata lines before the header"""
    buf = io.StringIO()
    if metadata:
        buf.write('\n'.join(metadata_lines(metadata)) + '\n')
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding='utf-8')


def write_text(path: Union[str, Path], lines: Iterable[str],
               metadata: Optional[Mapping[str, object]] = None) -> None:
    body = list(metadata_lines(metadata)) if metadata else []
    body.extend(lines)
    Path(path).write_text('\n'.join(body) + '\n', encoding='utf-8')
