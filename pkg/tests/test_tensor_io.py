import io
import struct

import numpy as np
import pytest

from errors import DomainError, FormatError, MissingHistoryError, TensorIOError
from tensor_io import (LabelMap, read_kpis, read_metrics, read_tensor, read_tensor_file, read_trace,
                       write_csv, write_tensor, write_tensor_file)


def _encode(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(t, buf)
    return buf.getvalue()


def test_scalar_f32_payload_is_ieee754_little_endian():
    data = _encode(np.array(1.0, dtype=np.float32))
    assert data[:4] == b"MTKT"
    assert struct.unpack('<I', data[4:8]) == (1,)
    assert data[8] == 0 and data[9] == 0
    assert data[10:] == bytes.fromhex('0000803f')


def test_identity_matrix_byte_count():
    t = np.eye(2, dtype=np.float32)
    buf = io.BytesIO()
    n = write_tensor(t, buf)
    # 10 header bytes + 2 dims * 8, then 4 elements * 4
    assert n == 10 + 16 + 16 == len(buf.getvalue())


@pytest.mark.parametrize('dtype', [np.float32, np.float64])
@pytest.mark.parametrize('shape', [(), (3,), (2, 5), (2, 3, 4), (1, 2, 3, 2)])
def test_round_trip_identity(rng, dtype, shape):
    t = rng.standard_normal(shape).astype(dtype)
    back = read_tensor(io.BytesIO(_encode(t)))
    assert back.dtype == t.dtype
    assert back.shape == t.shape
    np.testing.assert_array_equal(back, t)


def test_zeros_round_trip():
    np.testing.assert_array_equal(read_tensor(io.BytesIO(_encode(np.zeros(3)))), np.zeros(3))


def test_writing_twice_is_byte_stable(rng):
    t = rng.standard_normal((4, 3))
    assert _encode(t) == _encode(t)


def test_bad_magic():
    data = b"XXXX" + _encode(np.zeros(3))[4:]
    with pytest.raises(FormatError, match="bad magic") as info:
        read_tensor(io.BytesIO(data))
    assert info.value.field == 'magic'


def test_unsupported_version_and_dtype():
    data = bytearray(_encode(np.zeros(3)))
    data[4] = 2
    with pytest.raises(FormatError, match="unsupported version"):
        read_tensor(io.BytesIO(bytes(data)))
    data = bytearray(_encode(np.zeros(3)))
    data[8] = 7
    with pytest.raises(FormatError, match="unsupported dtype"):
        read_tensor(io.BytesIO(bytes(data)))


def test_truncated_data():
    data = _encode(np.zeros(10, dtype=np.float32))
    short = data[:10 + 8 + 4 * 4]
    with pytest.raises(FormatError, match="truncated data") as info:
        read_tensor(io.BytesIO(short))
    assert "10 elements, 4 present" in str(info.value)
    assert info.value.field == 'data'


def test_truncated_header():
    with pytest.raises(FormatError, match="truncated header"):
        read_tensor(io.BytesIO(b"MTK"))


def test_non_finite_rejected_on_write():
    with pytest.raises(DomainError):
        _encode(np.array([1.0, np.nan]))


class _BrokenSink:
    def __init__(self, limit):
        self.limit = limit
        self.size = 0

    def write(self, chunk):
        if self.size >= self.limit:
            raise OSError("disk full")
        n = min(len(chunk), self.limit - self.size)
        self.size += n
        return n


def test_sink_failure_reports_offset():
    with pytest.raises(TensorIOError) as info:
        write_tensor(np.zeros(8), _BrokenSink(20))
    assert info.value.offset == 20


def test_tensor_file_with_sidecar(tmp_path):
    path = tmp_path / 'a.mtkt'
    t = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_tensor_file(path, t, {'seed': 7})
    np.testing.assert_array_equal(read_tensor_file(path), t)
    assert (tmp_path / 'a.mtkt.meta').read_text() == "# seed=7\n"


def test_read_trace_two_tasks():
    trace = read_trace(io.StringIO("iter,task,loss,grad_norm\n0,seg,1.0,\n0,depth,2.0,\n"))
    assert trace.tasks == ['seg', 'depth']
    assert trace.iterations() == [0]
    np.testing.assert_array_equal(trace.losses_at(0), [1.0, 2.0])
    with pytest.raises(MissingHistoryError):
        trace.grad_norms_at(0)


def test_read_trace_skips_metadata_and_keeps_order():
    text = "# tool=x\niter,task,loss,grad_norm\n0,a,1,0.5\n0,b,2,0.25\n1,b,3,1\n1,a,4,2\n"
    trace = read_trace(io.StringIO(text))
    assert len(trace.records) == 4
    assert [(r.iteration, r.task) for r in trace.records] == [(0, 0), (0, 1), (1, 1), (1, 0)]
    np.testing.assert_array_equal(trace.losses_at(1), [4.0, 3.0])
    np.testing.assert_array_equal(trace.grad_norms_at(1), [2.0, 1.0])


def test_duplicate_row_fails_at_second_row():
    text = "iter,task,loss,grad_norm\n0,seg,1.0,\n0,seg,1.5,\n"
    with pytest.raises(FormatError, match="duplicate") as info:
        read_trace(io.StringIO(text))
    assert info.value.line == 3


@pytest.mark.parametrize('row, message', [
    ("0,seg,-1,", "negative loss"),
    ("0,seg,abc,", "unparsable loss"),
    ("x,seg,1,", "unparsable iter"),
    ("0,seg,inf,", "non-finite loss"),
])
def test_bad_trace_rows(row, message):
    with pytest.raises(FormatError, match=message) as info:
        read_trace(io.StringIO(f"iter,task,loss,grad_norm\n{row}\n"))
    assert info.value.line == 2


def test_trace_requires_exact_header():
    with pytest.raises(FormatError, match="bad header"):
        read_trace(io.StringIO("iteration,task,loss,grad_norm\n0,a,1,\n"))


def test_decreasing_iterations_rejected():
    text = "iter,task,loss,grad_norm\n1,a,1,\n0,a,1,\n"
    with pytest.raises(FormatError, match="non-decreasing"):
        read_trace(io.StringIO(text))


def test_read_metrics_flags():
    report = read_metrics(io.StringIO("task,metric,lower_is_better\nseg,61.5,0\ndepth,2.66,true\n"))
    assert report.tasks == ['seg', 'depth']
    np.testing.assert_array_equal(report.lower_is_better, [0, 1])
    with pytest.raises(FormatError, match="lower_is_better"):
        read_metrics(io.StringIO("task,metric,lower_is_better\nseg,61.5,maybe\n"))


def test_read_kpis_orders_by_task():
    kpis = read_kpis(io.StringIO("iter,task,kpi\n0,b,0.25\n0,a,0.5\n"), ['a', 'b'])
    np.testing.assert_array_equal(kpis[0], [0.5, 0.25])
    with pytest.raises(MissingHistoryError):
        read_kpis(io.StringIO("iter,task,kpi\n0,a,0.5\n"), ['a', 'b'])


def test_label_map_invariants():
    m = LabelMap('categorical', np.array([[0.0, 1.0], [2.0, 1.0]]))
    assert (m.height, m.width) == (2, 2)
    assert m.values.dtype == np.int64
    with pytest.raises(DomainError):
        LabelMap('categorical', np.array([[0.0, -1.0]]))
    with pytest.raises(DomainError):
        LabelMap('categorical', np.array([[0.5, 1.0]]))


def test_write_csv_metadata_header(tmp_path):
    path = tmp_path / 'out.csv'
    write_csv(path, ['a', 'b'], [(1, 0.1)], {'seed': 3})
    assert path.read_text() == "# seed=3\na,b\n1,0.10000000000000001\n"
