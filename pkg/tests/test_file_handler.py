import os

import numpy as np
import pandas as pd
import pytest

from itm.services.file_handler import (
    SNAPSHOT_HEADER, atomic_write, read_snapshot, write_snapshot, write_snapshot_index, write_table,
)
from itm.utils.errors import ItmError


class TestSnapshots:
    def test_two_dimensional_field(self, tmp_path, rng):
        values = rng.standard_normal((16, 16))
        path = write_snapshot(str(tmp_path / 'u_0000.bin'), values, 1.25)
        back, t = read_snapshot(path)
        np.testing.assert_array_equal(back, values)
        assert t == 1.25
        assert os.path.getsize(path) == SNAPSHOT_HEADER.itemsize + values.size * 8

    def test_header_is_32_bytes(self):
        assert SNAPSHOT_HEADER.itemsize == 32

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / 'bad.bin'
        path.write_bytes(b'XXXX' + bytes(60))
        with pytest.raises(ItmError) as exc:
            read_snapshot(str(path))
        assert exc.value.code == "ITM-902"

    def test_truncated_body(self, tmp_path):
        path = write_snapshot(str(tmp_path / 'u.bin'), np.ones(32), 0.0)
        with open(path, 'rb') as f:
            raw = f.read()
        with open(path, 'wb') as f:
            f.write(raw[:-8])
        with pytest.raises(ItmError) as exc:
            read_snapshot(path)
        assert exc.value.code == "ITM-902"

    def test_missing(self, tmp_path):
        with pytest.raises(ItmError) as exc:
            read_snapshot(str(tmp_path / 'none.bin'))
        assert exc.value.context.endswith('none.bin')


class TestTables:
    def test_float_format_and_line_endings(self, tmp_path):
        df = pd.DataFrame({'epsilon': [0.1, 0.05], 'norm': [1.0, 2.5e-3], 'tag': ['a', 'b']})
        path = write_table(df, str(tmp_path / 't.csv'))
        with open(path, 'rb') as f:
            body = f.read()
        assert b'\r\n' not in body
        lines = body.decode().splitlines()
        assert lines[0] == 'epsilon,norm,tag'
        assert lines[1] == '1.000000000000e-01,1.000000000000e+00,a'
        assert lines[2] == '5.000000000000e-02,2.500000000000e-03,b'

    def test_same_frame_same_bytes(self, tmp_path):
        df = pd.DataFrame({'x': np.linspace(0.0, 1.0, 7)})
        a = write_table(df, str(tmp_path / 'a.csv'))
        b = write_table(df, str(tmp_path / 'b.csv'))
        with open(a, 'rb') as fa, open(b, 'rb') as fb:
            assert fa.read() == fb.read()

    def test_snapshot_index_columns(self, tmp_path):
        path = write_snapshot_index([{'file': 'u_0000.bin', 'field': 'u', 'time': 0.0, 'd': 1, 'N': 8,
                                      'bytes': 96}], str(tmp_path / 'index.csv'))
        assert list(pd.read_csv(path).columns) == ['file', 'field', 'time', 'd', 'N', 'bytes']


class TestAtomicWrite:
    def test_failure_leaves_nothing(self, tmp_path):
        target = tmp_path / 'out.txt'
        with pytest.raises(RuntimeError):
            with atomic_write(str(target)) as f:
                f.write('partial')
                raise RuntimeError('boom')
        assert not target.exists()
        assert not (tmp_path / 'out.txt.tmp').exists()

    def test_replaces_existing(self, tmp_path):
        target = tmp_path / 'out.txt'
        target.write_text('old')
        with atomic_write(str(target)) as f:
            f.write('new')
        assert target.read_text() == 'new'
