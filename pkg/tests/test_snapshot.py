import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqg_lab import measure as ms
from lqg_lab import snapshot as sn


@pytest.fixture
def full(small_stack, small_measure):
    mask = np.zeros(small_stack.grid.shape, bool)
    mask[5:30, 10:50] = True
    s = sn.Snapshot.from_stack(small_stack, bands=True).with_measure(small_measure)
    s.mask = mask
    return s


def test_round_trip(full, small_stack, small_measure, tmp_path):
    path = full.save(tmp_path / "f.lqgf")
    back = sn.load(path)
    assert back.flags == sn.FIELD | sn.BANDS | sn.MEASURE | sn.MASK
    np.testing.assert_array_equal(back.field, small_stack.values)
    for a, b in zip(back.bands, small_stack.bands):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.measure, small_measure.masses)
    np.testing.assert_array_equal(back.mask, full.mask)
    assert back.params == small_stack.params
    assert back.grid == small_stack.grid
    assert back.content_hash() == full.content_hash()
    lg = back.liouville()
    assert lg.total == pytest.approx(small_measure.total, rel=1e-15)
    np.testing.assert_array_equal(ms.build_measure(back.stack()).masses, small_measure.masses)


def test_field_only(small_stack):
    s = sn.Snapshot.from_stack(small_stack)
    back = sn.from_bytes(s.to_bytes())
    assert back.flags == sn.FIELD and back.bands is None and back.measure is None
    with pytest.raises(sn.SnapshotFormatError):
        back.liouville()


def test_bad_magic(full):
    data = full.to_bytes()
    with pytest.raises(sn.SnapshotFormatError):
        sn.from_bytes(b"NOPE" + data[4:])


def test_bad_version(full):
    data = bytearray(full.to_bytes())
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(sn.SnapshotFormatError):
        sn.from_bytes(bytes(data))


def test_unknown_flags(full):
    data = bytearray(full.to_bytes())
    data[8:12] = struct.pack("<I", 0x40)
    with pytest.raises(sn.SnapshotFormatError):
        sn.from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [1, 7, 1000])
def test_truncated(full, cut):
    with pytest.raises(sn.SnapshotCorruptError):
        sn.from_bytes(full.to_bytes()[:-cut])


def test_trailing_bytes(small_stack):
    data = sn.Snapshot.from_stack(small_stack).to_bytes()
    with pytest.raises(sn.SnapshotCorruptError):
        sn.from_bytes(data + b"\0" * 8)


def test_shape_mismatch(small_stack):
    s = sn.Snapshot(small_stack.params, small_stack.grid, np.zeros((3, 3)))
    with pytest.raises(sn.SnapshotFormatError):
        s.to_bytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=16, max_size=16).map(lambda v: np.array(v).reshape(4, 4)))
def test_mask_rle_round_trip(mask):
    from lqg_lab import field as fld
    g = fld.Grid((0.0, 0.0), 1.0, 4)
    p = fld.KernelParams.dyadic(1.0, 0.5, 2)
    s = sn.Snapshot(p, g, np.zeros((4, 4)), mask=mask)
    np.testing.assert_array_equal(sn.from_bytes(s.to_bytes()).mask, mask)
