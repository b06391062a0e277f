from __future__ import annotations

import logging
import os
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given
from hypothesis import strategies as st

from congestion_harvester.tile_archive import (ArchiveError, ArchiveHandle, BadTileName, TileFileName,
                                               encode_name, load_manifest, lookup, parse_name,
                                               save_manifest, scan)

T0 = datetime(2020, 6, 1, 9, 0)


def test_documented_example_name():
    assert encode_name(2, 3, T0, safe=False) == "TrafficMap_2_3_06_01_20_09:00.png"


def test_safe_name():
    assert encode_name(2, 3, T0) == "TrafficMap_2_3_06_01_20_09-00.png"


@pytest.mark.parametrize("name", [
    "TrafficMap_2_3_06_01_20_09:00.png",
    "TrafficMap_2_3_06_01_20_09-00.png",
    "TrafficMap_2_3_06_01_20__09:00.png",
])
def test_parse_accepts_all_spellings(name):
    assert parse_name(name) == (2, 3, T0)


def test_multi_digit_indices():
    name = encode_name(12, 105, T0)
    assert parse_name(name)[:2] == (12, 105)


@pytest.mark.parametrize("name", [
    "TrafficMap_0_3_06_01_20_09-00.png", "TrafficMap_2_3_13_01_20_09-00.png",
    "TrafficMap_2_3_02_30_20_09-00.png", "TrafficMap_2_3_06_01_20_24-00.png",
    "TrafficMap_2_3_06_01_20_09-00.jpg", "TrafficMap_a_3_06_01_20_09-00.png", "notes.txt",
])
def test_parse_rejects(name):
    with pytest.raises(BadTileName):
        parse_name(name)


minutes = st.datetimes(min_value=datetime(2000, 1, 1), max_value=datetime(2099, 12, 31, 23, 59)).map(
    lambda d: d.replace(second=0, microsecond=0))


@given(st.integers(1, 999), st.integers(1, 999), minutes, st.booleans())
def test_codec_roundtrip(i, j, ts, safe):
    assert parse_name(encode_name(i, j, ts, safe)) == (i, j, ts)
    f = TileFileName.from_timestamp(i, j, ts)
    assert TileFileName.parse(f.render(safe)) == f


def test_encode_converts_aware_timestamps():
    aware = datetime(2020, 6, 1, 13, 0, tzinfo=timezone.utc)
    assert encode_name(1, 1, aware, tz="America/New_York") == "TrafficMap_1_1_06_01_20_09-00.png"


def test_encode_truncates_seconds():
    assert encode_name(1, 1, T0 + timedelta(seconds=59)) == encode_name(1, 1, T0)


def _write(root, i, j, ts, safe=True):
    path = root / encode_name(i, j, ts, safe)
    path.write_bytes(b"png")
    return path


def test_scan_and_lookup(tmp_path):
    for i in range(1, 5):
        for j in range(1, 4):
            _write(tmp_path, i, j, T0)
    _write(tmp_path, 1, 1, T0 + timedelta(hours=3))
    handle = scan(tmp_path)
    assert handle.timestamps() == [T0, T0 + timedelta(hours=3)]
    assert len(lookup(handle, T0)) == 12
    assert lookup(handle, T0 + timedelta(hours=1)) == {}


def test_scan_reads_both_modes(tmp_path):
    _write(tmp_path, 1, 1, T0, safe=False)
    _write(tmp_path, 1, 2, T0, safe=True)
    assert set(lookup(scan(tmp_path), T0)) == {(1, 1), (1, 2)}


def test_scan_skips_bad_names(tmp_path, caplog):
    _write(tmp_path, 1, 1, T0)
    (tmp_path / "TrafficMap_x_1_06_01_20_09-00.png").write_bytes(b"")
    (tmp_path / "readme.txt").write_text("hi")
    with caplog.at_level(logging.WARNING):
        handle = scan(tmp_path)
    assert list(lookup(handle, T0)) == [(1, 1)]
    assert "undecodable" in caplog.text


def test_scan_empty_and_missing(tmp_path):
    assert scan(tmp_path).manifest == {}
    with pytest.raises(ArchiveError):
        scan(tmp_path / "nope")


def test_scan_is_idempotent(tmp_path):
    for j in (1, 2):
        _write(tmp_path, 1, j, T0)
    assert scan(tmp_path).manifest == scan(tmp_path).manifest


def test_write_tile_atomic_and_indexed(tmp_path):
    handle = ArchiveHandle(tmp_path)
    aware = datetime(2020, 6, 1, 9, 0, tzinfo=timezone.utc)
    path = handle.write_tile(2, 3, aware, b"data")
    assert path.name == "TrafficMap_2_3_06_01_20_09-00.png"
    assert path.read_bytes() == b"data"
    assert lookup(handle, aware) == {(2, 3): path}
    assert not [p for p in os.listdir(tmp_path) if p.startswith(".tmp")]
    assert scan(tmp_path).manifest == handle.manifest


def test_unwritable_archive(tmp_path):
    handle = ArchiveHandle(tmp_path / "missing")
    with pytest.raises(ArchiveError):
        handle.check_writable()


def test_manifest_roundtrip(tmp_path):
    for j in (1, 2, 3):
        _write(tmp_path, 2, j, T0, safe=False)
    handle = scan(tmp_path, safe_names=False)
    save_manifest(handle)
    again = load_manifest(tmp_path)
    assert again.manifest == handle.manifest
    assert again.safe_names is False
