import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dsa3d.volume import (TASKS, BadMagicError, DatasetManifest, Label, ManifestEntry,
                          ManifestError, Shape4, TaskError, TruncatedVolumeError, Volume,
                          VolumeError, VolumeFormatError, ZeroExtentError, apply_task, get_task,
                          load_manifest, load_volume, save_volume, write_manifest)


def test_single_zero_voxel_file_is_twenty_bytes(tmp_path):
    p = tmp_path / "a.vol"
    save_volume(Volume(np.zeros((1, 1, 1, 1))), p)
    raw = p.read_bytes()
    assert raw == b"VOL3" + struct.pack("<4I", 1, 1, 1, 1) + b"\x00" * 4


def test_payload_size(tmp_path):
    p = tmp_path / "a.vol"
    save_volume(Volume(np.ones((1, 2, 2, 2))), p)
    assert len(p.read_bytes()) == 20 + 32


def test_little_endian_channel_major_order(tmp_path):
    arr = np.arange(2 * 1 * 1 * 3, dtype=np.float32).reshape(2, 1, 1, 3)
    p = tmp_path / "a.vol"
    save_volume(Volume(arr), p)
    vals = struct.unpack("<6f", p.read_bytes()[20:])
    assert vals == tuple(float(v) for v in range(6))


def test_random_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.standard_normal((2, 8, 8, 8)))
    p = tmp_path / "r.vol"
    save_volume(v, p)
    w = load_volume(p)
    assert w == v
    assert w.data.tobytes() == v.data.tobytes()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=4, max_dims=4, min_side=1, max_side=4),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("v") / "x.vol"
    v = Volume(arr)
    save_volume(v, p)
    assert load_volume(p).data.tobytes() == v.data.tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "b.vol"
    p.write_bytes(b"XXXX" + struct.pack("<4I", 1, 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(BadMagicError):
        load_volume(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.vol"
    p.write_bytes(b"VOL3" + struct.pack("<4I", 1, 2, 2, 2) + b"\x00" * 28)
    with pytest.raises(TruncatedVolumeError, match="8 voxels, found 7"):
        load_volume(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "t.vol"
    p.write_bytes(b"VOL3" + b"\x01\x00")
    with pytest.raises(TruncatedVolumeError):
        load_volume(p)


def test_zero_extent(tmp_path):
    p = tmp_path / "z.vol"
    p.write_bytes(b"VOL3" + struct.pack("<4I", 1, 0, 2, 2))
    with pytest.raises(ZeroExtentError):
        load_volume(p)


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, TruncatedVolumeError, ZeroExtentError}
    assert len(kinds) == 3
    assert all(issubclass(k, VolumeFormatError) for k in kinds)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "x.vol"
    p.write_bytes(b"VOL3" + struct.pack("<4I", 1, 1, 1, 1) + b"\x00" * 8)
    with pytest.raises(VolumeFormatError, match="trailing"):
        load_volume(p)


def test_non_finite_rejected_with_index(tmp_path):
    arr = np.zeros((1, 2, 2, 2))
    arr[0, 1, 0, 1] = np.nan
    with pytest.raises(VolumeError, match=r"\(0, 1, 0, 1\)"):
        Volume(arr)
    with pytest.raises(VolumeError, match=r"\(0, 1, 0, 1\)"):
        save_volume(arr, tmp_path / "n.vol")


def test_write_failure_names_path(tmp_path):
    bad = tmp_path / "missing" / "x.vol"
    with pytest.raises(OSError, match="missing"):
        save_volume(Volume(np.zeros((1, 1, 1, 1))), bad)


def test_volume_is_immutable():
    v = Volume(np.zeros((1, 2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1.0
    assert v.shape == Shape4(1, 2, 2, 2)


def test_shape_rejects_zero():
    with pytest.raises(VolumeError):
        Shape4(1, 0, 1, 1)


def _write_vols(tmp_path, labels, shape=(1, 2, 2, 2)):
    lines = ["path,label,subject_id"]
    for i, lab in enumerate(labels):
        save_volume(Volume(np.full(shape, i, dtype=np.float32)), tmp_path / f"v{i}.vol")
        lines.append(f"v{i}.vol,{lab},s{i}")
    m = tmp_path / "m.csv"
    m.write_text("\n".join(lines) + "\n")
    return m


def test_manifest_three_entries(tmp_path):
    m = load_manifest(_write_vols(tmp_path, ["AD", "MCI", "NC"]))
    assert len(m) == 3
    assert m.labels == [Label.AD, Label.MCI, Label.NC]
    assert all(e.path.startswith(str(tmp_path)) for e in m)


def test_manifest_unknown_label_names_line(tmp_path):
    m = _write_vols(tmp_path, ["AD", "ADX", "NC"])
    with pytest.raises(ManifestError, match=r":3: unknown label 'ADX'"):
        load_manifest(m)


def test_manifest_duplicate_path(tmp_path):
    m = _write_vols(tmp_path, ["AD"])
    m.write_text(m.read_text() + "v0.vol,NC,s9\n")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(m)


def test_manifest_shape_mismatch(tmp_path):
    m = _write_vols(tmp_path, ["AD", "NC"])
    save_volume(Volume(np.zeros((1, 3, 3, 3))), tmp_path / "v1.vol")
    with pytest.raises(ManifestError, match="shape mismatch"):
        load_manifest(m)


def _synthetic_manifest(per_class=70):
    entries = [ManifestEntry(f"{lab.value}{i}.vol", lab, f"{lab.value}{i}")
               for lab in Label for i in range(per_class)]
    return DatasetManifest(tuple(entries))


def test_class_counts_seventy_each():
    counts = _synthetic_manifest().class_counts()
    assert [counts[lab] for lab in Label] == [70, 70, 70]


def test_manifest_write_read_roundtrip(tmp_path):
    m = load_manifest(_write_vols(tmp_path, ["NC", "AD"]))
    out = tmp_path / "copy.csv"
    write_manifest(m, out)
    assert load_manifest(out) == m


def test_apply_task_ad_nc():
    out = apply_task(_synthetic_manifest(), get_task("ad-nc"))
    assert len(out) == 140
    assert {c for _, c in out} == {0, 1}


def test_apply_task_merged():
    out = apply_task(_synthetic_manifest(), get_task("admci-nc"))
    classes = [c for _, c in out]
    assert len(out) == 210 and classes.count(0) == 140 and classes.count(1) == 70


def test_apply_task_ternary_identity():
    out = apply_task(_synthetic_manifest(), get_task("ternary"))
    assert len(out) == 210
    assert [c for _, c in out] == [lab.code for lab in Label for _ in range(70)]


@pytest.mark.parametrize("name", sorted(TASKS))
def test_task_sizes_and_contiguous_classes(name):
    m = _synthetic_manifest(5)
    task = TASKS[name]
    out = apply_task(m, task)
    excluded = sum(1 for e in m if task.class_map[e.label] is None)
    assert len(out) == len(m) - excluded
    assert sorted({c for _, c in out}) == list(range(task.n_classes))


def test_task_excluding_everything():
    m = DatasetManifest((ManifestEntry("a.vol", Label.MCI, "a"),))
    with pytest.raises(TaskError):
        apply_task(m, get_task("ad-nc"))


def test_unknown_task():
    with pytest.raises(TaskError):
        get_task("ad-vs-everything")


def test_class_names():
    assert get_task("admci-nc").class_names == ["AD+MCI", "NC"]
