import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dymesh.data import (
    CorpusStats,
    DmbBadCaption,
    DmbBadMagic,
    DmbError,
    DmbIndexOutOfRange,
    DmbInvalidHeader,
    DmbTrailingBytes,
    DmbTruncated,
    DmbUnsupportedVersion,
    ManifestRecord,
    RunningMoments,
    dmb_decode,
    dmb_encode,
    dmb_read,
    dmb_write,
    iter_windows,
    load_corpus,
    manifest_digest,
    max_faces_for,
    max_interframe_motion,
    motion_filter,
    normalize_window,
    pad_batch,
    process_animation,
    ratio_filter,
    slice_windows,
    stats_decode,
    stats_encode,
    load_stats,
    save_stats,
)
from dymesh.mesh import DynamicMesh, MeshValidationError

from .oracles import window_offsets_reference


def random_mesh(rng, N=None, M=None, T=None, caption=None):
    N = N or int(rng.integers(3, 30))
    M = M or int(rng.integers(1, 2 * N))
    T = T or int(rng.integers(1, 5))
    faces = np.stack([rng.choice(N, 3, replace=False) for _ in range(M)])
    return DynamicMesh(faces, rng.normal(size=(T, N, 3)).astype(np.float32), caption)


def fuzz_bytes(rng, base):
    data = bytearray(base)
    op = rng.integers(4)
    if op == 0:
        for _ in range(int(rng.integers(1, 6))):
            data[int(rng.integers(0, min(len(data), 24)))] = int(rng.integers(256))
    elif op == 1:
        data = data[: int(rng.integers(0, len(data)))]
    elif op == 2:
        struct.pack_into("<III", data, 6, *(int(x) for x in rng.integers(0, 2**32, size=3, dtype=np.uint64)))
    else:
        data += bytes(rng.integers(0, 256, size=int(rng.integers(1, 9)), dtype=np.uint8))
    return bytes(data)


# -- codec --------------------------------------------------------------------------


@pytest.mark.parametrize("caption", [None, "", "a spinning top", "ünïcödé ✓"])
def test_dmb_round_trip_byte_identical(tmp_path, caption):
    mesh = random_mesh(np.random.default_rng(1), caption=caption)
    p = tmp_path / "m.dmb"
    dmb_write(p, mesh)
    back = dmb_read(p)
    assert back.caption == caption
    np.testing.assert_array_equal(back.faces, mesh.faces)
    assert back.vertices.tobytes() == mesh.vertices.tobytes()
    assert dmb_encode(back) == p.read_bytes()


def test_dmb_header_layout():
    mesh = random_mesh(np.random.default_rng(0), N=5, M=2, T=3)
    data = dmb_encode(mesh)
    assert data[:4] == b"DYM1"
    assert struct.unpack_from("<HIII", data, 4) == (1, 2, 5, 3)
    assert len(data) == 18 + 12 * 2 + 12 * 5 * 3


def corrupt(mutator):
    data = bytearray(dmb_encode(random_mesh(np.random.default_rng(2), N=6, M=4, T=2, caption="x")))
    return bytes(mutator(data))


@pytest.mark.parametrize(
    "mutator, error",
    [
        (lambda d: b"NOPE" + d[4:], DmbBadMagic),
        (lambda d: d[:4] + b"\x02\x00" + d[6:], DmbUnsupportedVersion),
        (lambda d: d[:6] + struct.pack("<I", 0) + d[10:], DmbInvalidHeader),
        (lambda d: d[:-3], DmbTruncated),
        (lambda d: d[:40], DmbTruncated),
        (lambda d: d[:10], DmbTruncated),
        (lambda d: d + b"zz", DmbTrailingBytes),
        (lambda d: d[:18] + struct.pack("<I", 99) + d[22:], DmbIndexOutOfRange),
        (lambda d: d[:-1] + b"\xff", DmbBadCaption),
    ],
)
def test_dmb_errors_are_distinct(mutator, error):
    with pytest.raises(error) as info:
        dmb_decode(corrupt(mutator))
    assert info.value.code == error.code


def test_error_codes_unique():
    classes = [DmbBadMagic, DmbUnsupportedVersion, DmbInvalidHeader, DmbTruncated, DmbTrailingBytes,
               DmbIndexOutOfRange, DmbBadCaption]
    assert len({c.code for c in classes}) == len(classes)


def test_dmb_fuzz_structured_errors_only():
    rng = np.random.default_rng(0)
    bases = [dmb_encode(random_mesh(rng, caption=c)) for c in (None, "cap")]
    for _ in range(2000):
        data = fuzz_bytes(rng, bases[int(rng.integers(2))])
        try:
            dmb_decode(data)
        except DmbError:
            pass


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=64))
def test_dmb_arbitrary_bytes(data):
    try:
        dmb_decode(data)
    except DmbError:
        pass


def test_load_corpus_reads_sidecar_captions(tmp_path):
    rng = np.random.default_rng(0)
    dmb_write(tmp_path / "b.dmb", random_mesh(rng, caption="inline"))
    dmb_write(tmp_path / "a.dmb", random_mesh(rng))
    (tmp_path / "a.txt").write_text("from sidecar\n")
    corpus = load_corpus(tmp_path)
    assert [m.caption for m in corpus] == ["from sidecar", "inline"]


# -- slicing --------------------------------------------------------------------------


def ramp(T, N=3):
    v = np.zeros((T, N, 3), dtype=np.float32)
    v[:, :, 0] = np.arange(T)[:, None]
    return DynamicMesh([[0, 1, 2]], v)


def test_slice_thirty_two_frames():
    windows = list(iter_windows(ramp(32), 16))
    assert [(w.offset, w.reversed) for w in windows] == window_offsets_reference(32, 16)
    assert [(w.offset, w.reversed) for w in windows] == [(0, False), (0, True), (16, False), (16, True), (8, False), (8, True)]


def test_slice_exact_fit():
    windows = list(iter_windows(ramp(16), 16))
    assert [(w.offset, w.reversed) for w in windows] == [(0, False), (0, True)]


def test_slice_too_short_is_empty():
    assert slice_windows(ramp(10), 16) == []


def test_reversed_window_frames():
    windows = list(iter_windows(ramp(40), 16))
    for fwd, rev in zip(windows[::2], windows[1::2]):
        assert fwd.offset == rev.offset
        for k in range(16):
            np.testing.assert_array_equal(rev.mesh.vertices[k], fwd.mesh.vertices[15 - k])
        assert fwd.mesh.vertices[0, 0, 0] == fwd.offset


@pytest.mark.parametrize("T", range(16, 80, 5))
@pytest.mark.parametrize("window", [16, 32])
def test_slice_counts_match_enumeration(T, window):
    windows = slice_windows(ramp(T), window)
    assert len(windows) == len(window_offsets_reference(T, window))
    assert all(w.num_frames == window for w in windows)


# -- normalization ------------------------------------------------------------------------


def test_normalize_cube():
    corners = np.array([[x, y, z] for x in (-2, 2) for y in (-2, 2) for z in (-2, 2)], dtype=np.float32) + 5
    out = normalize_window(DynamicMesh([[0, 1, 2]], corners[None]))
    np.testing.assert_array_equal(np.abs(out.vertices[0]), 1)


def test_normalize_idempotent_and_random():
    rng = np.random.default_rng(4)
    mesh = random_mesh(rng, N=20, T=6)
    mesh.vertices *= 7
    once = normalize_window(mesh)
    v0 = once.vertices[0].astype(np.float64)
    assert abs(np.abs(v0).max() - 1) <= 1e-6
    center = (v0.min(0) + v0.max(0)) / 2
    assert np.abs(center).max() <= 1e-6
    np.testing.assert_allclose(normalize_window(once).vertices, once.vertices, atol=1e-6)


def test_normalize_zero_extent():
    with pytest.raises(MeshValidationError):
        normalize_window(DynamicMesh([[0, 1, 2]], np.ones((2, 3, 3))))


# -- filters ----------------------------------------------------------------------------------


def test_motion_filter_static_rejected():
    r = motion_filter(DynamicMesh([[0, 1, 2]], np.zeros((4, 3, 3))))
    assert not r and r.reason == "motion-below-min"


def test_motion_filter_jump_rejected():
    v = np.zeros((3, 3, 3))
    v[2, 1, 2] = 0.6
    r = motion_filter(DynamicMesh([[0, 1, 2]], v))
    assert not r and r.reason == "motion-above-max" and math.isclose(r.value, 0.6, rel_tol=1e-6)


def test_motion_filter_crafted_oscillation_kept():
    t = np.arange(9)
    v = np.zeros((9, 3, 3))
    v[:, 0, 0] = 0.25 * (t % 2)
    r = motion_filter(DynamicMesh([[0, 1, 2]], v))
    assert r and r.value == 0.25


def test_motion_filter_boundaries_inclusive():
    for m in (0.01, 0.5):
        v = np.zeros((2, 3, 3))
        v[1, 0, 0] = m
        assert motion_filter(DynamicMesh([[0, 1, 2]], v))


def test_ratio_filter_boundary():
    four = np.zeros((1, 4, 3))
    faces = [[0, 1, 2]] * 10
    assert ratio_filter(DynamicMesh(faces, four))
    r = ratio_filter(DynamicMesh(faces + [[1, 2, 3]], four))
    assert not r and r.reason == "face-ratio-exceeds"


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_filters_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng, N=int(rng.integers(3, 10)), M=int(rng.integers(1, 30)), T=int(rng.integers(2, 6)))
    mesh.vertices = (mesh.vertices * rng.choice([0.001, 0.05, 0.3])).astype(np.float32)
    v = mesh.vertices.astype(np.float64)
    m = 0.0
    for t in range(v.shape[0] - 1):
        for i in range(v.shape[1]):
            for c in range(3):
                m = max(m, abs(float(mesh.vertices[t + 1, i, c]) - float(mesh.vertices[t, i, c])))
    assert max_interframe_motion(mesh) == pytest.approx(m, abs=1e-7)
    assert bool(motion_filter(mesh)) == (float(np.float32(0.01)) <= m <= float(np.float32(0.5)))
    assert bool(ratio_filter(mesh)) == (mesh.num_faces <= 2.5 * mesh.num_vertices)


# -- padding ---------------------------------------------------------------------------------


def test_pad_single_item_has_no_vertex_padding():
    mesh = random_mesh(np.random.default_rng(0), N=7, M=5, T=2)
    b = pad_batch([mesh])
    assert b.vertices.shape == (1, 2, 7, 3)
    assert b.faces.shape == (1, max_faces_for(7), 3)
    assert (b.faces[0, 5:] == -1).all()


def test_pad_two_items():
    rng = np.random.default_rng(1)
    a, c = random_mesh(rng, N=10, M=8, T=3), random_mesh(rng, N=4, M=3, T=3)
    b = pad_batch([a, c])
    assert b.vertices[1, :, 4:].tobytes() == bytes(3 * 6 * 3 * 4)
    assert b.vertices[0].tobytes() == a.vertices.tobytes()
    assert b.vertices[1, :, :4].tobytes() == c.vertices.tobytes()
    assert list(b.valid_vertex_count) == [10, 4] and list(b.valid_face_count) == [8, 3]


def test_pad_errors():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        pad_batch([random_mesh(rng, N=4, M=11, T=1)])
    with pytest.raises(ValueError):
        pad_batch([random_mesh(rng, N=4, T=1), random_mesh(rng, N=4, T=2)])
    with pytest.raises(ValueError):
        pad_batch([random_mesh(rng, N=9, T=1)], max_vertices=5)


# -- stats ------------------------------------------------------------------------------------


def test_running_moments_match_two_pass():
    rng = np.random.default_rng(0)
    chunks = [rng.normal(3, 2, size=(int(rng.integers(1, 50)), 5)) for _ in range(20)]
    m = RunningMoments(5)
    for c in chunks:
        m.update(c)
    allrows = np.concatenate(chunks)
    np.testing.assert_allclose(m.mean, allrows.mean(0), atol=1e-10)
    np.testing.assert_allclose(m.std(), allrows.std(0), atol=1e-10)


def test_constant_tokens_floor_sigma():
    m = RunningMoments(3)
    m.update(np.full((10, 3), 2.5))
    np.testing.assert_array_equal(m.mean, 2.5)
    np.testing.assert_array_equal(m.std(), 1e-6)


def test_stats_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = CorpusStats(rng.normal(size=6), rng.uniform(0.1, 1, 6), rng.normal(size=4), rng.uniform(0.1, 1, 4))
    save_stats(tmp_path / "s.dyst", s)
    back = load_stats(tmp_path / "s.dyst")
    for name in ("mu0", "sigma0", "muT", "sigmaT"):
        assert getattr(back, name).tobytes() == getattr(s, name).tobytes()
    assert stats_encode(back) == (tmp_path / "s.dyst").read_bytes()
    with pytest.raises(ValueError):
        stats_decode(stats_encode(s)[:-1])
    with pytest.raises(ValueError):
        CorpusStats(np.zeros(2), np.zeros(2), np.zeros(1), np.ones(1))


# -- pipeline -----------------------------------------------------------------------------------


def test_process_animation_records():
    rng = np.random.default_rng(0)
    T = 40
    base = rng.normal(size=(8, 3))
    faces = np.stack([rng.choice(8, 3, replace=False) for _ in range(6)])
    wobble = 0.02 * np.sin(np.arange(T))[:, None, None] * np.ones((1, 8, 3))
    anim = DynamicMesh(faces, (base[None] + wobble).astype(np.float32), "wave")
    out = list(process_animation("clip", anim, 16))
    assert len(out) == len(window_offsets_reference(T, 16))
    for rec, mesh in out:
        assert rec.T == 16 and rec.path.startswith("clip_w16_o")
        assert (mesh is not None) == rec.kept
        if mesh is not None:
            assert abs(np.abs(mesh.vertices[0]).max() - 1) < 1e-6
            assert mesh.caption == "wave"


def test_process_animation_caps_frames():
    anim = DynamicMesh([[0, 1, 2]], np.random.default_rng(0).normal(size=(260, 3, 3)).astype(np.float32))
    offsets = {rec.path for rec, _ in process_animation("x", anim, 32)}
    assert len(offsets) == len(window_offsets_reference(200, 32))


def test_manifest_json_is_canonical():
    rec = ManifestRecord("a.dmb", 5, 4, 16, False, "motion-below-min")
    assert json.loads(rec.to_json()) == {"path": "a.dmb", "N": 5, "M": 4, "T": 16, "kept": False,
                                         "reject_reason": "motion-below-min"}
    assert manifest_digest([rec]) == manifest_digest([ManifestRecord("a.dmb", 5, 4, 16, False, "motion-below-min")])
