import itertools
from collections import Counter

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdlab.errors import EmptyClip, EmptyDataset, MissingDirectory, MissingFps
from crowdlab.video import (
    DecodedClip,
    FrameSequence,
    assemble_and_shuffle,
    extract_frames,
    load_clip_cache,
    process_videos,
    resample_indices,
    resize_frame,
    save_clip_cache,
)

from helpers import write_clip_dir


def _clip(n, fps=25.0, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return DecodedClip([rng.random((size, size, 3)).astype(np.float32) for _ in range(n)], fps)


def _write_avi(path, n_frames=10, size=32, fps=25):
    w = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, (size, size))
    for i in range(n_frames):
        w.write(np.full((size, size, 3), 10 * i, np.uint8))
    w.release()


def test_two_second_clip_gives_20_frames():
    clip = DecodedClip([np.full((16, 16, 3), t / 50, np.float32) for t in range(50)], 25.0)
    seq = extract_frames(clip, max_frames=20, target_size=16)
    assert seq.frames.shape == (20, 16, 16, 3)
    assert seq.valid.all()
    kept = seq.frames[:, 0, 0, 0] * 50
    np.testing.assert_allclose(kept, (np.arange(20) * 50) // 20, atol=1e-4)


def test_short_clip_zero_padded():
    seq = extract_frames(_clip(12), max_frames=20, target_size=32)
    assert seq.valid.tolist() == [True] * 12 + [False] * 8
    assert seq.n_valid == 12
    assert seq.frames[12:].sum() == 0.0


def test_constant_white_survives_resize():
    clip = DecodedClip([np.ones((48, 64, 3), np.float32)] * 5, 25.0)
    seq = extract_frames(clip, max_frames=5, target_size=128)
    assert (seq.frames == 1.0).all()


def test_resize_idempotent():
    clip = _clip(7, size=128)
    seq = extract_frames(clip, max_frames=7, target_size=128)
    np.testing.assert_allclose(seq.frames, np.stack(clip.frames), atol=1e-6)


def test_resize_frame_shape():
    assert resize_frame(np.zeros((30, 50, 3), np.float32), 16).shape == (16, 16, 3)


def test_fps_resampling():
    np.testing.assert_array_equal(resample_indices(10, 25.0), np.arange(10))
    np.testing.assert_array_equal(resample_indices(10, 50.0), [0, 2, 4, 6, 8])
    assert resample_indices(5, 12.5).tolist() == [0, 1, 1, 2, 2, 3, 3, 4, 4, 4]


def test_grayscale_frames_promoted():
    clip = DecodedClip([np.full((8, 8), 0.5, np.float32)], 25.0)
    assert extract_frames(clip, 2, 8).frames[0].shape == (8, 8, 3)


def test_extract_errors():
    with pytest.raises(EmptyClip):
        extract_frames(DecodedClip([], 25.0))
    with pytest.raises(MissingFps):
        extract_frames(DecodedClip([np.zeros((4, 4, 3))], None))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.sampled_from([10.0, 25.0, 30.0]), st.integers(1, 25))
def test_padding_and_equal_representation(n, fps, max_frames):
    seq = extract_frames(_clip(n, fps, size=8), max_frames, 8)
    k = seq.n_valid
    assert seq.valid[:k].all() and not seq.valid[k:].any()
    assert np.abs(seq.frames[k:]).sum() == 0.0
    if len(resample_indices(n, fps)) >= max_frames:
        assert k == max_frames


def test_process_videos_frame_dirs(tmp_path):
    for i in range(3):
        write_clip_dir(tmp_path / f"c{i}", [np.full((16, 16, 3), i / 4)] * 4)
    data, labels = process_videos(tmp_path, 1, max_frames=4, target_size=16)
    assert labels == [1, 1, 1]
    assert [s.label for s in data] == [1, 1, 1]
    assert [s.source.rsplit("/", 1)[1] for s in data] == ["c0", "c1", "c2"]


def test_process_videos_mixed_directory(tmp_path):
    _write_avi(tmp_path / "b.avi")
    _write_avi(tmp_path / "a.avi", n_frames=5)
    (tmp_path / "notes.txt").write_text("not a clip")
    data, labels = process_videos(tmp_path, 0, max_frames=8, target_size=16)
    assert labels == [0, 0]
    assert [s.source.rsplit("/", 1)[1] for s in data] == ["a.avi", "b.avi"]
    assert data[0].n_valid == 5 and data[1].n_valid == 8


def test_process_videos_empty_and_missing(tmp_path):
    assert process_videos(tmp_path, 1) == ([], [])
    with pytest.raises(MissingDirectory):
        process_videos(tmp_path / "nope", 1)


def test_process_videos_skips_failures(tmp_path):
    write_clip_dir(tmp_path / "good", [np.zeros((8, 8, 3))] * 2)
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "meta.json").write_text("{not json")
    (tmp_path / "broken.avi").write_bytes(b"garbage")
    failures = []
    data, _ = process_videos(tmp_path, 1, max_frames=2, failures=failures, target_size=8)
    assert len(data) == 1
    assert sorted(p.rsplit("/", 1)[1] for p, _ in failures) == ["bad", "broken.avi"]


def _seqs(values, label):
    return [FrameSequence(np.full((2, 4, 4, 3), v, np.float32), np.ones(2, bool), label, f"s{v}") for v in values]


def test_assemble_pairing_preserved():
    data = assemble_and_shuffle(_seqs([1, 2], 1), _seqs([3, 4], 0), seed=7)
    assert sorted(data.Y.tolist()) == [0, 0, 1, 1]
    for x, y in zip(data.X, data.Y):
        assert y == (1 if x[0, 0, 0, 0] <= 2 else 0)
    unshuffled = np.empty_like(data.Y)
    unshuffled[data.permutation] = data.Y
    assert unshuffled.tolist() == [1, 1, 0, 0]


def test_assemble_deterministic():
    a = assemble_and_shuffle(_seqs([1, 2], 1), _seqs([3, 4], 0), seed=3)
    b = assemble_and_shuffle(_seqs([1, 2], 1), _seqs([3, 4], 0), seed=3)
    assert a.permutation.tolist() == b.permutation.tolist()


def test_assemble_empty():
    with pytest.raises(EmptyDataset):
        assemble_and_shuffle([], [], 0)


def test_permutation_frequencies():
    v, nv = _seqs([1, 2], 1), _seqs([3, 4], 0)
    counts = Counter(tuple(assemble_and_shuffle(v, nv, s).permutation.tolist()) for s in range(1000))
    assert set(counts) == set(itertools.permutations(range(4)))
    p = 1 / 24
    sigma = np.sqrt(1000 * p * (1 - p))
    assert all(abs(c - 1000 * p) <= 3 * sigma for c in counts.values())


def test_cache_round_trip(tmp_path):
    data = assemble_and_shuffle(_seqs([1, 2], 1), _seqs([3], 0), seed=1)
    save_clip_cache(data, tmp_path / "c.csa", tmp_path / "c.csv")
    back = load_clip_cache(tmp_path / "c.csa", tmp_path / "c.csv")
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.Y, data.Y)
    np.testing.assert_array_equal(back.mask, data.mask)
    assert back.sources == data.sources
