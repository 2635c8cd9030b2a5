import numpy as np
import pytest

from tokvid import numerics
from tokvid.errors import SpecError
from tokvid.sequence import TEXT_SIZE, decode_layout, detokenize_text, read_sequence_file, validate_sequence
from tokvid.synthdata import (MotionSpec, SpecDistribution, make_dataset, make_video, visual_vocab_needed,
                              write_dataset)


def sprite_columns(grids, spec):
    ids = spec.sprite_ids()
    return [int(np.argwhere(g == ids[0, 0])[0][1]) for g in grids]


def test_static_video_frames_identical():
    v = make_video(MotionSpec(velocity=(0, 0)))
    assert all(np.array_equal(v.grids[0], g) for g in v.grids)


def test_column_cycles_on_torus():
    spec = MotionSpec(grid=(3, 4), T=5, sprite=(1, 1), velocity=(0, 1), start=(1, 0))
    v = make_video(spec)
    assert sprite_columns(v.grids, spec) == [0, 1, 2, 3, 0]


def test_sprite_too_big():
    with pytest.raises(SpecError):
        make_video(MotionSpec(grid=(2, 2), sprite=(3, 1)))
    with pytest.raises(SpecError):
        make_video(MotionSpec(velocity=(2, 2)))


def test_caption_and_sequence_valid():
    spec = MotionSpec(color=2, velocity=(-1, 0))
    v = make_video(spec)
    assert spec.caption() == "a blue square moving up"
    assert detokenize_text(v.sequence.text_ids).endswith("a blue square moving up")
    assert validate_sequence(v.sequence) == []
    assert decode_layout(v.sequence) == v.sequence.layout
    ids = v.grids - TEXT_SIZE
    assert ids.min() >= 0 and ids.max() < visual_vocab_needed()
    np.testing.assert_array_equal(v.sequence.visual_grid(), v.grids)


def test_next_frame_is_determined():
    spec = MotionSpec(grid=(5, 6), T=4, velocity=(1, 0), start=(3, 2), stripes=(2, 1, 3))
    g = make_video(spec).grids
    shifted = make_video(MotionSpec(grid=(5, 6), T=3, velocity=(1, 0), start=(4, 2), stripes=(2, 1, 3))).grids
    np.testing.assert_array_equal(g[1:], shifted)


def test_dataset_split_and_determinism():
    dist = SpecDistribution(grid=(4, 4), T=3)
    a = make_dataset(10, dist, numerics.make_rng(0))
    b = make_dataset(10, dist, numerics.make_rng(0))
    assert len(a.train) == 9 and len(a.validation) == 1
    assert [v.digest() for v in a.train] == [v.digest() for v in b.train]
    train_hashes = {v.digest() for v in a.train}
    assert not train_hashes & {v.digest() for v in a.validation}
    assert all(validate_sequence(v.sequence) == [] for v in a.train + a.validation)
    with pytest.raises(SpecError):
        make_dataset(1, dist, numerics.make_rng(0))


def test_narrow_distribution_fails_loudly():
    dist = SpecDistribution(grid=(1, 1), T=1, sprite=(1, 1), directions=("still",))
    with pytest.raises(SpecError):
        make_dataset(50, dist, numerics.make_rng(0))


def test_write_dataset(tmp_path):
    ds = make_dataset(4, SpecDistribution(grid=(3, 3), T=2), numerics.make_rng(1))
    manifest = write_dataset(ds, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 4
    name, seed = lines[0].split()
    back = read_sequence_file(tmp_path / name)
    np.testing.assert_array_equal(back.ids, ds.train[0].sequence.ids)
    assert int(seed) == ds.train[0].seed
