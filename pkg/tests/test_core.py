import numpy as np
import pytest

from selfsvd.core import (
    Clip,
    Dataset,
    Frame,
    load_clip,
    load_dataset,
    read_manifest,
    save_clip,
    write_manifest,
)
from selfsvd.errors import (
    CorruptClip,
    InvalidClip,
    InvalidDataset,
    MissingPSFrame,
    ShapeMismatch,
)
from helpers import random_clip, random_frame


class TestFrame:
    def test_accepts_valid(self, rng):
        f = random_frame(rng, 32, 48)
        assert f.height == 32 and f.width == 48

    def test_rejects_out_of_range(self, rng):
        data = rng.random((32, 32, 3)).astype(np.float32)
        data[0, 0, 0] = 1.5
        with pytest.raises(InvalidClip):
            Frame(data)
        data[0, 0, 0] = -0.1
        with pytest.raises(InvalidClip):
            Frame(data)

    @pytest.mark.parametrize("shape", [(15, 32), (32, 30), (12, 12), (8, 16)])
    def test_rejects_bad_dims(self, rng, shape):
        with pytest.raises(InvalidClip):
            Frame(rng.random(shape + (3,)).astype(np.float32))

    def test_rejects_nan(self, rng):
        data = rng.random((16, 16, 3)).astype(np.float32)
        data[3, 3, 1] = np.nan
        with pytest.raises(InvalidClip):
            Frame(data)

    def test_immutable(self, rng):
        f = random_frame(rng)
        with pytest.raises(ValueError):
            f.data[0, 0, 0] = 0.0


class TestClip:
    def test_empty_frames_rejected(self, rng):
        with pytest.raises(InvalidClip):
            Clip(frames=(), ps_frame=random_frame(rng))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeMismatch):
            Clip(frames=(random_frame(rng, 32, 32),), ps_frame=random_frame(rng, 32, 36))


class TestClipIO:
    def test_round_trip_within_quantization(self, rng, tmp_path):
        clip = random_clip(rng, n=3, h=32, w=32, clip_id="rt")
        save_clip(clip, tmp_path / "rt")
        loaded = load_clip(tmp_path / "rt")
        assert len(loaded) == 3
        assert loaded.ps_frame.data.shape == (32, 32, 3)
        for a, b in zip(loaded.frames, clip.frames):
            assert np.abs(a.data - b.data).max() <= 1.0 / 255.0 + 1e-7
        assert np.abs(loaded.ps_frame.data - clip.ps_frame.data).max() <= 1.0 / 255.0 + 1e-7

    def test_eight_bit_255_decodes_to_one(self, tmp_path):
        from PIL import Image

        d = tmp_path / "c"
        d.mkdir()
        white = np.full((16, 16, 3), 255, np.uint8)
        Image.fromarray(white).save(d / "ps.png")
        Image.fromarray(white).save(d / "frame_0001.png")
        clip = load_clip(d)
        assert clip.ps_frame.data.max() == 1.0
        assert clip.frames[0].data.min() == 1.0

    def test_single_frame_clip_files(self, rng, tmp_path):
        clip = random_clip(rng, n=1, clip_id="single")
        save_clip(clip, tmp_path / "single")
        names = sorted(p.name for p in (tmp_path / "single").iterdir())
        assert names == ["frame_0001.png", "ps.png"]

    def test_missing_ps(self, rng, tmp_path):
        clip = random_clip(rng, n=2)
        save_clip(clip, tmp_path / "c")
        (tmp_path / "c" / "ps.png").unlink()
        with pytest.raises(MissingPSFrame):
            load_clip(tmp_path / "c")

    def test_gap_in_indices(self, rng, tmp_path):
        clip = random_clip(rng, n=3)
        save_clip(clip, tmp_path / "c")
        (tmp_path / "c" / "frame_0002.png").unlink()
        with pytest.raises(CorruptClip):
            load_clip(tmp_path / "c")

    def test_zero_index_rejected(self, rng, tmp_path):
        clip = random_clip(rng, n=1)
        save_clip(clip, tmp_path / "c")
        (tmp_path / "c" / "frame_0001.png").rename(tmp_path / "c" / "frame_0000.png")
        with pytest.raises(CorruptClip):
            load_clip(tmp_path / "c")

    def test_size_mismatch(self, rng, tmp_path):
        from PIL import Image

        save_clip(random_clip(rng, n=1, h=32, w=32), tmp_path / "c")
        small = np.zeros((16, 16, 3), np.uint8)
        Image.fromarray(small).save(tmp_path / "c" / "frame_0001.png")
        with pytest.raises(ShapeMismatch):
            load_clip(tmp_path / "c")

    def test_non_divisible_dims_cropped_with_warning(self, tmp_path):
        from PIL import Image

        d = tmp_path / "odd"
        d.mkdir()
        img = np.zeros((33, 35, 3), np.uint8)
        Image.fromarray(img).save(d / "ps.png")
        Image.fromarray(img).save(d / "frame_0001.png")
        with pytest.warns(UserWarning, match="cropped"):
            clip = load_clip(d)
        assert (clip.height, clip.width) == (32, 32)


class TestDataset:
    def test_duplicate_ids_rejected(self, rng):
        c1 = random_clip(rng, clip_id="dup")
        c2 = random_clip(rng, clip_id="dup")
        with pytest.raises(InvalidDataset):
            Dataset(clips=[c1, c2], split="train")

    def test_manifest_round_trip(self, tmp_path):
        entries = [("train", "smoky/a"), ("test", "smoky/b")]
        write_manifest(entries, tmp_path / "manifest.tsv")
        assert read_manifest(tmp_path / "manifest.tsv") == entries

    def test_load_dataset_filters_split(self, rng, tmp_path):
        for name, split in (("a", "train"), ("b", "train"), ("c", "test")):
            save_clip(random_clip(rng, clip_id=name), tmp_path / "smoky" / name)
        write_manifest(
            [("train", "smoky/a"), ("train", "smoky/b"), ("test", "smoky/c")],
            tmp_path / "manifest.tsv",
        )
        train = load_dataset(tmp_path, "train")
        assert len(train) == 2 and train.split == "train"
        test = load_dataset(tmp_path, "test")
        assert [c.id for c in test.clips] == ["c"]
        with pytest.raises(InvalidDataset):
            load_dataset(tmp_path, "val")
