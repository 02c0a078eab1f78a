import numpy as np
import pytest

from duomotion import clipio
from duomotion import representation as rep
from duomotion import synth


@pytest.mark.parametrize("family", synth.FAMILIES)
def test_clip_round_trip_bit_exact(tmp_path, smpl, family):
    clip = synth.generate(family, seed=4, length=45, skel=smpl)
    path = tmp_path / "c.ihc"
    clipio.save_clip(clip, path)
    back = clipio.load_clip(path)
    assert np.array_equal(back.person_a, clip.person_a) and np.array_equal(back.person_b, clip.person_b)
    assert (back.label, back.text, back.fps, back.n_joints, back.skeleton) == (
        clip.label, clip.text, clip.fps, clip.n_joints, clip.skeleton)


def test_file_layout(tmp_path, circle_clip):
    path = tmp_path / "c.ihc"
    clipio.save_clip(circle_clip, path)
    raw = path.read_bytes()
    assert raw.startswith(b"IHC1\n")
    header = clipio.read_header(path)
    assert header["length"] == 64 and header["width"] == 268 and header["repr"] == "noncanonical"
    body = raw[raw.index(b"\n", 5) + 1 :]
    assert len(body) == 2 * 64 * 268 * 4
    np.testing.assert_array_equal(np.frombuffer(body[: 268 * 4], "<f4"), circle_clip.person_a[0])


def test_canonical_container(tmp_path, smpl, circle_clip):
    a, b = rep.encode_canonical(circle_clip, smpl)
    ia, ib = rep.init_pose(circle_clip.person_a, smpl), rep.init_pose(circle_clip.person_b, smpl)
    path = tmp_path / "c.ihc"
    clipio.save_canonical(path, a, b, ia, ib, n_joints=22, label="circle")
    header, a2, b2 = clipio.load_canonical(path)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)
    assert header["init_pose"][0] == list(ia)
    with pytest.raises(ValueError, match="load_canonical"):
        clipio.load_clip(path)


def test_corrupt_files_rejected(tmp_path, circle_clip):
    path = tmp_path / "c.ihc"
    clipio.save_clip(circle_clip, path)
    raw = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="IHC1"):
        clipio.load_clip(tmp_path / "bad_magic")
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="bytes"):
        clipio.load_clip(tmp_path / "short")
    clipio.save_clip(circle_clip, tmp_path / "plain")
    with pytest.raises(ValueError, match="canonical"):
        clipio.load_canonical(tmp_path / "plain")
