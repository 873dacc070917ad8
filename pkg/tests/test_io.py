import numpy as np
import pytest

from gvd.errors import FormatError
from gvd.io import (image_from_bytes, image_to_bytes, read_image, read_manifest, read_pgm, to_bytes8,
                    write_image, write_manifest, write_pgm)


def test_round_trip_bitwise(tmp_path, rng):
    a = rng.standard_normal((5, 7)) * 1e3
    a[0, 0] = -0.0
    write_image(tmp_path / "a.gvd", a)
    assert read_image(tmp_path / "a.gvd").tobytes() == a.tobytes()


def test_header_layout():
    data = image_to_bytes(np.zeros((2, 3)))
    assert data[:4] == b"GVD1"
    assert data[4:8] == (2).to_bytes(4, "little") and data[8:12] == (3).to_bytes(4, "little")
    assert len(data) == 12 + 48


def test_errors():
    data = image_to_bytes(np.ones((3, 3)))
    with pytest.raises(FormatError, match="truncated payload"):
        image_from_bytes(data[:-1])
    with pytest.raises(FormatError, match="magic"):
        image_from_bytes(b"GVD2" + data[4:])
    with pytest.raises(FormatError, match="overflow"):
        image_from_bytes(b"GVD1" + (1 << 20).to_bytes(4, "little") + (1 << 20).to_bytes(4, "little"))
    with pytest.raises(FormatError, match="trailing"):
        image_from_bytes(data + b"x")


def test_pgm_scaling(tmp_path):
    assert to_bytes8(np.array([[0.5, -1.0, 2.0, 1.0 / 255 * 0.49]])).tolist() == [[128, 0, 255, 0]]
    img = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "x.pgm", img)
    back = read_pgm(tmp_path / "x.pgm")
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_manifest(tmp_path, rng):
    arrays = [rng.random((3, 3)) for _ in range(3)]
    names = ["obs file.gvd", "c.gvd", "t.gvd"]
    for n, a in zip(names, arrays):
        write_image(tmp_path / n, a)
    write_manifest(tmp_path / "m.txt", [names])
    (f, c, t), = read_manifest(tmp_path / "m.txt")
    assert f.tobytes() == arrays[0].tobytes()
    (tmp_path / "bad.txt").write_text("a.gvd b.gvd\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.txt")
