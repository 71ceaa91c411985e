"""Writes the binary format fixtures. Run once from the repo root:

    python tests/fixtures/generate.py

The outputs are committed; tests read them as-is.
"""
import struct
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent


def idx_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim])
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    return header + array.tobytes()


def main() -> None:
    rng = np.random.default_rng(20240917)

    # two 5x4 images, corners pinned to the scaling endpoints
    images = rng.integers(0, 256, size=(2, 5, 4), dtype=np.uint8)
    images[0, 0, 0] = 0
    images[1, 4, 3] = 255
    (HERE / "two.images.idx").write_bytes(idx_bytes(images))
    (HERE / "two.labels.idx").write_bytes(idx_bytes(np.array([3, 7], dtype=np.uint8)))
    np.save(HERE / "two.images.npy", images)

    (HERE / "bad_magic.idx").write_bytes(b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x05")
    good = idx_bytes(images)
    (HERE / "truncated.idx").write_bytes(good[: len(good) - 7])

    # one-record CIFAR-10 style batches
    cifar = HERE / "cifar_mini"
    cifar.mkdir(exist_ok=True)
    for i, name in enumerate(
        [f"data_batch_{k}.bin" for k in range(1, 6)] + ["test_batch.bin"]
    ):
        label = np.uint8(i % 10)
        pixels = np.arange(3072, dtype=np.uint64) % 256 + i
        record = bytes([label]) + (pixels % 256).astype(np.uint8).tobytes()
        (cifar / name).write_bytes(record)

    # tiny PGM/PPM samples
    gray = (np.arange(12, dtype=np.uint8) * 20).reshape(3, 4)
    (HERE / "sample.pgm").write_bytes(b"P5\n# comment\n4 3\n255\n" + gray.tobytes())
    color = rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8)
    (HERE / "sample.ppm").write_bytes(b"P6\n2 2\n255\n" + color.tobytes())
    np.save(HERE / "sample.ppm.npy", color)


if __name__ == "__main__":
    main()
