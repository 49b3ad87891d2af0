"""Generate the shared RLE golden corpus under tests/golden/rle/.

Run once; outputs are committed. The server encoder is the oracle: each file
freezes (dims, counts, pixels) so the Python suite can pin the encoder and
the frontend suite can pin its decoder against the same bytes.
"""

import base64
import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from boxseg.iohub import rle_encode, rle_to_json

OUT = pathlib.Path(__file__).resolve().parents[1] / "tests" / "golden" / "rle"


def emit(name: str, mask: np.ndarray) -> None:
    mask = mask.astype(np.uint8)
    payload = rle_to_json(rle_encode(mask))
    payload["pixels_b64"] = base64.b64encode(mask.tobytes()).decode("ascii")
    path = OUT / f"{name}.json"
    path.write_text(json.dumps(payload) + "\n")
    print(f"{name}: dims={payload['dims']} runs={len(payload['counts'])}")


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)

    emit("empty_1x1", np.zeros((1, 1)))
    emit("full_1x1", np.ones((1, 1)))
    emit("empty_8x8", np.zeros((8, 8)))
    emit("full_8x8", np.ones((8, 8)))

    m = np.zeros((8, 8)); m[0, 0] = 1
    emit("first_pixel_8x8", m)
    m = np.zeros((8, 8)); m[7, 7] = 1
    emit("last_pixel_8x8", m)
    m = np.zeros((8, 8)); m[3, 4] = 1
    emit("lone_pixel_8x8", m)

    yy, xx = np.mgrid[0:8, 0:8]
    emit("checker_8x8", ((yy + xx) % 2).astype(np.uint8))
    emit("rows_8x8", (yy % 2).astype(np.uint8))

    m = np.zeros((6, 10)); m[2:5, 3:8] = 1
    emit("rect_6x10", m)
    emit("row_1x16", np.ones((1, 16)))
    m = np.zeros((16, 1)); m[4:9, 0] = 1
    emit("column_16x1", m)

    rng = np.random.default_rng(20260814)
    for size in ((5, 7), (16, 16), (24, 24), (64, 64)):
        for density in (0.1, 0.5, 0.9):
            tag = f"random_{size[0]}x{size[1]}_d{int(density * 100)}"
            emit(tag, (rng.random(size) < density).astype(np.uint8))

    # blob with a hole: nested boundaries stress run transitions
    yy, xx = np.mgrid[0:24, 0:24]
    disk = ((yy - 12) ** 2 + (xx - 12) ** 2 <= 81).astype(np.uint8)
    disk[((yy - 12) ** 2 + (xx - 12) ** 2 <= 9)] = 0
    emit("annulus_24x24", disk)


if __name__ == "__main__":
    main()
