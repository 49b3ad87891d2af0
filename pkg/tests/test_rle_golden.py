"""Wire-format pins: the RLE coder must keep matching the frozen corpus.

The same files drive the frontend decoder tests (frontend/tests/rle.test.ts),
so drift here breaks the client contract even while encode/decode still
round-trip internally.
"""

import base64
import json
import pathlib

import numpy as np
import pytest

from boxseg.iohub import rle_decode, rle_encode, rle_from_json, rle_to_json

CORPUS = sorted((pathlib.Path(__file__).parent / "golden" / "rle").glob("*.json"))


def _load(path):
    payload = json.loads(path.read_text())
    h, w = payload["dims"]
    mask = np.frombuffer(
        base64.b64decode(payload["pixels_b64"]), dtype=np.uint8
    ).reshape(h, w)
    return payload, mask


def test_corpus_present():
    assert len(CORPUS) >= 20


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_encoder_matches_frozen_corpus(path):
    payload, mask = _load(path)
    assert rle_to_json(rle_encode(mask)) == {
        "dims": payload["dims"],
        "counts": payload["counts"],
    }


@pytest.mark.parametrize("path", CORPUS, ids=lambda p: p.stem)
def test_decoder_matches_frozen_corpus(path):
    payload, mask = _load(path)
    decoded = rle_decode(rle_from_json({"dims": payload["dims"], "counts": payload["counts"]}))
    assert np.array_equal(decoded, mask)
