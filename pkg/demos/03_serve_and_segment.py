"""Run the HTTP service and segment through it, showing the embedding cache.

Starts uvicorn on a local port, creates a synthetic session, then sends two
boxes against the same slice: the first call computes the image embedding,
the second reuses it and reports a cache hit with lower latency. Needs
demos/out/quickstart.bsc from demo 01.
"""

import json
import pathlib
import sys
import threading
import time
import urllib.request

import numpy as np

import uvicorn

from boxseg.iohub import rle_decode, rle_from_json
from boxseg.service import create_app

OUT = pathlib.Path(__file__).parent / "out"
PORT = 8765


def call(method: str, path: str, payload: dict | None = None) -> dict:
    request = urllib.request.Request(
        f"http://127.0.0.1:{PORT}{path}",
        data=None if payload is None else json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"},
        method=method,
    )
    with urllib.request.urlopen(request) as response:
        return json.loads(response.read())


def main() -> None:
    checkpoint = OUT / "quickstart.bsc"
    if not checkpoint.exists():
        sys.exit("run demos/01_train_and_eval.py first (it saves the checkpoint)")

    app = create_app(checkpoint_path=str(checkpoint))
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=PORT, log_level="warning")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    while not server.started:
        time.sleep(0.05)

    health = call("GET", "/api/health")
    print(f"service up: checkpoint {health['checkpoint'][:12]}..., {health['sessions']} sessions")

    session = call("POST", "/api/sessions", {"synth": {"depth": 8, "seed": 3}})
    print(f"session {session['id']}: {session['slices']} slices of "
          f"{session['height']}x{session['width']}")

    size = session["height"]
    box = [size // 4, size // 4, 3 * size // 4, 3 * size // 4]
    url = f"/api/sessions/{session['id']}/segment"
    first = call("POST", url, {"slice": 4, "box": box})
    second = call("POST", url, {"slice": 4, "box": [v + 1 for v in box]})
    print(
        f"first box:  cache_hit={first['cache_hit']}, "
        f"inference {first['inference_ms']:.2f}ms, confidence {first['confidence']:.2f}"
    )
    print(
        f"second box: cache_hit={second['cache_hit']}, "
        f"inference {second['inference_ms']:.2f}ms (embedding reused)"
    )

    mask = rle_decode(rle_from_json(first["mask"]))
    print(f"returned mask: {int(mask.sum())} foreground px of {mask.size}")

    repeat = call("POST", url, {"slice": 4, "box": box})
    same = np.array_equal(mask, rle_decode(rle_from_json(repeat["mask"])))
    print(f"same box again: mask identical to first call: {same}")

    server.should_exit = True
    thread.join(timeout=5)
    print("service stopped")


if __name__ == "__main__":
    main()
