"""Median cold vs cached segment latency through the HTTP layer."""
import statistics
import time

from fastapi.testclient import TestClient

from boxseg.service import create_app

app = create_app(checkpoint_path=".calib/desk.bsc")
client = TestClient(app)

sid = client.post("/api/sessions", json={"synth": {"depth": 16, "seed": 1}}).json()["id"]
size = 64
box = [size // 4, size // 4, 3 * size // 4, 3 * size // 4]

cold, cached = [], []
for k in range(16):
    body = {"slice": k, "box": box}
    t0 = time.perf_counter()
    r1 = client.post(f"/api/sessions/{sid}/segment", json=body)
    t1 = time.perf_counter()
    r2 = client.post(f"/api/sessions/{sid}/segment", json=body)
    t2 = time.perf_counter()
    assert r1.status_code == 200 and r2.status_code == 200
    assert not r1.json()["cache_hit"] and r2.json()["cache_hit"]
    assert r1.json()["mask"] == r2.json()["mask"]
    cold.append(t1 - t0)
    cached.append(t2 - t1)

mc = statistics.median(cold) * 1e3
mh = statistics.median(cached) * 1e3
print(f"cold {mc:.2f}ms cached {mh:.2f}ms ratio {mh / mc * 100:.1f}%")
