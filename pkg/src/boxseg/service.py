"""HTTP backend for the annotation UI.

Stateful sessions wrap stateless compute: a session holds one normalized
volume and its annotation state, while segmentation itself is a pure function
of (checkpoint, slice, box). Image embeddings are cached per slice (bounded,
least-recently-used) so repeat boxes on a slice skip the encoder; the cached
and cold paths share the decode code and therefore produce bit-identical
masks. Masks travel as run-length counts, never as lossy images.
"""

from __future__ import annotations

import io
import json
import os
import secrets
import tempfile
import threading
import time
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response

from .annotate import (
    AnnotationSession,
    LinearMarker,
    assist_segment,
    export_session,
    record_refinement,
)
from .autodiff import Tensor
from .errors import BoxsegError, FormatError, MarkerError, SessionError, ShapeMismatchError
from .imgproc import normalize_volume
from .iohub import (
    container_to_volume,
    decode_volume,
    load_checkpoint,
    png_bytes,
    rle_encode,
    rle_from_json,
    rle_decode,
    rle_to_json,
)
from .model import (
    BoundingBox,
    ModelConfig,
    ParameterSet,
    decode_mask_batch,
    encode_box_batch,
    encode_image_batch,
    prepare_inference_tensors,
)
from .synthdata import SynthSpec, generate_tumor_volume

EMBEDDING_CACHE_CAPACITY = 64


class EmbeddingCache:
    """Thread-safe LRU of per-slice encoder outputs."""

    def __init__(self, capacity: int = EMBEDDING_CACHE_CAPACITY):
        self.capacity = capacity
        self._entries: OrderedDict[tuple, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: tuple) -> np.ndarray | None:
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                self.hits += 1
                return self._entries[key]
            self.misses += 1
            return None

    def put(self, key: tuple, value: np.ndarray) -> None:
        with self._lock:
            self._entries[key] = value
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)


@dataclass
class ServiceSession:
    id: str
    volume_data: np.ndarray  # normalized (D, S, S) float32 in [0, 255]
    annotation: AnnotationSession
    gt_mask: np.ndarray | None = None  # only for synth-spec sessions
    lock: threading.RLock = field(default_factory=threading.RLock)
    created: str = ""
    updated: str = ""

    def touch(self) -> None:
        self.updated = datetime.now(timezone.utc).isoformat()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _http_error(status: int, exc_or_message) -> HTTPException:
    if isinstance(exc_or_message, Exception):
        detail = {"error": type(exc_or_message).__name__, "message": str(exc_or_message)}
    else:
        detail = {"error": "BadRequest", "message": str(exc_or_message)}
    return HTTPException(status_code=status, detail=detail)


def create_app(
    checkpoint_path: str | None = None,
    params: ParameterSet | None = None,
    config: ModelConfig | None = None,
    checkpoint_hash: str = "",
    cache_capacity: int = EMBEDDING_CACHE_CAPACITY,
) -> FastAPI:
    """Build the service around one fixed checkpoint.

    Pass either a checkpoint path (defaults to $BOXSEG_CHECKPOINT) or an
    in-memory (params, config) pair.
    """
    if params is None or config is None:
        path = checkpoint_path or os.environ.get("BOXSEG_CHECKPOINT")
        if not path:
            raise BoxsegError(
                "no checkpoint: pass checkpoint_path or set BOXSEG_CHECKPOINT"
            )
        params, config, checkpoint_hash = load_checkpoint(path)

    app = FastAPI(title="boxseg service")
    state = {
        "params": params,
        "config": config,
        "hash": checkpoint_hash,
        # immutable, shared across requests; prompt constants precomputed
        "tensors": prepare_inference_tensors(params.to_tensors(), config),
        "sessions": {},
        "cache": EmbeddingCache(cache_capacity),
        "store_lock": threading.Lock(),
    }
    app.state.boxseg = state

    def get_session(session_id: str) -> ServiceSession:
        session = state["sessions"].get(session_id)
        if session is None:
            raise _http_error(404, f"unknown session {session_id!r}")
        return session

    def compute_embedding(session: ServiceSession, k: int) -> np.ndarray:
        cache: EmbeddingCache = state["cache"]
        key = (state["hash"], session.id, k)
        cached = cache.get(key)
        if cached is not None:
            return cached
        plane = np.repeat(session.volume_data[k][:, :, None], 3, axis=2)[None, ...]
        tokens = encode_image_batch(plane, state["tensors"], state["config"])
        embedding = tokens.data.astype(np.float32)
        cache.put(key, embedding)
        return embedding

    def run_segment(session: ServiceSession, k: int, box: BoundingBox) -> dict:
        config: ModelConfig = state["config"]
        depth, height, width = session.volume_data.shape
        if not (0 <= k < depth):
            raise _http_error(400, f"slice {k} outside [0, {depth})")
        if (height, width) != (config.image_size, config.image_size):
            raise _http_error(
                400,
                f"volume slices are {height}x{width} but the checkpoint expects "
                f"{config.image_size}x{config.image_size}",
            )
        try:
            box.validate(width, height)
        except BoxsegError as exc:
            raise _http_error(400, exc)

        cache: EmbeddingCache = state["cache"]
        hits_before = cache.hits
        started = time.monotonic()
        embedding = compute_embedding(session, k)
        prompts = encode_box_batch(box.as_array()[None, :], state["tensors"], config)
        probs, confidence = decode_mask_batch(
            Tensor(embedding), prompts, state["tensors"], config
        )
        elapsed_ms = (time.monotonic() - started) * 1000.0
        mask = (probs.data[0] > 0.5).astype(np.uint8)
        with session.lock:
            session.annotation.model_masks[k] = mask
            session.annotation.boxes[k] = box
            session.annotation.log_phase("inference", elapsed_ms / 1000.0)
            session.touch()
        return {
            "mask": rle_to_json(rle_encode(mask)),
            "confidence": float(confidence.data[0]),
            "inference_ms": elapsed_ms,
            "cache_hit": cache.hits > hits_before,
        }

    @app.post("/api/sessions")
    async def create_session(request: Request):
        content_type = request.headers.get("content-type", "")
        body = await request.body()
        if content_type.startswith("application/json"):
            try:
                payload = json.loads(body)
            except json.JSONDecodeError as exc:
                raise _http_error(400, exc)
            spec_obj = payload.get("synth") if isinstance(payload, dict) else None
            if not isinstance(spec_obj, dict):
                raise _http_error(400, "JSON body must carry a 'synth' object")
            try:
                depth = int(spec_obj.pop("depth", 20))
                spec = SynthSpec(
                    style=spec_obj.pop("style", "ct-like"),
                    image_size=int(spec_obj.pop("image_size", state["config"].image_size)),
                    seed=int(spec_obj.pop("seed", 0)),
                )
                if spec_obj:
                    raise _http_error(400, f"unknown synth fields {sorted(spec_obj)}")
                volume, gt = generate_tumor_volume(spec, depth)
            except BoxsegError as exc:
                raise _http_error(400, exc)
        else:
            try:
                container = decode_volume(body)
                volume = container_to_volume(container)
            except FormatError as exc:
                raise _http_error(400, exc)
            gt = None
        try:
            normalized = normalize_volume(volume)
        except BoxsegError as exc:
            raise _http_error(400, exc)

        session_id = secrets.token_hex(8)
        data = normalized.data.astype(np.float32)
        session = ServiceSession(
            id=session_id,
            volume_data=data,
            annotation=AnnotationSession(
                volume_id=session_id, slice_shape=data.shape[1:]
            ),
            gt_mask=gt,
            created=_now(),
        )
        session.updated = session.created
        with state["store_lock"]:
            state["sessions"][session_id] = session
        return {
            "id": session_id,
            "slices": int(data.shape[0]),
            "height": int(data.shape[1]),
            "width": int(data.shape[2]),
        }

    @app.get("/api/sessions/{session_id}")
    def session_info(session_id: str):
        session = get_session(session_id)
        with session.lock:
            ann = session.annotation
            return {
                "id": session.id,
                "slices": int(session.volume_data.shape[0]),
                "height": int(session.volume_data.shape[1]),
                "width": int(session.volume_data.shape[2]),
                "markers": sorted(ann.markers),
                "segmented": sorted(ann.model_masks),
                "refined": sorted(ann.refined_masks),
                "timing": {
                    phase: ann.phase_time(phase)
                    for phase in ("marking", "inference", "refinement")
                },
                "total_time": ann.total_time(),
                "created": session.created,
                "updated": session.updated,
                "checkpoint": state["hash"],
            }

    @app.get("/api/sessions/{session_id}/slices/{k}")
    def slice_png(session_id: str, k: int):
        session = get_session(session_id)
        depth = session.volume_data.shape[0]
        if not (0 <= k < depth):
            raise _http_error(404, f"slice {k} outside [0, {depth})")
        return Response(content=png_bytes(session.volume_data[k]), media_type="image/png")

    @app.get("/api/sessions/{session_id}/masks/{k}")
    def get_mask(session_id: str, k: int):
        session = get_session(session_id)
        with session.lock:
            ann = session.annotation
            mask = ann.refined_masks.get(k, ann.model_masks.get(k))
            if mask is None:
                raise _http_error(404, f"slice {k} has no mask")
            return {
                "mask": rle_to_json(rle_encode(mask)),
                "refined": k in ann.refined_masks,
            }

    @app.post("/api/sessions/{session_id}/segment")
    async def segment(session_id: str, request: Request):
        session = get_session(session_id)
        try:
            payload = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            raise _http_error(400, exc)
        if not isinstance(payload, dict) or "slice" not in payload or "box" not in payload:
            raise _http_error(400, "body must carry 'slice' and 'box' [x0,y0,x1,y1]")
        box_values = payload["box"]
        if not isinstance(box_values, (list, tuple)) or len(box_values) != 4:
            raise _http_error(400, "box must be [x_min, y_min, x_max, y_max]")
        try:
            box = BoundingBox(*(int(v) for v in box_values))
            k = int(payload["slice"])
        except (TypeError, ValueError) as exc:
            raise _http_error(400, exc)
        # hot path: serialize directly, skipping the model-to-JSON walker
        return Response(
            content=json.dumps(run_segment(session, k, box)),
            media_type="application/json",
        )

    @app.post("/api/sessions/{session_id}/markers")
    async def submit_markers(session_id: str, request: Request):
        session = get_session(session_id)
        try:
            payload = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            raise _http_error(400, exc)
        markers_obj = payload.get("markers") if isinstance(payload, dict) else None
        if not isinstance(markers_obj, list) or not markers_obj:
            raise _http_error(400, "body must carry a non-empty 'markers' list")
        depth, height, width = session.volume_data.shape
        parsed = []
        try:
            for entry in markers_obj:
                marker = LinearMarker(
                    slice_index=int(entry["slice"]),
                    long_axis=tuple(tuple(float(v) for v in p) for p in entry["long_axis"]),
                    short_axis=tuple(tuple(float(v) for v in p) for p in entry["short_axis"]),
                )
                if not (0 <= marker.slice_index < depth):
                    raise MarkerError(
                        f"marker slice {marker.slice_index} outside [0, {depth})"
                    )
                marker.validate(width, height)
                parsed.append(marker)
        except (KeyError, TypeError, ValueError, MarkerError) as exc:
            raise _http_error(400, exc)
        with session.lock:
            for marker in parsed:
                session.annotation.markers[marker.slice_index] = marker
            session.touch()
        return {"count": len(parsed), "slices": sorted(session.annotation.markers)}

    @app.post("/api/sessions/{session_id}/assist")
    def run_assist(session_id: str):
        session = get_session(session_id)
        with session.lock:
            markers = [session.annotation.markers[k] for k in sorted(session.annotation.markers)]
            if not markers:
                raise _http_error(409, "no markers submitted; assist needs at least one")
            from .imgproc import Modality, Volume

            # already normalized at ingest; MR tags it as plain grayscale
            volume = Volume(session.volume_data, Modality.MR)
            try:
                result = assist_segment(
                    volume, markers, state["params"], state["config"], session.id
                )
            except BoxsegError as exc:
                raise _http_error(400, exc)
            # merge: assist never clobbers manual refinements
            session.annotation.boxes.update(result.boxes)
            session.annotation.model_masks.update(result.model_masks)
            for entry in result.timing:
                session.annotation.timing.append(entry)
            session.touch()
            return {
                "slices": sorted(result.model_masks),
                "inference_ms": result.phase_time("inference") * 1000.0,
            }

    @app.put("/api/sessions/{session_id}/masks/{k}")
    async def refine(session_id: str, k: int, request: Request):
        session = get_session(session_id)
        try:
            payload = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            raise _http_error(400, exc)
        if not isinstance(payload, dict) or "mask" not in payload:
            raise _http_error(400, "body must carry 'mask' (RLE) and optional 'duration'")
        try:
            mask = rle_decode(rle_from_json(payload["mask"]))
            duration = float(payload.get("duration", 0.0))
        except (BoxsegError, TypeError, ValueError) as exc:
            raise _http_error(400, exc)
        with session.lock:
            try:
                record_refinement(session.annotation, k, mask, duration)
            except SessionError as exc:
                raise _http_error(409, exc)
            except (ShapeMismatchError, BoxsegError) as exc:
                raise _http_error(400, exc)
            session.touch()
        return {"slice": k, "refined": True}

    @app.get("/api/sessions/{session_id}/export")
    def export(session_id: str):
        session = get_session(session_id)
        with session.lock:
            with tempfile.TemporaryDirectory() as tmp:
                export_session(session.annotation, tmp)
                buffer = io.BytesIO()
                with zipfile.ZipFile(buffer, "w", zipfile.ZIP_DEFLATED) as archive:
                    for name in sorted(os.listdir(tmp)):
                        archive.write(os.path.join(tmp, name), arcname=name)
        return Response(
            content=buffer.getvalue(),
            media_type="application/zip",
            headers={
                "Content-Disposition": f'attachment; filename="session-{session.id}.zip"'
            },
        )

    @app.get("/api/health")
    def health():
        cache: EmbeddingCache = state["cache"]
        return {
            "status": "ok",
            "checkpoint": state["hash"],
            "sessions": len(state["sessions"]),
            "cache": {"hits": cache.hits, "misses": cache.misses},
        }

    return app
