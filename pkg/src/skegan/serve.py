"""HTTP service exposing sampling and interactive sketch completion.

Models are held in an immutable registry snapshot; a reload swaps the whole
snapshot, so in-flight requests keep the model they started with and new
requests during a reload get 503.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import uuid
from dataclasses import dataclass
from typing import Optional

import torch
from fastapi import FastAPI, HTTPException, Query
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import __version__
from .checkpoint import load_checkpoint
from .errors import CheckpointError
from .generator import complete as complete_sketch
from .strokes import Sketch, StrokePoint5, from_stroke5, ske_score
from .training import load_skegan_state
from .vaskegan import load_vaskegan_state
from .evaluation import skegan_sampler, vaskegan_sampler

MAX_SAMPLE_COUNT = 64


@dataclass
class ModelSnapshot:
    name: str
    kind: str
    n_max: int
    offset_scale: float
    label: str
    state: object

    def sampler(self):
        if self.kind == "skegan":
            return skegan_sampler(self.state.generator, self.n_max)
        return vaskegan_sampler(self.state)

    def complete(self, prefix: Sketch, tau: float, rng: torch.Generator) -> Sketch:
        if self.kind != "skegan":
            raise HTTPException(400, f"model {self.name!r} does not support completion")
        return complete_sketch(self.state.generator, prefix, tau, self.n_max, rng)


def load_model_snapshot(name: str, path: str) -> ModelSnapshot:
    ckpt = load_checkpoint(path)
    kind = ckpt.config.get("kind")
    if kind == "skegan":
        state = load_skegan_state(ckpt)
    elif kind == "vaskegan":
        state = load_vaskegan_state(ckpt)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    return ModelSnapshot(
        name=name,
        kind=kind,
        n_max=ckpt.config["n_max"],
        offset_scale=float(ckpt.config["offset_scale"]),
        label=ckpt.config.get("label", ""),
        state=state,
    )


class ModelRegistry:
    def __init__(self, snapshots: Optional[dict[str, ModelSnapshot]] = None):
        self._snapshots = dict(snapshots or {})
        self._lock = threading.Lock()
        self.reloading = False

    def get(self, name: str) -> ModelSnapshot:
        if self.reloading:
            raise HTTPException(503, "models are reloading")
        snapshot = self._snapshots.get(name)
        if snapshot is None:
            raise HTTPException(404, f"unknown model {name!r}")
        return snapshot

    def names(self) -> list[ModelSnapshot]:
        if self.reloading:
            raise HTTPException(503, "models are reloading")
        return list(self._snapshots.values())

    def reload(self, paths: dict[str, str]) -> None:
        """Load a new snapshot set, then swap atomically."""
        with self._lock:
            self.reloading = True
            try:
                fresh = {name: load_model_snapshot(name, path) for name, path in paths.items()}
                self._snapshots = fresh
            finally:
                self.reloading = False


class CompletionRequest(BaseModel):
    model: str
    tau: float = 0.25
    strokes: list[list[float]]


class CompletionResponse(BaseModel):
    strokes: list[list[float]]
    ske_score: float
    generation_id: str


def _validate_strokes(strokes: list[list[float]]) -> list[tuple[float, float, int]]:
    if not strokes:
        raise HTTPException(400, "strokes must be non-empty")
    triples = []
    for i, triple in enumerate(strokes):
        if len(triple) != 3:
            raise HTTPException(400, f"stroke {i} is not a [dx, dy, p] triple")
        dx, dy, p = triple
        if p not in (0, 1):
            raise HTTPException(400, f"stroke {i}: pen flag {p!r} not in {{0, 1}}")
        if not (math.isfinite(dx) and math.isfinite(dy)):
            raise HTTPException(400, f"stroke {i}: non-finite offset")
        triples.append((float(dx), float(dy), int(p)))
    return triples


def _validate_tau(tau: float) -> float:
    if not (0 < tau <= 1):
        raise HTTPException(400, f"tau must be in (0, 1], got {tau}")
    return tau


def create_app(
    registry: ModelRegistry,
    seed: Optional[int] = None,
    static_dir: Optional[str] = None,
) -> FastAPI:
    """Build the service. ``seed`` switches on deterministic mode: the RNG of
    each request is derived from the seed and the request payload, so
    identical requests produce identical output."""
    app = FastAPI(title="skegan service", version=__version__)

    def request_rng(payload: dict) -> torch.Generator:
        g = torch.Generator()
        if seed is None:
            g.seed()
        else:
            canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
            digest = hashlib.sha256(f"{seed}:{canonical}".encode()).digest()
            g.manual_seed(int.from_bytes(digest[:8], "little", signed=False))
        return g

    @app.get("/v1/health")
    def health():
        return {
            "status": "ok",
            "version": __version__,
            "deterministic": seed is not None,
            "models": [s.name for s in registry.names()],
        }

    @app.get("/v1/models")
    def models():
        return {
            "models": [
                {
                    "name": s.name,
                    "kind": s.kind,
                    "n_max": s.n_max,
                    "label": s.label,
                    "supports_completion": s.kind == "skegan",
                }
                for s in registry.names()
            ]
        }

    @app.post("/v1/complete", response_model=CompletionResponse)
    def complete(req: CompletionRequest):
        snapshot = registry.get(req.model)
        tau = _validate_tau(req.tau)
        triples = _validate_strokes(req.strokes)
        if len(triples) >= snapshot.n_max:
            raise HTTPException(
                400, f"prefix has {len(triples)} points; must be shorter than n_max={snapshot.n_max}"
            )
        scale = snapshot.offset_scale or 1.0
        prefix = Sketch(
            points=tuple(
                StrokePoint5(dx / scale, dy / scale, 1 - p, p, 0) for dx, dy, p in triples
            )
        )
        rng = request_rng({"op": "complete", "body": req.model_dump()})
        completed = snapshot.complete(prefix, tau, rng)
        out = [[pt.dx * scale, pt.dy * scale, pt.p] for pt in from_stroke5(completed.points)]
        return CompletionResponse(
            strokes=out,
            ske_score=ske_score(completed),
            generation_id=str(uuid.uuid4()) if seed is None else _stable_id(req.model_dump(), seed),
        )

    @app.get("/v1/sample")
    def sample(
        model: str,
        tau: float = Query(default=0.4),
        count: int = Query(default=1, ge=1, le=MAX_SAMPLE_COUNT),
    ):
        snapshot = registry.get(model)
        _validate_tau(tau)
        rng = request_rng({"op": "sample", "model": model, "tau": tau, "count": count})
        sketches = snapshot.sampler()(count, tau, rng)
        scale = snapshot.offset_scale or 1.0
        return {
            "model": model,
            "tau": tau,
            "sketches": [
                [[pt.dx * scale, pt.dy * scale, pt.p] for pt in from_stroke5(s.points)]
                for s in sketches
            ],
            "ske_scores": [ske_score(s) for s in sketches],
        }

    if static_dir and os.path.isdir(static_dir):
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def _stable_id(payload: dict, seed: int) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(f"id:{seed}:{canonical}".encode()).hexdigest()[:32]


def build_registry(model_specs: list[str]) -> ModelRegistry:
    """Parse ``name=path`` CLI arguments into a loaded registry."""
    snapshots = {}
    for spec in model_specs:
        name, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"model spec {spec!r} is not name=path")
        snapshots[name] = load_model_snapshot(name, path)
    if not snapshots:
        raise ValueError("at least one model must be loadable")
    return ModelRegistry(snapshots)
