"""HTTP job service: submit edits and sweeps, poll status, fetch images and
metrics, list runs. Every run persists under the store root for replay.

Run folders hold request.json (canonical), output PNGs, metrics.json and a
state file; an append-only index carries one line per run. Jobs go through
Queued -> Running -> Done/Failed, executed FIFO by a bounded worker pool
(default one worker). On restart, runs left Queued/Running are re-marked
Failed("interrupted"); Done runs stay fully readable.
"""
from __future__ import annotations

import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field, field_validator, model_validator

from . import pipeline, synthdata
from .canonical import canonical_dumps, canonical_hash
from .checkpoint import Bundle, load_bundle
from .injection import ChannelMaskSpec, InjectionPlan, InjectionWindow, NOISE_SOURCES


# --- configuration -----------------------------------------------------------

@dataclass
class ServiceConfig:
    port: int = 8787
    store_root: str = "runs"
    checkpoint_dir: str = "checkpoints"
    workers: int = 1
    ui_dir: Optional[str] = "frontend/web"

    @staticmethod
    def load(path: Optional[str] = None, env: Optional[dict] = None) -> "ServiceConfig":
        """Single config file plus SKIPFORGE_* environment overrides."""
        import os

        cfg = ServiceConfig()
        if path:
            data = json.loads(Path(path).read_text())
            for k, v in data.items():
                if hasattr(cfg, k):
                    setattr(cfg, k, v)
        env = env if env is not None else os.environ
        if env.get("SKIPFORGE_PORT"):
            cfg.port = int(env["SKIPFORGE_PORT"])
        if env.get("SKIPFORGE_STORE"):
            cfg.store_root = env["SKIPFORGE_STORE"]
        if env.get("SKIPFORGE_CHECKPOINT_DIR"):
            cfg.checkpoint_dir = env["SKIPFORGE_CHECKPOINT_DIR"]
        if env.get("SKIPFORGE_WORKERS"):
            cfg.workers = int(env["SKIPFORGE_WORKERS"])
        return cfg


# --- wire schemas ------------------------------------------------------------

class CondModel(BaseModel):
    shape: Literal[synthdata.SHAPES]  # type: ignore[valid-type]
    fg_palette: Literal[synthdata.FG_NAMES]  # type: ignore[valid-type]
    bg_style: Literal[synthdata.BG_STYLES]  # type: ignore[valid-type]


class MaskModel(BaseModel):
    variant: Literal["full", "period", "ratio"] = "full"
    param: Optional[float] = None

    @model_validator(mode="after")
    def check_param(self):
        ChannelMaskSpec(self.variant, self.param)  # raises with message
        return self


class PlanModel(BaseModel):
    taps: List[Union[int, Literal["h"]]] = Field(default=[4, 5], min_length=1)
    window: List[int] = Field(default=[400, 900], min_length=2, max_length=2)
    gamma: float = Field(default=0.75, ge=0.0)
    mask: MaskModel = MaskModel(variant="period", param=10)
    noise_source: Literal[NOISE_SOURCES] = "shared_random"  # type: ignore[valid-type]

    @field_validator("window")
    @classmethod
    def window_ordered(cls, v):
        if not 0 <= v[0] <= v[1]:
            raise ValueError(f"window must satisfy 0 <= t_end <= t_start, got {v}")
        return v

    @field_validator("taps")
    @classmethod
    def taps_known(cls, v):
        for t in v:
            if isinstance(t, int) and not 0 <= t <= 12:
                raise ValueError(f"tap {t} outside 0..12")
        return v

    def to_plan(self) -> InjectionPlan:
        return InjectionPlan(
            taps=tuple(self.taps),
            window=InjectionWindow(self.window[0], self.window[1]),
            gamma=self.gamma,
            mask=ChannelMaskSpec(self.mask.variant, self.mask.param),
            noise_source=self.noise_source,
        )


class SamplerModel(BaseModel):
    num_steps: int = Field(default=50, ge=1, le=1000)
    cfg_scale: float = 7.5
    eta: float = Field(default=0.0, ge=0.0, le=1.0)


class SourceModel(BaseModel):
    seed: Optional[int] = None
    image_id: Optional[str] = None
    cond: CondModel

    @model_validator(mode="after")
    def has_origin(self):
        if self.seed is None and self.image_id is None:
            raise ValueError("source needs a seed or an image_id")
        return self


class EditRequestModel(BaseModel):
    checkpoint: str
    mode: Literal[pipeline.MODES]  # type: ignore[valid-type]
    source: SourceModel
    target_cond: CondModel
    plan: PlanModel = PlanModel()
    sampler: SamplerModel = SamplerModel()

    @model_validator(mode="after")
    def mode_source(self):
        if self.mode == "edit_real" and self.source.image_id is None:
            raise ValueError("edit_real requires source.image_id")
        if self.mode != "edit_real" and self.source.seed is None:
            raise ValueError(f"{self.mode} requires source.seed")
        return self

    def to_request(self) -> dict:
        src: dict = {"cond": self.source.cond.model_dump()}
        if self.source.image_id is not None:
            src["image_id"] = self.source.image_id
        if self.source.seed is not None:
            src["seed"] = self.source.seed
        return {
            "checkpoint": self.checkpoint,
            "mode": self.mode,
            "source": src,
            "target_cond": self.target_cond.model_dump(),
            "plan": self.plan.to_plan().to_json(),
            "sampler": {
                "num_steps": self.sampler.num_steps,
                "cfg_scale": self.sampler.cfg_scale,
                "eta": self.sampler.eta,
            },
        }


class SweepGridModel(BaseModel):
    taps_axis: List[List[Union[int, Literal["h"]]]] = Field(min_length=1)
    windows: List[List[int]] = Field(min_length=1)
    gammas: List[float] = Field(min_length=1)
    masks: List[MaskModel] = Field(min_length=1)

    def to_grid(self) -> pipeline.SweepGrid:
        return pipeline.SweepGrid(
            taps_axis=tuple(tuple(t) for t in self.taps_axis),
            windows=tuple(InjectionWindow(w[0], w[1]) for w in self.windows),
            gammas=tuple(self.gammas),
            masks=tuple(ChannelMaskSpec(m.variant, m.param) for m in self.masks),
        )


class SweepRequestModel(BaseModel):
    base: EditRequestModel
    grid: SweepGridModel
    workers: int = Field(default=1, ge=1, le=8)


# --- run store ---------------------------------------------------------------

class RunStore:
    """Filesystem store: one folder per run plus an append-only index."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "images").mkdir(exist_ok=True)
        self.index_path = self.root / "index.jsonl"
        self._lock = threading.Lock()

    def new_run(self, request: dict, kind: str) -> str:
        digest = canonical_hash(request)[:12]
        run_id = f"{digest}-{uuid.uuid4().hex[:8]}"
        folder = self.root / run_id
        folder.mkdir()
        (folder / "request.json").write_text(canonical_dumps(request))
        with self._lock:
            with open(self.index_path, "a") as f:
                f.write(json.dumps({"run_id": run_id, "kind": kind, "created": time.time()}) + "\n")
        self.set_state(run_id, {"state": "queued", "created": time.time()})
        return run_id

    def set_state(self, run_id: str, state: dict) -> None:
        path = self.root / run_id / "state.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state))
        tmp.replace(path)

    def get_state(self, run_id: str) -> Optional[dict]:
        path = self.root / run_id / "state.json"
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def folder(self, run_id: str) -> Path:
        return self.root / run_id

    def list_runs(self, offset: int = 0, limit: int = 50) -> dict:
        entries = []
        if self.index_path.exists():
            with open(self.index_path) as f:
                entries = [json.loads(line) for line in f if line.strip()]
        entries.reverse()  # newest first
        page = entries[offset : offset + limit]
        for e in page:
            st = self.get_state(e["run_id"]) or {}
            e["state"] = st.get("state", "unknown")
        return {"total": len(entries), "offset": offset, "runs": page}

    def recover_interrupted(self) -> int:
        """Re-mark queued/running runs as failed after a restart."""
        n = 0
        for folder in self.root.iterdir():
            if not folder.is_dir() or folder.name == "images":
                continue
            st = self.get_state(folder.name)
            if st and st.get("state") in ("queued", "running"):
                st.update({"state": "failed", "reason": "interrupted"})
                self.set_state(folder.name, st)
                n += 1
        return n


# --- job execution -----------------------------------------------------------

@dataclass
class JobRuntime:
    config: ServiceConfig
    store: RunStore
    bundles: Dict[str, Bundle] = field(default_factory=dict)
    job_queue: "queue.Queue" = field(default_factory=queue.Queue)
    workers: List[threading.Thread] = field(default_factory=list)

    def checkpoint_names(self) -> List[str]:
        root = Path(self.config.checkpoint_dir)
        if not root.exists():
            return []
        return sorted(p.stem for p in root.glob("*.ckpt"))

    def bundle(self, name: str) -> Bundle:
        if name not in self.bundles:
            path = Path(self.config.checkpoint_dir) / f"{name}.ckpt"
            if not path.exists():
                raise FileNotFoundError(name)
            self.bundles[name] = load_bundle(path)
        return self.bundles[name]

    def start_workers(self) -> None:
        for i in range(self.config.workers):
            t = threading.Thread(target=self._worker_loop, name=f"skipforge-worker-{i}", daemon=True)
            t.start()
            self.workers.append(t)

    def _worker_loop(self) -> None:
        while True:
            item = self.job_queue.get()
            if item is None:
                return
            run_id, payload = item
            st = self.store.get_state(run_id) or {}
            st.update({"state": "running", "started": time.time()})
            self.store.set_state(run_id, st)
            try:
                self._execute(run_id, payload)
                st.update({"state": "done", "finished": time.time()})
            except Exception as exc:  # job failures land in state, not the log
                st.update({"state": "failed", "reason": str(exc), "finished": time.time()})
            self.store.set_state(run_id, st)
            self.job_queue.task_done()

    def _resolve_image(self, image_id: str) -> torch.Tensor:
        path = (self.store.root / "images" / image_id).resolve()
        if not str(path).startswith(str((self.store.root / "images").resolve())) or not path.exists():
            raise FileNotFoundError(f"unknown image_id {image_id!r}")
        return pipeline.load_png(path)

    def _execute(self, run_id: str, payload: dict) -> None:
        folder = self.store.folder(run_id)
        request = payload["request"]
        bundle = self.bundle(request["checkpoint"])
        if payload.get("sweep_grid"):
            grid = pipeline.SweepGrid.from_json(payload["sweep_grid"])
            csv_text, _ = pipeline.run_sweep(bundle, request, grid, workers=payload.get("workers", 1))
            (folder / "results.csv").write_text(csv_text)
            return
        images, report, montage_img = pipeline.execute_request(
            bundle, request, image_resolver=self._resolve_image
        )
        hashes = {}
        for name, img in images.items():
            pipeline.save_png(img, folder / f"{name}.png")
            hashes[name] = pipeline.image_hash(img)
        if montage_img is not None:
            montage_img.save(folder / "montage.png")
        (folder / "metrics.json").write_text(report.to_json())
        (folder / "hashes.json").write_text(canonical_dumps(hashes))


# --- app ---------------------------------------------------------------------

def create_app(config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig.load()
    store = RunStore(config.store_root)
    recovered = store.recover_interrupted()
    runtime = JobRuntime(config=config, store=store)
    runtime.start_workers()

    app = FastAPI(title="skipforge", version="0.1.0")
    app.state.runtime = runtime
    app.state.recovered = recovered

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        detail = [
            {"loc": [str(x) for x in err["loc"]], "msg": err["msg"]} for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"detail": detail})

    def _require_checkpoint(name: str) -> None:
        if name not in runtime.checkpoint_names():
            raise HTTPException(status_code=404, detail=f"unknown checkpoint {name!r}")

    @app.post("/runs", status_code=202)
    def submit_run(req: EditRequestModel):
        _require_checkpoint(req.checkpoint)
        request = req.to_request()
        run_id = store.new_run(request, kind=req.mode)
        runtime.job_queue.put((run_id, {"request": request}))
        return {"run_id": run_id}

    @app.post("/sweeps", status_code=202)
    def submit_sweep(req: SweepRequestModel):
        _require_checkpoint(req.base.checkpoint)
        grid = req.grid.to_grid()  # validates masks/windows
        request = req.base.to_request()
        run_id = store.new_run(request, kind="sweep")
        payload = {"request": request, "sweep_grid": grid.to_json(), "workers": req.workers}
        (store.folder(run_id) / "grid.json").write_text(canonical_dumps(grid.to_json()))
        runtime.job_queue.put((run_id, payload))
        return {"run_id": run_id}

    @app.get("/runs")
    def list_runs(offset: int = 0, limit: int = 50):
        return store.list_runs(offset=offset, limit=limit)

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        st = store.get_state(run_id)
        if st is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        folder = store.folder(run_id)
        out = {
            "run_id": run_id,
            "state": st.get("state"),
            "reason": st.get("reason"),
            "created": st.get("created"),
            "finished": st.get("finished"),
            "request": json.loads((folder / "request.json").read_text()),
        }
        if st.get("state") == "done":
            out["images"] = sorted(p.name for p in folder.glob("*.png"))
            if (folder / "metrics.json").exists():
                out["metrics"] = json.loads((folder / "metrics.json").read_text())
            if (folder / "hashes.json").exists():
                out["hashes"] = json.loads((folder / "hashes.json").read_text())
            if (folder / "results.csv").exists():
                out["results"] = "results.csv"
        return out

    @app.get("/runs/{run_id}/images/{name}")
    def get_image(run_id: str, name: str):
        st = store.get_state(run_id)
        if st is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        if st.get("state") != "done":
            raise HTTPException(status_code=409, detail=f"run is {st.get('state')}, images not ready")
        safe = Path(name).name
        path = store.folder(run_id) / safe
        if path.suffix != ".png" or not path.exists():
            raise HTTPException(status_code=404, detail=f"no image {name!r}")
        return FileResponse(path, media_type="image/png")

    @app.get("/runs/{run_id}/results.csv")
    def get_results(run_id: str):
        st = store.get_state(run_id)
        if st is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        if st.get("state") != "done":
            raise HTTPException(status_code=409, detail=f"run is {st.get('state')}, results not ready")
        path = store.folder(run_id) / "results.csv"
        if not path.exists():
            raise HTTPException(status_code=404, detail="run has no results.csv")
        return PlainTextResponse(path.read_text(), media_type="text/csv")

    @app.get("/checkpoints")
    def checkpoints():
        out = []
        for name in runtime.checkpoint_names():
            try:
                out.append({"name": name, "hash": runtime.bundle(name).checkpoint_hash})
            except Exception:
                out.append({"name": name, "hash": None})
        return out

    @app.get("/schema")
    def schema_index():
        return {
            "request": EditRequestModel.model_json_schema(),
            "sweep": SweepRequestModel.model_json_schema(),
        }

    @app.get("/schema/default-request")
    def default_request():
        return Response(
            content=canonical_dumps(pipeline.default_edit_request()),
            media_type="application/json",
        )

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "recovered": recovered, "checkpoints": runtime.checkpoint_names()}

    ui_dir = config.ui_dir
    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host="127.0.0.1", port=config.port, log_level="warning")
