"""HTTP service: plugin management, training jobs, frame/story generation.

Single-process design: a bounded worker pool executes jobs (one backend
session per worker thread), a lock-guarded job store is the only shared
mutable state, and results land in a content-addressed directory with a
JSON index. Clients poll ``GET /jobs/{id}``; state only ever moves
queued -> running -> done|failed and progress never decreases.
"""

from __future__ import annotations

import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from fastapi import FastAPI, File, Request, UploadFile
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel, Field

from . import plugin as plugin_format
from .augment import load_dataset
from .errors import (
    MissingPlugin,
    SchemaViolation,
    StorykitError,
    ValidationError,
)
from .extraction import extract_character_plugin
from .inference import (
    DEFAULT_SCHEDULE,
    GenerationRequest,
    LayoutSpec,
    generate_frame,
    hash_request,
    request_hash,
)
from .plugin import PluginStore
from .story import parse_script_dict, render_story, script_to_dict
from .toy import create_toy_session
from .training import FineTuneConfig, train_text_encoder

JOB_KINDS = ("augment", "train", "extract", "frame", "story")
JOB_STATES = ("queued", "running", "done", "failed")


@dataclass
class Job:
    id: str
    kind: str
    state: str = "queued"
    progress: float = 0.0
    result_ref: Optional[str] = None
    error_detail: Optional[str] = None
    request_payload: dict = field(default_factory=dict)
    request_hash: Optional[str] = None
    result: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("request_payload")
        return d


_ALLOWED = {"queued": {"running"}, "running": {"done", "failed"}}


class JobStore:
    """Lock-guarded job table persisted to an index file."""

    def __init__(self, index_path: Path):
        self.index_path = index_path
        self.jobs: Dict[str, Job] = {}
        self.lock = threading.Lock()

    def create(self, kind: str, payload: dict, req_hash: Optional[str] = None) -> Job:
        job = Job(id=uuid.uuid4().hex[:12], kind=kind,
                  request_payload=payload, request_hash=req_hash)
        with self.lock:
            self.jobs[job.id] = job
            self._persist()
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self.lock:
            return self.jobs.get(job_id)

    def transition(self, job_id: str, state: str) -> None:
        with self.lock:
            job = self.jobs[job_id]
            if state not in _ALLOWED.get(job.state, set()):
                raise RuntimeError(f"illegal transition {job.state} -> {state}")
            job.state = state
            self._persist()

    def update_progress(self, job_id: str, progress: float) -> None:
        with self.lock:
            job = self.jobs[job_id]
            job.progress = max(job.progress, min(1.0, progress))

    def finish(self, job_id: str, *, result_ref: Optional[str] = None,
               result: Optional[dict] = None, error: Optional[str] = None) -> None:
        with self.lock:
            job = self.jobs[job_id]
            if error is None:
                job.state = "done"
                job.progress = 1.0
                job.result_ref = result_ref
                job.result = result or {}
            else:
                job.state = "failed"
                job.error_detail = error
            self._persist()

    def _persist(self) -> None:
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps({jid: j.to_dict() for jid, j in self.jobs.items()},
                       indent=2, sort_keys=True),
            encoding="utf-8",
        )
        tmp.replace(self.index_path)


# --- wire models ---

class LayoutModel(BaseModel):
    boxes: Dict[str, List[float]] = Field(default_factory=dict)
    positive_value: float = 2.5
    negative_value: float = -1e8


class FrameJobModel(BaseModel):
    prompt: str
    plugins: List[str] = Field(default_factory=list)
    layout: LayoutModel = Field(default_factory=LayoutModel)
    seed: int
    steps: int = 100
    guidance_scale: float = 7.5


class TrainConfigModel(BaseModel):
    steps: int
    learning_rate: float = 5e-6
    lambda_reg: float = 0.01
    batch_size: int = 1
    seed: int = 0


class TrainJobModel(BaseModel):
    dataset_dir: str
    config: TrainConfigModel
    class_noun: Optional[str] = None   # overrides the dataset label
    plugin_name: Optional[str] = None  # extract + register plugin when done


class StoryJobModel(BaseModel):
    story_id: str
    steps: int = 100
    guidance_scale: float = 7.5
    workers: int = 1


@dataclass
class ServiceConfig:
    data_dir: Path
    backend_seed: int = 0
    workers: int = 2

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)


def _layout_from_model(m: LayoutModel) -> LayoutSpec:
    boxes = {}
    for name, vals in m.boxes.items():
        if len(vals) != 4:
            raise ValidationError(f"box for {name!r} must have 4 coordinates")
        boxes[name] = tuple(float(v) for v in vals)
    return LayoutSpec(boxes=boxes, positive_value=m.positive_value,
                      negative_value=m.negative_value)


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="storykit service")
    data_dir = config.data_dir
    data_dir.mkdir(parents=True, exist_ok=True)
    (data_dir / "results").mkdir(exist_ok=True)
    (data_dir / "stories").mkdir(exist_ok=True)

    store = PluginStore(data_dir / "plugins")
    jobs = JobStore(data_dir / "jobs.json")
    pool = ThreadPoolExecutor(max_workers=config.workers)
    local = threading.local()
    stories: Dict[str, dict] = {}

    def session():
        if not hasattr(local, "session"):
            local.session = create_toy_session(seed=config.backend_seed)
        return local.session

    app.state.config = config
    app.state.jobs = jobs
    app.state.plugins = store

    @app.exception_handler(StorykitError)
    async def _storykit_error(request: Request, exc: StorykitError):
        status = 422
        if isinstance(exc, MissingPlugin):
            status = 404
        elif exc.code == "duplicate_plugin":
            status = 409
        return JSONResponse(
            status_code=status,
            content={"error": exc.code, "message": str(exc)},
        )

    # --- plugins ---

    @app.post("/plugins", status_code=201)
    async def upload_plugin(file: UploadFile = File(...)):
        data = await file.read()
        try:
            plugin = plugin_format.deserialize(data)
        except StorykitError as exc:
            return JSONResponse(status_code=400,
                                content={"error": exc.code, "message": str(exc)})
        violations = plugin_format.validate(
            plugin, session().descriptor, session().tokenizer
        )
        if violations:
            return JSONResponse(
                status_code=400,
                content={"error": "validation_failed", "violations": violations},
            )
        store.add(plugin)  # DuplicatePlugin -> 409 via handler
        return _plugin_meta(plugin)

    def _plugin_meta(plugin) -> dict:
        rows, cols = plugin.rows.shape
        return {
            "name": plugin.name,
            "class_noun": plugin.class_noun,
            "descriptor_id": plugin.descriptor_id,
            "rows": rows,
            "cols": cols,
            "created_at": plugin.created_at,
        }

    @app.get("/plugins")
    def list_plugins():
        return [_plugin_meta(store.get(name)) for name in store.names()]

    @app.get("/plugins/{name}")
    def get_plugin(name: str):
        plugin = store.get(name)
        if plugin is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "message": name})
        return _plugin_meta(plugin)

    # --- jobs ---

    def _run_frame_job(job: Job, model: FrameJobModel):
        jobs.transition(job.id, "running")
        try:
            sess = session()
            plugins = []
            for name in model.plugins:
                plugin = store.get(name)
                if plugin is None:
                    raise MissingPlugin(f"plugin {name!r} not found")
                plugins.append(plugin)
            request = GenerationRequest(
                prompt=model.prompt,
                plugins=plugins,
                layout=_layout_from_model(model.layout),
                seed=model.seed,
                steps=model.steps,
                guidance_scale=model.guidance_scale,
            )

            result = generate_frame(
                request, sess, DEFAULT_SCHEDULE,
                on_step=lambda step, total: jobs.update_progress(job.id, step / total),
            )
            out_dir = data_dir / "results" / job.request_hash[:16]
            out_dir.mkdir(parents=True, exist_ok=True)
            from PIL import Image

            Image.fromarray(result.image).save(out_dir / "frame.png")
            (out_dir / "diagnostics.json").write_text(
                json.dumps(result.diagnostics, indent=2, sort_keys=True),
                encoding="utf-8",
            )
            jobs.finish(
                job.id,
                result_ref=str(out_dir / "frame.png"),
                result={
                    "request_hash": result.diagnostics["request_hash"],
                    "diagnostics": result.diagnostics,
                },
            )
        except Exception as exc:
            jobs.finish(job.id, error=f"{type(exc).__name__}: {exc}")

    @app.post("/jobs/frame")
    def submit_frame_job(model: FrameJobModel):
        for name in model.plugins:
            if name not in store:
                raise MissingPlugin(f"plugin {name!r} not found")
        layout = _layout_from_model(model.layout)  # 422 on bad boxes
        req_hash = request_hash(model.prompt, model.plugins, layout,
                                model.seed, model.steps, model.guidance_scale)
        job = jobs.create("frame", model.model_dump(), req_hash)
        pool.submit(_run_frame_job, job, model)
        return {"job_id": job.id, "request_hash": req_hash}

    def _run_train_job(job: Job, model: TrainJobModel):
        jobs.transition(job.id, "running")
        try:
            sess = session()
            dataset = load_dataset(model.dataset_dir, label_override=model.class_noun)
            cfg = FineTuneConfig(
                steps=model.config.steps,
                learning_rate=model.config.learning_rate,
                lambda_reg=model.config.lambda_reg,
                batch_size=model.config.batch_size,
                seed=model.config.seed,
            )
            ckpt_dir = data_dir / "results" / job.id
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            ckpt_path = ckpt_dir / "encoder.ckpt"
            outcome = train_text_encoder(
                dataset, cfg, sess,
                checkpoint_path=ckpt_path,
                history_path=ckpt_dir / "loss_history.csv",
                progress=lambda step, total: jobs.update_progress(job.id, step / total),
            )
            result = {"checkpoint": str(ckpt_path),
                      "final_loss": outcome.history[-1][3]}
            if model.plugin_name:
                plugin = extract_character_plugin(
                    sess, outcome.encoder,
                    name=model.plugin_name, class_noun=dataset.label,
                )
                store.add(plugin, overwrite=True)
                result["plugin"] = model.plugin_name
            jobs.finish(job.id, result_ref=str(ckpt_path), result=result)
        except Exception as exc:
            jobs.finish(job.id, error=f"{type(exc).__name__}: {exc}")

    @app.post("/jobs/train")
    def submit_train_job(model: TrainJobModel):
        if not (Path(model.dataset_dir) / "manifest.json").exists():
            raise ValidationError(f"no dataset manifest in {model.dataset_dir}")
        job = jobs.create("train", model.model_dump())
        pool.submit(_run_train_job, job, model)
        return {"job_id": job.id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "message": job_id})
        doc = job.to_dict()
        if job.kind == "frame" and job.request_hash is not None:
            # tamper check: stored hash must reproduce from stored inputs
            m = FrameJobModel(**job.request_payload)
            recomputed = request_hash(
                m.prompt, m.plugins, _layout_from_model(m.layout),
                m.seed, m.steps, m.guidance_scale,
            )
            if recomputed != job.request_hash:
                return JSONResponse(
                    status_code=500,
                    content={"error": "hash_mismatch",
                             "message": "stored request does not match its hash"},
                )
        return doc

    @app.get("/jobs/{job_id}/image")
    def get_job_image(job_id: str):
        job = jobs.get(job_id)
        if job is None or job.state != "done" or not job.result_ref:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "message": job_id})
        return FileResponse(job.result_ref, media_type="image/png")

    # --- stories ---

    @app.post("/stories", status_code=201)
    def create_story(doc: dict):
        script = parse_script_dict(doc)  # SchemaViolation -> 422
        story_id = uuid.uuid4().hex[:12]
        stories[story_id] = script_to_dict(script)
        (data_dir / "stories" / f"{story_id}.json").write_text(
            json.dumps(stories[story_id], indent=2, sort_keys=True),
            encoding="utf-8",
        )
        return {"story_id": story_id, "frames": len(script.frames)}

    def _run_story_job(job: Job, model: StoryJobModel):
        jobs.transition(job.id, "running")
        try:
            script = parse_script_dict(stories[model.story_id])
            out_dir = data_dir / "stories" / model.story_id
            manifest = render_story(
                script, store,
                lambda: create_toy_session(seed=config.backend_seed),
                out_dir,
                steps=model.steps,
                guidance_scale=model.guidance_scale,
                workers=model.workers,
                progress=lambda done, total: jobs.update_progress(job.id, done / total),
            )
            jobs.finish(job.id, result_ref=str(out_dir / "manifest.json"),
                        result={"frames": len(manifest.frames)})
        except Exception as exc:
            jobs.finish(job.id, error=f"{type(exc).__name__}: {exc}")

    @app.post("/jobs/story")
    def submit_story_job(model: StoryJobModel):
        if model.story_id not in stories:
            return JSONResponse(status_code=404,
                                content={"error": "not_found",
                                         "message": model.story_id})
        job = jobs.create("story", model.model_dump())
        pool.submit(_run_story_job, job, model)
        return {"job_id": job.id}

    @app.get("/stories/{story_id}/frames")
    def get_story_frames(story_id: str):
        manifest_path = data_dir / "stories" / story_id / "manifest.json"
        if not manifest_path.exists():
            return JSONResponse(status_code=404,
                                content={"error": "not_found",
                                         "message": f"story {story_id} not rendered"})
        return json.loads(manifest_path.read_text(encoding="utf-8"))

    @app.get("/stories/{story_id}/frames/{frame_id}/image")
    def get_story_frame_image(story_id: str, frame_id: str):
        path = data_dir / "stories" / story_id / "frames" / f"{frame_id}.png"
        if not path.exists():
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "message": frame_id})
        return FileResponse(path, media_type="image/png")

    return app
