"""Story scripts: parse, render frame-by-frame, assemble a manifest.

A script is JSON with a schema version, an optional style suffix that is
appended to every prompt (the only prompt transformation performed here),
and an ordered frame list. Frames are independent, so rendering can fan out
across sessions; outputs and the manifest are byte-stable across reruns and
across serial/parallel execution.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from PIL import Image

from .errors import MissingPlugin, SchemaViolation
from .inference import (
    DEFAULT_SCHEDULE,
    EditSchedule,
    FrameResult,
    GenerationRequest,
    LayoutSpec,
    generate_frame,
    hash_request,
)
from .plugin import PluginStore

SCHEMA_VERSION = 1
CHARACTER_SOFT_CAP = 3


@dataclass
class FrameSpec:
    id: str
    prompt: str
    characters: List[str]
    layout: LayoutSpec
    seed: int


@dataclass
class StoryScript:
    title: str
    frames: List[FrameSpec]
    style_suffix: Optional[str] = None

    def prompt_for(self, frame: FrameSpec) -> str:
        if self.style_suffix:
            return f"{frame.prompt}, {self.style_suffix}"
        return frame.prompt


def _fail(msg: str, *, frame: Optional[str] = None, fld: Optional[str] = None):
    where = []
    if frame is not None:
        where.append(f"frame {frame!r}")
    if fld is not None:
        where.append(f"field {fld!r}")
    prefix = " ".join(where)
    raise SchemaViolation(f"{prefix}: {msg}" if prefix else msg)


def parse_script_dict(doc: dict) -> StoryScript:
    if not isinstance(doc, dict):
        _fail("script must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        _fail(f"unsupported schema_version {version!r}", fld="schema_version")
    frames_doc = doc.get("frames")
    if not isinstance(frames_doc, list) or not frames_doc:
        _fail("frames must be a non-empty list", fld="frames")

    frames: List[FrameSpec] = []
    seen_ids = set()
    for i, fd in enumerate(frames_doc):
        if not isinstance(fd, dict):
            _fail(f"frame #{i} must be an object", fld="frames")
        fid = fd.get("id")
        if not isinstance(fid, str) or not fid:
            _fail(f"frame #{i} needs a non-empty string id", fld="id")
        if fid in seen_ids:
            _fail("duplicate frame id", frame=fid, fld="id")
        seen_ids.add(fid)
        prompt = fd.get("prompt")
        if not isinstance(prompt, str) or not prompt.strip():
            _fail("prompt must be a non-empty string", frame=fid, fld="prompt")
        characters = fd.get("characters", [])
        if not isinstance(characters, list) or \
                any(not isinstance(c, str) for c in characters):
            _fail("characters must be a list of names", frame=fid, fld="characters")
        if len(set(characters)) != len(characters):
            _fail("characters list has duplicates", frame=fid, fld="characters")
        if len(characters) > CHARACTER_SOFT_CAP:
            warnings.warn(
                f"frame {fid!r} names {len(characters)} characters; "
                f"more than {CHARACTER_SOFT_CAP} is untested territory",
                stacklevel=2,
            )
        try:
            layout = LayoutSpec.from_dict(fd.get("layout", {}))
        except Exception as exc:
            _fail(str(exc), frame=fid, fld="layout")
        for name in characters:
            if name not in layout.boxes:
                _fail(f"character {name!r} has no box", frame=fid, fld="layout")
        for name in layout.boxes:
            if name not in characters:
                _fail(f"box {name!r} does not match a character", frame=fid, fld="layout")
        seed = fd.get("seed")
        if not isinstance(seed, int):
            _fail("seed must be an integer", frame=fid, fld="seed")
        frames.append(FrameSpec(id=fid, prompt=prompt, characters=characters,
                                layout=layout, seed=seed))

    return StoryScript(
        title=doc.get("title", ""),
        frames=frames,
        style_suffix=doc.get("style_suffix") or None,
    )


def parse_script(path) -> StoryScript:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"script is not valid JSON: {exc}") from exc
    return parse_script_dict(doc)


def script_to_dict(script: StoryScript) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "title": script.title,
        "style_suffix": script.style_suffix,
        "frames": [
            {
                "id": f.id,
                "prompt": f.prompt,
                "characters": list(f.characters),
                "layout": f.layout.to_dict(),
                "seed": f.seed,
            }
            for f in script.frames
        ],
    }


def build_frame_request(script: StoryScript, frame: FrameSpec, store: PluginStore,
                        *, steps: int, guidance_scale: float) -> GenerationRequest:
    plugins = []
    for name in frame.characters:
        plugin = store.get(name)
        if plugin is None:
            raise MissingPlugin(
                f"frame {frame.id!r} needs plugin {name!r}, not found in store"
            )
        plugins.append(plugin)
    return GenerationRequest(
        prompt=script.prompt_for(frame),
        plugins=plugins,
        layout=frame.layout,
        seed=frame.seed,
        steps=steps,
        guidance_scale=guidance_scale,
    )


@dataclass
class StoryManifest:
    title: str
    frames: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"title": self.title, "frames": self.frames}


def render_story(
    script: StoryScript,
    store: PluginStore,
    session_factory: Callable[[], object],
    out_dir,
    *,
    steps: int = 100,
    guidance_scale: float = 7.5,
    schedule: EditSchedule = DEFAULT_SCHEDULE,
    workers: int = 1,
    progress: Optional[Callable[[int, int], None]] = None,
) -> StoryManifest:
    """Render every frame and write frames/, diagnostics/ and manifest.json."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "diagnostics").mkdir(parents=True, exist_ok=True)

    requests = [
        build_frame_request(script, f, store, steps=steps,
                            guidance_scale=guidance_scale)
        for f in script.frames
    ]

    results: Dict[int, FrameResult] = {}

    def render_one(index: int) -> None:
        session = session_factory()
        results[index] = generate_frame(requests[index], session, schedule)
        if progress is not None:
            progress(len(results), len(requests))

    if workers <= 1:
        for i in range(len(requests)):
            render_one(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render_one, range(len(requests))))

    manifest = StoryManifest(title=script.title)
    for i, frame in enumerate(script.frames):
        result = results[i]
        image_rel = f"frames/{frame.id}.png"
        diag_rel = f"diagnostics/{frame.id}.json"
        Image.fromarray(result.image).save(out / image_rel)
        (out / diag_rel).write_text(
            json.dumps(result.diagnostics, indent=2, sort_keys=True),
            encoding="utf-8",
        )
        image_sha = hashlib.sha256((out / image_rel).read_bytes()).hexdigest()
        manifest.frames.append({
            "id": frame.id,
            "request_hash": hash_request(requests[i]),
            "seed": frame.seed,
            "image_path": image_rel,
            "image_sha256": image_sha,
            "diagnostics_path": diag_rel,
        })

    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    return manifest
