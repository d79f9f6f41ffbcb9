"""Command-line frontend for the full pipeline.

Thin wrappers over the module functions: augment a dataset, train the text
encoder, extract a plugin, generate single frames, render whole stories,
score outputs, inspect plugin files, or serve the HTTP API. Every command
that consumes randomness requires an explicit --seed; exit codes are
0 (ok), 2 (usage), 3 (validation), 4 (runtime).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import plugin as plugin_format
from .augment import (
    SceneDescriptionList,
    build_training_set,
    generate_backgrounds,
    load_dataset,
    save_dataset,
)
from .errors import StorykitError, ValidationError
from .evaluation import (
    HashEmbedder,
    export_human_eval_sheet,
    image_alignment,
    text_alignment,
    write_scores_csv,
)
from .extraction import extract_character_plugin
from .inference import GenerationRequest, LayoutSpec, generate_frame
from .plugin import PluginStore
from .story import parse_script, render_story
from .toy import create_toy_session
from .training import FineTuneConfig, encoder_from_checkpoint, train_text_encoder

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


def _session(args):
    return create_toy_session(seed=args.backend_seed)


def _add_backend_arg(parser):
    parser.add_argument("--backend-seed", type=int, default=0,
                        help="seed of the toy backend weights (model identity)")


def _load_images(directory):
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise ValidationError(f"no .png images in {directory}")
    return [np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8) for p in paths]


def cmd_augment(args) -> int:
    session = _session(args)
    scenes = SceneDescriptionList.from_file(args.scenes)
    n_backgrounds = args.backgrounds if args.backgrounds else max(1, args.n)
    backgrounds = generate_backgrounds(
        scenes, session, n_backgrounds, args.seed, steps=args.bg_steps
    )
    dataset = build_training_set(
        args.chars, backgrounds, args.n, args.class_noun, args.seed,
        scale_range=(args.scale_min, args.scale_max),
    )
    manifest = save_dataset(dataset, args.out)
    print(f"dataset: m={dataset.m} n={dataset.n} q={len(dataset)} -> {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    session = _session(args)
    dataset = load_dataset(args.dataset, label_override=args.class_noun)
    config = FineTuneConfig(
        steps=args.steps,
        learning_rate=args.lr,
        lambda_reg=getattr(args, "lambda"),
        batch_size=args.batch_size,
        seed=args.seed,
    )
    result = train_text_encoder(
        dataset, config, session,
        checkpoint_path=args.out,
        resume_from=args.resume,
        history_path=args.history,
    )
    last = result.history[-1]
    print(f"trained {config.steps} steps; final l_sub={last[1]:.6f} "
          f"l_reg={last[2]:.6f} l_total={last[3]:.6f} -> {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    session = _session(args)
    encoder, class_noun = encoder_from_checkpoint(args.ckpt, session)
    plugin = extract_character_plugin(
        session, encoder, name=args.name, class_noun=class_noun
    )
    plugin_format.save(plugin, args.out)
    rows, cols = plugin.rows.shape
    print(f"plugin {plugin.name!r} ({class_noun}): {rows}x{cols} -> {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    session = _session(args)
    plugins = [plugin_format.load(p) for p in args.plugin or []]
    layout = LayoutSpec.from_dict(
        json.loads(Path(args.layout).read_text(encoding="utf-8"))
    ) if args.layout else LayoutSpec()
    request = GenerationRequest(
        prompt=args.prompt,
        plugins=plugins,
        layout=layout,
        seed=args.seed,
        steps=args.steps,
        guidance_scale=args.scale,
    )
    result = generate_frame(request, session)
    Image.fromarray(result.image).save(args.out)
    if args.diagnostics:
        Path(args.diagnostics).write_text(
            json.dumps(result.diagnostics, indent=2, sort_keys=True),
            encoding="utf-8",
        )
    print(f"frame {result.diagnostics['request_hash'][:16]} -> {args.out}")
    return EXIT_OK


def cmd_render_story(args) -> int:
    session_seed = args.backend_seed
    script = parse_script(args.script)
    store = PluginStore(args.plugins)
    manifest = render_story(
        script, store,
        lambda: create_toy_session(seed=session_seed),
        args.out,
        steps=args.steps,
        guidance_scale=args.scale,
        workers=args.workers,
    )
    print(f"rendered {len(manifest.frames)} frames -> {args.out}")
    return EXIT_OK


def _emit_score(metric: str, score: float, args) -> None:
    print(f"{metric} {score:.6f}")
    if args.out:
        write_scores_csv({args.story: {metric: round(score, 6)}}, args.out)


def cmd_eval_ta(args) -> int:
    score = text_alignment(_load_images(args.images), args.prompt, HashEmbedder())
    _emit_score("TA", score, args)
    return EXIT_OK


def cmd_eval_ia(args) -> int:
    refs = {}
    for spec in args.refs:
        if "=" not in spec:
            raise ValidationError(f"--refs needs NAME=DIR, got {spec!r}")
        name, directory = spec.split("=", 1)
        refs[name] = _load_images(directory)
    score = image_alignment(_load_images(args.images), refs, HashEmbedder())
    _emit_score("IA", score, args)
    return EXIT_OK


def cmd_eval_sheet(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    rows = export_human_eval_sheet(manifest, args.out)
    print(f"sheet with {rows} rows -> {args.out}")
    return EXIT_OK


def cmd_plugin_inspect(args) -> int:
    plugin = plugin_format.load(args.file)
    rows, cols = plugin.rows.shape
    norms = np.linalg.norm(plugin.rows, axis=1)
    print(f"name: {plugin.name}")
    print(f"class_noun: {plugin.class_noun}")
    print(f"descriptor: {plugin.descriptor_id}")
    print(f"dims: {rows}x{cols}")
    print(f"format_version: {plugin.format_version}")
    print(f"created_at: {plugin.created_at}")
    print(f"row_norms: min={norms.min():.4f} mean={norms.mean():.4f} "
          f"max={norms.max():.4f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    app = create_app(ServiceConfig(
        data_dir=Path(args.data_dir),
        backend_seed=args.backend_seed,
        workers=args.workers,
    ))
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storykit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="build a training dataset")
    p.add_argument("--chars", required=True, help="directory of RGBA character images")
    p.add_argument("--scenes", required=True, help="text file, one scene per line")
    p.add_argument("--n", type=int, required=True, help="number of augmented images")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--class-noun", required=True, dest="class_noun")
    p.add_argument("--backgrounds", type=int, default=0,
                   help="background pool size (default: n)")
    p.add_argument("--bg-steps", type=int, default=8, dest="bg_steps")
    p.add_argument("--scale-min", type=float, default=0.4)
    p.add_argument("--scale-max", type=float, default=0.7)
    _add_backend_arg(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="fine-tune the text encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--class-noun", required=True, dest="class_noun")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, default=5e-6)
    p.add_argument("--lambda", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=1, dest="batch_size")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--history", default=None, help="loss-history CSV path")
    _add_backend_arg(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="distill a checkpoint into a plugin")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--out", required=True, help="output .cgcp path")
    _add_backend_arg(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("generate", help="render a single frame")
    p.add_argument("--prompt", required=True)
    p.add_argument("--plugin", action="append", help="plugin file (repeatable)")
    p.add_argument("--layout", default=None, help="layout JSON file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--scale", type=float, default=7.5)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--diagnostics", default=None)
    _add_backend_arg(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render-story", help="render every frame of a script")
    p.add_argument("--script", required=True)
    p.add_argument("--plugins", required=True, help="plugin store directory")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--scale", type=float, default=7.5)
    p.add_argument("--workers", type=int, default=1)
    _add_backend_arg(p)
    p.set_defaults(func=cmd_render_story)

    p = sub.add_parser("eval", help="alignment scores and human-eval sheets")
    esub = p.add_subparsers(dest="eval_command", required=True)

    e = esub.add_parser("ta", help="text alignment")
    e.add_argument("--images", required=True)
    e.add_argument("--prompt", required=True)
    e.add_argument("--story", default="story", help="row label for --out")
    e.add_argument("--out", default=None, help="score CSV path")
    e.set_defaults(func=cmd_eval_ta)

    e = esub.add_parser("ia", help="image alignment")
    e.add_argument("--images", required=True)
    e.add_argument("--refs", action="append", required=True,
                   help="NAME=DIR of reference images (repeatable)")
    e.add_argument("--story", default="story", help="row label for --out")
    e.add_argument("--out", default=None, help="score CSV path")
    e.set_defaults(func=cmd_eval_ia)

    e = esub.add_parser("sheet", help="export a blank human-eval sheet")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_sheet)

    p = sub.add_parser("plugin", help="plugin file utilities")
    psub = p.add_subparsers(dest="plugin_command", required=True)
    i = psub.add_parser("inspect", help="print dims, metadata, row norms")
    i.add_argument("file")
    i.set_defaults(func=cmd_plugin_inspect)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--data-dir", required=True, dest="data_dir")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--workers", type=int, default=2)
    _add_backend_arg(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_VALIDATION
    except StorykitError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": "runtime_failure", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
