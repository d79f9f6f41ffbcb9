"""Acceptance suite: one test per release criterion, strict tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one pass/fail line
per criterion. Everything runs on the deterministic toy backend; exact
checks are bitwise unless a tolerance is stated.
"""

from __future__ import annotations

import itertools
import json
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from conftest import (
    finite_difference,
    make_background,
    make_character_image,
    softmax_rows_oracle,
    write_character_dir,
    write_scene_file,
)
from storykit.augment import (
    BackgroundImage,
    CharacterImage,
    SceneDescriptionList,
    build_training_set,
    copy_paste,
    generate_backgrounds,
    save_dataset,
)
from storykit.backend import BackendDescriptor, REAL_BACKEND_DESCRIPTOR, encode_tokens
from storykit.evaluation import HashEmbedder, image_alignment, text_alignment
from storykit.extraction import build_token_matrix, extract_character_plugin
from storykit.inference import (
    EditSchedule,
    GenerationRequest,
    LayoutSpec,
    edit_cross_attention,
    fuse_embeddings,
    generate_frame,
    rasterize_layout,
)
from storykit.plugin import PluginStore, deserialize, serialize
from storykit.story import parse_script_dict, render_story
from storykit.toy import ToyTokenizer, create_toy_session
from storykit.training import (
    FineTuneConfig,
    loss_terms,
    regularization_loss,
    train_text_encoder,
)


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"[ACCEPTANCE] {name}: PASS")


def bare_descriptor(L: int) -> BackendDescriptor:
    return BackendDescriptor(
        backend_id="toy-v1", L=L, H=32, latent_side=8, attention_sides=[8],
        token_ids={"bos": 0, "eos": 1, "pad": 2},
    )


def test_token_matrix_structure():
    with criterion("token-matrix structure (L in {4, 6, 16, 77})"):
        for L in (4, 6, 16, 77):
            d = bare_descriptor(L)
            tok = ToyTokenizer(d)
            tm = build_token_matrix(d, "girl", tok)
            ct = tok.word_id("girl")
            assert tm.Q == L - 2
            for q in range(tm.Q):
                row = tm.rows[q]
                assert row[q] == d.bos
                assert row[q + 1] == ct
                assert row[q + 2] == d.eos
                others = [row[i] for i in range(L) if i not in (q, q + 1, q + 2)]
                assert all(v == d.pad for v in others)
                assert tm.character_column(q) == q + 1


def test_extraction_oracle():
    with criterion("extraction equals per-position brute-force oracle, 3 encoders"):
        for seed in (0, 11, 42):
            session = create_toy_session(seed=seed)
            d = session.descriptor
            plugin = extract_character_plugin(
                session, session.frozen_encoder, name="probe", class_noun="girl"
            )
            ct = session.tokenizer.word_id("girl")
            oracle_rows = []
            for p in range(1, d.L - 1):
                ids = [d.pad] * d.L
                ids[p - 1], ids[p], ids[p + 1] = d.bos, ct, d.eos
                oracle_rows.append(
                    encode_tokens(session.frozen_encoder, ids)[p].numpy()
                    .astype(np.float32)
                )
            oracle = np.stack(oracle_rows)
            assert plugin.rows.shape == (d.L - 2, d.H)
            assert np.array_equal(
                plugin.rows.view(np.uint32), oracle.view(np.uint32)
            )


def test_plugin_file_format(tmp_path):
    with criterion("plugin file: bitwise round trip, payload 4*(L-2)*H"):
        rng = np.random.default_rng(3)
        toy = create_toy_session(seed=0)
        plugin = extract_character_plugin(
            toy, toy.frozen_encoder, name="lily", class_noun="girl"
        )
        blob = serialize(plugin)
        again = deserialize(blob)
        assert serialize(again) == blob
        assert np.array_equal(plugin.rows.view(np.uint32),
                              again.rows.view(np.uint32))
        assert len(plugin.rows.tobytes()) == 4 * (toy.descriptor.L - 2) * \
            toy.descriptor.H

        d = REAL_BACKEND_DESCRIPTOR
        from storykit.plugin import CharacterPlugin

        real = CharacterPlugin(
            name="real", class_noun="girl",
            rows=rng.standard_normal((d.plugin_rows, d.H)).astype(np.float32),
            descriptor_id=d.backend_id,
        )
        payload = 4 * d.plugin_rows * d.H
        assert payload == 307_200
        path = tmp_path / "real.cgcp"
        path.write_bytes(serialize(real))
        header = len(serialize(real)) - payload
        assert path.stat().st_size == payload + header
        assert np.array_equal(deserialize(path.read_bytes()).rows, real.rows)


def test_loss_suite():
    with criterion("loss suite: reg identity, total-loss identity, gradcheck"):
        session = create_toy_session(seed=0)

        # L_reg of two identical encoders is exactly zero
        finetuned = session.frozen_encoder.clone(kind="finetuned")
        assert regularization_loss(finetuned, session.frozen_encoder, "girl",
                                   session.tokenizer) == 0.0

        # L_total = L_sub + lambda * L_reg to 1e-6 relative, along a real run
        dataset_images = [make_character_image(24, seed=i) for i in range(3)]
        from storykit.augment import TrainingDataset

        dataset = TrainingDataset(
            character_images=[CharacterImage(pixels=img)
                              for img in dataset_images],
            augmented_images=[], label="girl",
        )
        cfg = FineTuneConfig(steps=25, learning_rate=1e-3, lambda_reg=0.37, seed=2)
        result = train_text_encoder(dataset, cfg, session)
        for _, l_sub, l_reg, l_total in result.history:
            assert l_total == pytest.approx(l_sub + cfg.lambda_reg * l_reg,
                                            rel=1e-6)

        # analytic vs central finite differences: 32 coordinates x 3 configs
        noun_ids = session.tokenize("girl").ids
        latent = session.encode_image(dataset_images[0])
        rng = np.random.default_rng(23)
        for lam, noise_seed, t in ((0.0, 1, 819), (0.1, 2, 411), (2.0, 3, 77)):
            noise = torch.randn(
                latent.shape, generator=torch.Generator().manual_seed(noise_seed),
                dtype=torch.float64,
            )

            def loss_fn(params):
                l_sub, l_reg = loss_terms(
                    params, session.frozen_encoder.parameters, session,
                    latent, noun_ids, 1, t, noise,
                )
                return l_sub + lam * l_reg

            params = {k: v.detach().clone().requires_grad_(True)
                      for k, v in session.frozen_encoder.parameters.items()}
            loss_fn(params).backward()
            used_rows = sorted(set(noun_ids))
            for _ in range(32):
                name = list(params)[int(rng.integers(len(params)))]
                p = params[name]
                if name == "tok_emb":
                    index = (used_rows[int(rng.integers(len(used_rows)))],
                             int(rng.integers(p.shape[1])))
                else:
                    index = tuple(int(rng.integers(s)) for s in p.shape)
                analytic = float(p.grad[index])
                fd = finite_difference(loss_fn, params, name, index)
                denom = max(abs(analytic), abs(fd), 1e-8)
                assert abs(analytic - fd) / denom <= 1e-4, \
                    (lam, name, index, analytic, fd)


def test_dataset_cardinality(tmp_path):
    with criterion("dataset cardinality q = m + n, incl. (40, 300) -> 340"):
        backgrounds = [
            BackgroundImage(pixels=make_background(64, seed=i), scene_index=0,
                            seed=i)
            for i in range(4)
        ]
        rng = np.random.default_rng(9)
        cases = [(40, 300)] + [(int(rng.integers(1, 7)), int(rng.integers(0, 40)))
                               for _ in range(6)]
        for m, n in cases:
            char_dir = write_character_dir(tmp_path / f"m{m}n{n}", count=m, size=12)
            dataset = build_training_set(char_dir, backgrounds, n=n,
                                         class_noun="girl", seed=1)
            assert len(dataset) == m + n, (m, n)
        assert 40 + 300 == 340


def test_copy_paste_criterion():
    with criterion("copy-paste: alpha=0 pixels untouched, centroid within 1 px"):
        rng = np.random.default_rng(31)
        for trial in range(6):
            size = int(rng.integers(16, 33))
            rgba = make_character_image(size, seed=trial)
            # carve a transparent border so alpha=0 regions exist in the patch
            rgba[:, :, 3] = 0
            core = max(4, size // 2)
            rgba[2:2 + core, 2:2 + core, 3] = 255
            character = CharacterImage(pixels=rgba)
            bg_side = int(rng.integers(56, 72))
            background = make_background(bg_side, seed=100 + trial)
            aug = copy_paste(character, background, scale_range=(1.0, 1.0),
                             seed=trial)

            # where the pasted character's alpha is 0 the background survives
            # pixel-exactly; the fully opaque core is copied verbatim
            top, left = (bg_side - core) // 2, (bg_side - core) // 2
            opaque = np.zeros((bg_side, bg_side), dtype=bool)
            opaque[top:top + core, left:left + core] = True
            assert np.array_equal(aug.pixels[~opaque], background[~opaque])
            assert np.array_equal(
                aug.pixels[opaque].reshape(core, core, 3),
                rgba[2:2 + core, 2:2 + core, :3],
            )
            # centroid of the pasted content's bounding box hits the centre
            diff = np.any(aug.pixels != background, axis=2)
            ys, xs = np.nonzero(diff)
            assert len(ys) > 0
            cy = (ys.min() + ys.max() + 1) / 2.0
            cx = (xs.min() + xs.max() + 1) / 2.0
            assert abs(cy - bg_side / 2.0) <= 1.0
            assert abs(cx - bg_side / 2.0) <= 1.0


def test_fusion_criterion():
    with criterion("fusion: locality, permutation invariance, empty identity"):
        session = create_toy_session(seed=0)
        plugins = [
            extract_character_plugin(session, session.frozen_encoder,
                                     name=name, class_noun=noun)
            for name, noun in (("lily", "girl"), ("tom", "boy"), ("rex", "dog"))
        ]
        tt = session.tokenize("a boy and a girl and a dog")
        eb = session.encode_tokens(tt.ids)

        assert torch.equal(fuse_embeddings(eb, tt.ids, [], session.tokenizer), eb)

        noun_ids = {session.tokenizer.word_id(n) for n in ("girl", "boy", "dog")}
        char_positions = {i for i, tok in enumerate(tt.ids) if tok in noun_ids}
        reference = None
        for perm in itertools.permutations(plugins):
            fused = fuse_embeddings(eb, tt.ids, list(perm), session.tokenizer)
            for i in range(session.descriptor.L):
                if i not in char_positions:
                    assert torch.equal(fused[i], eb[i])
            if reference is None:
                reference = fused
            else:
                assert torch.equal(fused, reference)


def test_layout_editing_criterion():
    with criterion("layout editing: xi=0 no-op, saturation, raster oracle"):
        gen = torch.Generator().manual_seed(5)
        cam = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        layout = LayoutSpec(boxes={"c": (0.25, 0.25, 0.75, 0.75)})
        bias = rasterize_layout(layout, "c", 8)
        assert edit_cross_attention(cam, bias, 0.0) is cam

        edited = edit_cross_attention(torch.zeros(8, 8, dtype=torch.float64),
                                      bias, 1.0)
        probs = softmax_rows_oracle(edited.reshape(1, -1).numpy())[0]
        outside = (bias <= 0).reshape(-1).numpy()
        assert probs[outside].sum() < 1e-6

        rng = np.random.default_rng(77)
        for _ in range(20):
            x0, y0 = rng.uniform(0, 0.9, 2)
            x1 = min(1.0, x0 + rng.uniform(0.05, 1.0))
            y1 = min(1.0, y0 + rng.uniform(0.05, 1.0))
            box_layout = LayoutSpec(boxes={"c": (x0, y0, x1, y1)})
            for side in (8, 16, 32):
                grid = rasterize_layout(box_layout, "c", side).numpy()
                count = 0
                for i in range(side):
                    for j in range(side):
                        cx, cy = (j + 0.5) / side, (i + 0.5) / side
                        inside = (x0 <= cx < x1) and (y0 <= cy < y1)
                        count += inside
                        expected = box_layout.positive_value if inside \
                            else box_layout.negative_value
                        assert grid[i, j] == expected
                assert int((grid > 0).sum()) == count


def test_layout_steering_criterion():
    with criterion("layout steering beats no-editing for >= 9/10 seeds"):
        session = create_toy_session(seed=0)
        lily = extract_character_plugin(session, session.frozen_encoder,
                                        name="lily", class_noun="girl")
        tom = extract_character_plugin(session, session.frozen_encoder,
                                       name="tom", class_noun="boy")
        layout = LayoutSpec(boxes={"tom": (0.0, 0.0, 0.5, 1.0),
                                   "lily": (0.5, 0.0, 1.0, 1.0)})
        schedule_on = EditSchedule("constant_window", active_fraction=1.0,
                                   base_scale=1.0)
        schedule_off = EditSchedule(base_scale=0.0)
        wins = 0
        for seed in range(10):
            request = GenerationRequest(
                prompt="a boy and a girl", plugins=[tom, lily], layout=layout,
                seed=seed, steps=8, guidance_scale=7.5,
            )
            edited = generate_frame(request, session, schedule_on)
            plain = generate_frame(request, session, schedule_off)
            wins += all(
                edited.diagnostics["characters"][n]["attention_mass"][-1] >
                plain.diagnostics["characters"][n]["attention_mass"][-1]
                for n in ("lily", "tom")
            )
        assert wins >= 9, wins


def test_vanilla_reduction_criterion():
    with criterion("vanilla reduction: no plugins + no boxes == plain sampler"):
        session = create_toy_session(seed=0)
        for seed in (1, 2, 3):
            request = GenerationRequest(prompt="a quiet village at dusk",
                                        plugins=[], layout=LayoutSpec(),
                                        seed=seed, steps=8, guidance_scale=7.5)
            framed = generate_frame(request, session)
            plain = session.sample("a quiet village at dusk", steps=8,
                                   guidance_scale=7.5, seed=seed)
            assert np.array_equal(framed.image, plain)


def _run_pipeline(root, backend_seed=0):
    session = create_toy_session(seed=backend_seed)
    char_dir = write_character_dir(root, count=3, size=24)
    scenes = SceneDescriptionList.from_file(write_scene_file(root))
    backgrounds = generate_backgrounds(scenes, session, count=10, seed=3, steps=3)
    dataset = build_training_set(char_dir, backgrounds, n=10,
                                 class_noun="girl", seed=3)
    assert len(dataset) == 13
    save_dataset(dataset, root / "dataset")

    cfg = FineTuneConfig(steps=2000, learning_rate=1e-3, lambda_reg=0.01, seed=1)
    trained = train_text_encoder(dataset, cfg, session)

    plugin = extract_character_plugin(session, trained.encoder,
                                      name="lily", class_noun="girl")
    store = PluginStore(root / "plugins")
    store.add(plugin)

    script = parse_script_dict({
        "schema_version": 1,
        "title": "toy story",
        "frames": [
            {"id": "f1", "prompt": "a girl in a park", "characters": ["lily"],
             "layout": {"boxes": {"lily": [0.0, 0.0, 0.5, 1.0]}}, "seed": 11},
            {"id": "f2", "prompt": "a girl by a lake", "characters": ["lily"],
             "layout": {"boxes": {"lily": [0.25, 0.25, 0.75, 0.75]}}, "seed": 12},
            {"id": "f3", "prompt": "a girl under a tree", "characters": ["lily"],
             "layout": {"boxes": {"lily": [0.5, 0.0, 1.0, 1.0]}}, "seed": 13},
        ],
    })
    manifest = render_story(script, store,
                            lambda: create_toy_session(seed=backend_seed),
                            root / "story", steps=12, guidance_scale=7.5)
    return manifest


def test_end_to_end_pipeline(tmp_path):
    with criterion("end-to-end toy pipeline, deterministic rerun"):
        first = _run_pipeline(tmp_path / "run1")
        second = _run_pipeline(tmp_path / "run2")
        assert len(first.frames) == 3
        for a, b in zip(first.frames, second.frames):
            assert a["request_hash"] == b["request_hash"]
            assert a["image_sha256"] == b["image_sha256"]
        manifest_a = (tmp_path / "run1/story/manifest.json").read_bytes()
        manifest_b = (tmp_path / "run2/story/manifest.json").read_bytes()
        assert manifest_a == manifest_b
        for frame in first.frames:
            assert (tmp_path / "run1/story" / frame["image_path"]).exists()


def test_evaluation_metrics_criterion():
    with criterion("evaluation metrics: exact fixtures and nested-mean oracle"):
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0])
        img = np.zeros((4, 4, 3), dtype=np.uint8)

        class Fixed:
            def __init__(self, vecs):
                self.vecs = list(vecs)
                self.i = 0

            def embed_text(self, text):
                return e1

            def embed_image(self, image):
                v = self.vecs[self.i % len(self.vecs)]
                self.i += 1
                return v

        assert abs(text_alignment([img], "p", Fixed([e1])) - 1.0) <= 1e-9
        assert abs(text_alignment([img], "p", Fixed([e2])) - 0.0) <= 1e-9
        assert abs(text_alignment([img, img], "p", Fixed([e1, e2])) - 0.5) <= 1e-9

        assert abs(image_alignment([img], {"a": [img]}, Fixed([e1, e1])) - 1.0) \
            <= 1e-9

        embedder = HashEmbedder(dim=48)
        rng = np.random.default_rng(13)
        images = [rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
                  for _ in range(3)]
        refs = {
            "a": [rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
                  for _ in range(2)],
            "b": [rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)],
        }
        score = image_alignment(images, refs, embedder)
        per_char = []
        for name in refs:
            sims = [float(embedder.embed_image(r) @ embedder.embed_image(g))
                    for r in refs[name] for g in images]
            per_char.append(float(np.mean(sims)))
        assert score == pytest.approx(float(np.mean(per_char)), abs=1e-12)
