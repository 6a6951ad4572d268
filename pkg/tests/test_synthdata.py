import numpy as np
import pytest

from albumgen import synthdata as S
from albumgen.rng import make_rng


def random_spec(rng, identity_id=None, bg_id=None) -> S.SceneSpec:
    return S.SceneSpec(
        identity_id=int(rng.integers(0, 2**31)) if identity_id is None else identity_id,
        pos=(int(rng.integers(0, 4)), int(rng.integers(0, 4))),
        scale=S.SCALES[int(rng.integers(0, 3))],
        rot=S.ROTS[int(rng.integers(0, 4))],
        flip=bool(rng.integers(0, 2)),
        bg_id=int(rng.integers(0, 2**31)) if bg_id is None else bg_id,
    )


class TestRender:
    def test_purity(self):
        rng = make_rng(1)
        spec = random_spec(rng)
        a = S.render(spec).numpy()
        b = S.render(spec).numpy()
        assert a.tobytes() == b.tobytes()

    def test_value_range_and_shape(self):
        spec = random_spec(make_rng(2))
        img = S.render(spec, (32, 32)).numpy()
        assert img.shape == (3, 32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_flip_mirrors_sprite_region(self):
        from dataclasses import replace
        rng = make_rng(3)
        base = random_spec(rng)
        spec_a = replace(base, flip=False)
        spec_b = replace(base, flip=True)
        cell = 8
        side = S.scale_pixels(base.scale, cell)
        x0 = base.pos[0] * cell + (cell - side) // 2
        y0 = base.pos[1] * cell + (cell - side) // 2
        a = S.render(spec_a).numpy()[:, y0:y0 + side, x0:x0 + side]
        b = S.render(spec_b).numpy()[:, y0:y0 + side, x0:x0 + side]
        np.testing.assert_array_equal(b, a[:, :, ::-1])

    def test_centroid_in_expected_cell_block(self):
        spec = S.SceneSpec(identity_id=99, pos=(1, 2), scale="large", rot=0,
                           flip=False, bg_id=5)
        img = S.render(spec, (32, 32)).numpy()
        palette = S.identity_palette(99)
        dist = np.sqrt(((img[None] - palette[:, :, None, None]) ** 2).sum(axis=1))
        ys, xs = np.nonzero(dist.min(axis=0) < S.PALETTE_TOL)
        assert 8 <= xs.mean() < 16   # x cell 1
        assert 16 <= ys.mean() < 24  # y cell 2

    def test_small_size_rejected(self):
        with pytest.raises(ValueError):
            S.render(random_spec(make_rng(4)), (8, 8))

    def test_palette_exact_on_sprite_pixels(self):
        # every sprite pixel is exactly a palette color, all 3 colors present
        rng = make_rng(5)
        for _ in range(20):
            spec = random_spec(rng)
            img = S.render(spec).numpy()
            palette = S.identity_palette(spec.identity_id)
            d = np.sqrt(((img[None] - palette[:, :, None, None]) ** 2).sum(axis=1))
            hit = d.min(axis=0) < 1e-6
            per_color = [(d[c] < 1e-6).sum() for c in range(3)]
            assert hit.sum() >= 4
            assert all(n > 0 for n in per_color)


class TestGrammar:
    def test_no_delta_empty(self):
        spec = random_spec(make_rng(6))
        assert S.describe_delta(spec, spec) == ""

    def test_flip_only(self):
        rng = make_rng(7)
        a = random_spec(rng)
        from dataclasses import replace
        b = replace(a, flip=not a.flip)
        assert S.describe_delta(a, b) == "mirror subject"

    def test_four_axis_canonical_order(self):
        a = S.SceneSpec(identity_id=1, pos=(0, 0), scale="small", rot=0,
                        flip=False, bg_id=1)
        b = S.SceneSpec(identity_id=1, pos=(3, 1), scale="large", rot=90,
                        flip=True, bg_id=1)
        text = S.describe_delta(a, b)
        assert text == ("zoom in to large , rotate subject 90 , "
                        "move subject to cell 3 1 , mirror subject")

    def test_identity_mismatch(self):
        rng = make_rng(8)
        with pytest.raises(ValueError):
            S.describe_delta(random_spec(rng, identity_id=1),
                             random_spec(rng, identity_id=2))

    def test_empty_instruction_is_identity(self):
        spec = random_spec(make_rng(9))
        assert S.parse_instruction("").apply(spec) == spec

    def test_rotation_outside_grammar(self):
        with pytest.raises(S.InstructionParseError):
            S.parse_instruction("rotate subject 45")

    def test_gibberish_rejected(self):
        with pytest.raises(S.InstructionParseError):
            S.parse_instruction("paint the town red")

    def test_roundtrip_1000_random_pairs(self):
        rng = make_rng(10)
        for _ in range(1000):
            ident = int(rng.integers(0, 2**31))
            bg = int(rng.integers(0, 2**31))
            a = random_spec(rng, identity_id=ident, bg_id=bg)
            b = random_spec(rng, identity_id=ident, bg_id=bg)
            delta = S.parse_instruction(S.describe_delta(a, b))
            assert delta.apply(a) == b

    def test_render_roundtrip_byte_exact(self):
        rng = make_rng(11)
        for _ in range(50):
            ident = int(rng.integers(0, 2**31))
            bg = int(rng.integers(0, 2**31))
            a = random_spec(rng, identity_id=ident, bg_id=bg)
            b = random_spec(rng, identity_id=ident, bg_id=bg)
            c = S.parse_instruction(S.describe_delta(a, b)).apply(a)
            assert S.render(c).numpy().tobytes() == S.render(b).numpy().tobytes()

    def test_scene_caption_roundtrip(self):
        rng = make_rng(12)
        for _ in range(100):
            spec = random_spec(rng)
            axes = S.parse_scene_caption(S.scene_caption(spec))
            assert axes == {"pos": spec.pos, "scale": spec.scale,
                            "rot": spec.rot, "flip": spec.flip}

    def test_requested_axes(self):
        d = S.parse_instruction("zoom out to small , mirror subject")
        assert d.requested_axes() == ("scale", "flip")


class TestVerify:
    def test_render_verify_sweep_500(self):
        rng = make_rng(13)
        for _ in range(500):
            spec = random_spec(rng)
            ok, report = S.verify_following(S.render(spec), spec, tol=1)
            assert ok, (spec, report)

    def test_wrong_position_flagged(self):
        rng = make_rng(14)
        spec = random_spec(rng)
        from dataclasses import replace
        moved = replace(spec, pos=((spec.pos[0] + 2) % 4, spec.pos[1]))
        ok, report = S.verify_following(S.render(spec), moved, tol=1)
        assert not ok
        assert not report.pos_ok

    def test_blank_image_undetected(self):
        spec = random_spec(make_rng(15))
        blank = np.zeros((3, 32, 32), dtype=np.float32)
        ok, report = S.verify_following(blank, spec)
        assert not ok
        assert not report.detected

    def test_wrong_rotation_flagged(self):
        rng = make_rng(16)
        spec = random_spec(rng)
        from dataclasses import replace
        rolled = replace(spec, rot=(spec.rot + 180) % 360)
        ok, report = S.verify_following(S.render(spec), rolled, tol=1)
        assert not report.rot_ok

    def test_wrong_scale_flagged(self):
        rng = make_rng(17)
        from dataclasses import replace
        spec = replace(random_spec(rng), scale="small")
        big = replace(spec, scale="large")
        ok, report = S.verify_following(S.render(spec), big, tol=1)
        assert not report.scale_ok


class TestCorpus:
    def test_counts(self):
        cols = S.build_synthetic_corpus(50, 4, seed=1)
        assert len(cols) == 50
        assert all(len(c.specs) == 4 for c in cols)

    def test_determinism(self):
        a = S.build_synthetic_corpus(20, 3, seed=9)
        b = S.build_synthetic_corpus(20, 3, seed=9)
        assert a == b
        c = S.build_synthetic_corpus(20, 3, seed=10)
        assert a != c

    def test_unique_identities_and_shared_background(self):
        cols = S.build_synthetic_corpus(100, 4, seed=2)
        idents = [c.identity_id for c in cols]
        assert len(set(idents)) == len(idents)
        for c in cols:
            assert all(s.identity_id == c.identity_id for s in c.specs)
            assert all(s.bg_id == c.bg_id for s in c.specs)

    def test_jsonl_roundtrip(self, tmp_path):
        cols = S.build_synthetic_corpus(10, 4, seed=3)
        path = tmp_path / "corpus.jsonl"
        S.save_corpus(cols, path)
        assert S.load_corpus(path) == cols

    def test_png_export(self, tmp_path):
        from PIL import Image
        spec = random_spec(make_rng(18))
        path = tmp_path / "scene.png"
        S.export_png(S.render(spec), path)
        assert Image.open(path).size == (32, 32)
