import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from egoeq import datasets, losses, motion, pgm, worlds
from egoeq.errors import InputError
from egoeq.worlds import CameraPose, LatentLinearWorld, TextureWorld


@pytest.fixture(scope="module")
def clean_world():
    return LatentLinearWorld.create(3, noise_sigma=0.0)


class TestLatentWorld:
    def test_identity_motion_constant_frames(self):
        world = LatentLinearWorld(np.eye(4)[:, :2] * 2, {"stay": (np.eye(2), (0.0,))}, np.ones((1, 2)), 0.0)
        ep = worlds.gen_latent_episode(world, 5, ["stay"] * 4, seed=0, label=0)
        assert np.all(ep.frames == ep.frames[0])

    def test_pseudo_inverse_is_exactly_equivariant(self, clean_world):
        for name in ("up", "right", "down", "up+right", "left+down"):
            x, gx, _ = clean_world.sample_pairs(name, 50, seed=1)
            z, zg = clean_world.oracle_features(x), clean_world.oracle_features(gx)
            np.testing.assert_allclose(zg, z @ clean_world.transform(name).T, atol=1e-10)

    def test_certificate_zero_positive_loss(self, clean_world):
        names = ["up", "right"]
        maps = losses.EquivMapSet(2, 4)
        zi, zj, idx = [], [], []
        for g, name in enumerate(names):
            x, gx, _ = clean_world.sample_pairs(name, 20, seed=g)
            zi.append(clean_world.oracle_features(x))
            zj.append(clean_world.oracle_features(gx))
            maps.matrices[g] = clean_world.transform(name)
            idx += [g] * 20
        loss, *_ = losses.equiv_loss_features(np.concatenate(zi), np.concatenate(zj), maps, np.array(idx),
                                              np.ones(40, bool), 1.0)
        assert loss < 1e-10

    def test_composition_ground_truth(self, clean_world):
        np.testing.assert_allclose(clean_world.transform("up+right"),
                                   clean_world.transform("right") @ clean_world.transform("up"))
        np.testing.assert_allclose(clean_world.transform("down") @ clean_world.transform("up"), np.eye(4), atol=1e-15)
        np.testing.assert_array_equal(clean_world.pose_step("up+left"), [10.0, -15.0])

    def test_unknown_motion(self, clean_world):
        with pytest.raises(InputError):
            clean_world.transform("sideways")

    def test_rank_checked(self):
        with pytest.raises(InputError, match="full column rank"):
            LatentLinearWorld(np.ones((5, 2)), {}, np.zeros((1, 2)))

    def test_episode_poses_accumulate(self, clean_world):
        ep = worlds.gen_latent_episode(clean_world, 4, ["up", "right", "down"], seed=0, label=1)
        assert [r.pose for r in ep.records] == [(0.0, 0.0), (10.0, 0.0), (10.0, 15.0), (0.0, 15.0)]
        np.testing.assert_allclose(ep.frames, ep.latents @ clean_world.A.T)

    def test_episode_deterministic(self):
        world = LatentLinearWorld.create(0)
        a = worlds.gen_latent_episode(world, 6, worlds.raster_script(2, 3), seed=5, label=2)
        b = worlds.gen_latent_episode(world, 6, worlds.raster_script(2, 3), seed=5, label=2)
        assert a.frames.tobytes() == b.frames.tobytes()

    def test_raster_script(self):
        assert worlds.raster_script(2, 3) == ["right", "right", "up", "left", "left"]

    def test_view_sets_match_transforms(self, clean_world):
        frames, labels = worlds.sample_view_sets(clean_world, 6, ["up", "up+right"], seed=0, start_jitter_deg=20)
        assert frames.shape == (6, 3, 64)
        assert labels.tolist() == [0, 1, 2, 3, 4, 0]
        z = clean_world.oracle_features(frames.reshape(-1, 64)).reshape(6, 3, 4)
        np.testing.assert_allclose(z[:, 2], z[:, 0] @ clean_world.transform("up+right").T, atol=1e-10)


@pytest.fixture(scope="module")
def world():
    return TextureWorld.create(0, num_classes=2)


@pytest.fixture(scope="module")
def linear():
    ds, _ = datasets.generate_dataset({"train_episodes_per_class": 1, "test_episodes_per_class": 1}, 0)
    return ds


class TestTextureWorld:
    def test_integer_shift(self, world):
        tex = world.textures[0]
        img = worlds.render(tex, CameraPose(tx=5, ty=-3), (8, 10))
        rows = (np.arange(8)[:, None] - 3) % tex.shape[0]
        cols = (np.arange(10)[None, :] + 5) % tex.shape[1]
        np.testing.assert_array_equal(img, tex[rows, cols])

    def test_full_turn(self, world):
        a = world.render(CameraPose(1.5, 2.25, 0.0, 1.3))
        b = world.render(CameraPose(1.5, 2.25, 2 * math.pi, 1.3))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_range_and_determinism(self, world):
        img = world.render(CameraPose(3.3, 7.1, 0.4, 0.8), 1)
        assert img.min() >= 0.0 and img.max() <= 1.0
        np.testing.assert_array_equal(img, world.render(CameraPose(3.3, 7.1, 0.4, 0.8), 1))

    def test_seeds_differ(self):
        a = TextureWorld.create(0).render(CameraPose())
        b = TextureWorld.create(1).render(CameraPose())
        assert np.abs(a - b).mean() > 0.05

    def test_zoom_positive(self):
        with pytest.raises(InputError):
            CameraPose(zoom=0.0)

    def test_drive_script_no_reversals(self):
        script = worlds.drive_script(200, seed=4)
        assert set(script) <= {"left", "right", "zoom"}
        assert all({a, b} != {"left", "right"} for a, b in zip(script, script[1:]))

    def test_episode(self, world):
        ep = worlds.gen_texture_episode(world, 5, ["left", "zoom", "zoom", "right"], seed=2, label=1)
        assert ep.frames.shape == (5, 1, 24, 24)
        assert [r.time_s for r in ep.records] == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_view_sets(self, world):
        frames, labels = worlds.texture_view_sets(world, 3, ["left", "left+zoom"], seed=0)
        assert frames.shape == (3, 3, 1, 24, 24)
        assert labels.tolist() == [0, 1, 0]


class TestPgm:
    def test_roundtrip(self, tmp_path, rng):
        pixels = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
        pgm.write_pgm(tmp_path / "a.pgm", pixels)
        np.testing.assert_array_equal(pgm.read_pgm(tmp_path / "a.pgm"), pixels)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")

    def test_comment_in_header(self):
        data = b"P5\n# made by hand\n2 1\n255\n\x01\x02"
        np.testing.assert_array_equal(pgm.decode_pgm(data), [[1, 2]])

    def test_truncated_pixels(self):
        with pytest.raises(InputError, match="offset"):
            pgm.decode_pgm(b"P5\n4 4\n255\n" + b"\0" * 10)

    def test_bad_magic(self):
        with pytest.raises(InputError, match="magic"):
            pgm.decode_pgm(b"P2\n1 1\n255\n0")

    def test_maxval(self):
        with pytest.raises(InputError, match="maxval"):
            pgm.decode_pgm(b"P5\n1 1\n65535\n\0\0")

    @given(h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 1000))
    def test_roundtrip_property(self, h, w, seed):
        pixels = np.random.default_rng(seed).integers(0, 256, size=(h, w), dtype=np.uint8)
        np.testing.assert_array_equal(pgm.decode_pgm(pgm.encode_pgm(pixels)), pixels)


class TestDatasets:
    def test_default_linear_has_two_atomic_motions(self, linear):
        assert set(linear.meta["atomic_steps"]) == {"up", "right"}
        assert linear.num_classes == 5
        assert len(linear) == 5 * 2 * 24

    def test_roundtrip_exact(self, tmp_path, linear):
        datasets.write_dataset(tmp_path / "d", linear)
        back = datasets.read_dataset(tmp_path / "d")
        np.testing.assert_array_equal(back.frames, datasets.quantize(linear).frames)
        np.testing.assert_array_equal(back.poses, linear.poses)
        np.testing.assert_array_equal(back.labels, linear.labels)
        np.testing.assert_array_equal(back.episodes, linear.episodes)
        assert back.splits == linear.splits
        datasets.write_dataset(tmp_path / "e", back)
        for name in ("manifest.json", "poses.csv", "labels.csv", "frames/000007.pgm"):
            assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()

    def test_three_frame_texture_roundtrip(self, tmp_path):
        world = TextureWorld.create(2, num_classes=1, window=(6, 5))
        ep = worlds.gen_texture_episode(world, 3, ["left", "zoom"], seed=0)
        ds = datasets.from_episodes([ep], ["train"], {"class_count": 1})
        datasets.write_dataset(tmp_path / "d", ds)
        back = datasets.read_dataset(tmp_path / "d")
        assert back.frames.shape == (3, 1, 6, 5)
        datasets.write_dataset(tmp_path / "e", back)
        for k in range(3):
            name = f"frames/{k:06d}.pgm"
            assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()

    def test_truncated_frame_reported(self, tmp_path, linear):
        datasets.write_dataset(tmp_path / "d", linear)
        f = tmp_path / "d" / "frames" / "000003.pgm"
        f.write_bytes(f.read_bytes()[:-5])
        with pytest.raises(InputError, match="000003.pgm: truncated pixel data at byte offset"):
            datasets.read_dataset(tmp_path / "d")

    def test_bad_labels(self, tmp_path, linear):
        datasets.write_dataset(tmp_path / "d", linear)
        (tmp_path / "d" / "labels.csv").write_text("frame_id,class\n0,1\n1\n")
        with pytest.raises(InputError, match="labels.csv:3"):
            datasets.read_dataset(tmp_path / "d")

    def test_eleven_frames_give_55_pairs(self):
        world = LatentLinearWorld.create(0)
        ep = worlds.gen_latent_episode(world, 11, ["right"] * 10, seed=0, dt=0.1)
        assert len(motion.build_pairs(ep.records, 1.0)) == 55

    def test_generation_deterministic(self):
        a, _ = datasets.generate_dataset({"kind": "texture", "train_episodes_per_class": 1,
                                          "test_episodes_per_class": 0}, 4)
        b, _ = datasets.generate_dataset({"kind": "texture", "train_episodes_per_class": 1,
                                          "test_episodes_per_class": 0}, 4)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.poses.tobytes() == b.poses.tobytes()

    def test_quantize_idempotent(self, linear):
        q = datasets.quantize(linear)
        np.testing.assert_array_equal(datasets.quantize(q).frames, q.frames)
        assert np.abs(q.frames - linear.frames).max() <= q.meta["pixel_scale"] / 2 + 1e-12
