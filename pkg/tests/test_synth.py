import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpcnn.context import fit_class_boundaries
from cpcnn.density import render_density
from cpcnn.synth import (DME_CROPS, LOCAL_CROPS, SceneSpec, build_dme_dataset, build_local_dataset,
                         generate_corpus, generate_scene, read_corpus, read_pgm, substream, write_corpus,
                         write_pgm)


def corpus(n=5, seed=0, **spec):
    return generate_corpus(n, seed, SceneSpec(**spec) if spec else None)


def test_empty_scene():
    scene, img = generate_scene(SceneSpec(count_range=(0, 0), seed=3))
    assert scene.count == 0
    assert img.max() < 0.35 and img.min() >= 0.0


def test_exact_count_and_determinism():
    a = generate_scene(SceneSpec(count_range=(50, 50), seed=11))
    b = generate_scene(SceneSpec(count_range=(50, 50), seed=11))
    assert a[0].count == 50
    assert a[0].dots.tobytes() == b[0].dots.tobytes() and a[1].tobytes() == b[1].tobytes()
    c = generate_scene(SceneSpec(count_range=(50, 50), seed=12))
    assert c[1].tobytes() != a[1].tobytes()


@given(st.integers(0, 2**31 - 1), st.integers(0, 40), st.integers(0, 40), st.sampled_from([16, 24, 64]))
def test_scene_invariants(seed, a, b, size):
    lo, hi = min(a, b), max(a, b)
    scene, img = generate_scene(SceneSpec(width=size, height=size, count_range=(lo, hi), seed=seed))
    assert lo <= scene.count <= hi
    if scene.count:
        assert scene.dots.min() >= 0 and scene.dots[:, 0].max() < size and scene.dots[:, 1].max() < size
    assert img.shape == (size, size) and img.dtype == np.float32
    assert 0.0 <= img.min() and img.max() <= 1.0


@pytest.mark.parametrize("kw", [dict(count_range=(-1, 3)), dict(count_range=(5, 2)), dict(cluster_spread=0.0),
                                dict(cluster_count=0), dict(head_gain=(0.5, 0.4)), dict(width=0)])
def test_bad_spec_rejected(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


def test_zero_clusters_allowed_for_empty_scenes():
    assert generate_scene(SceneSpec(count_range=(0, 0), cluster_count=0))[0].count == 0


def test_substreams_independent_and_reproducible():
    a = substream(5, "synth").random(4)
    assert np.array_equal(a, substream(5, "synth").random(4))
    assert not np.array_equal(a, substream(5, "train").random(4))
    assert not np.array_equal(a, substream(6, "synth").random(4))


def test_dme_dataset_contract():
    _, images, maps = corpus(1)
    data = build_dme_dataset(images, maps, np.random.default_rng(0))
    assert len(data) == 300 == 3 * DME_CROPS
    assert data.inputs.shape == (300, 1, 32, 32) and data.density.shape == (300, 32, 32)
    assert data.kind == "dme" and np.all(data.source == 0)


def test_flip_preserves_count_and_noise_spares_density():
    _, images, maps = corpus(1, seed=4)
    img, dmap = images[0], maps[0]

    class Fixed:
        """Hands out the same crop corner every time so variants can be compared."""

        def integers(self, lo, hi):
            return 7

        def normal(self, mu, sigma, shape):
            return np.random.default_rng(0).normal(mu, sigma, shape)

    data = build_dme_dataset([img], [dmap], Fixed(), crops=1)
    plain, flipped, noisy = data.density
    np.testing.assert_array_equal(flipped, plain[:, ::-1])
    assert flipped.sum() == pytest.approx(plain.sum(), rel=1e-6)
    np.testing.assert_array_equal(noisy, plain)
    np.testing.assert_array_equal(data.inputs[1, 0], data.inputs[0, 0, :, ::-1])
    assert not np.array_equal(data.inputs[2], data.inputs[0])


def test_crop_alignment_against_dots():
    scenes, images, maps = corpus(3, seed=5)
    rng = np.random.default_rng(1)
    for scene, img, dmap in zip(scenes, images, maps):
        # re-render each dot as a single-dot map and check the crop count against a dot-in-patch count
        for _ in range(10):
            top, left = (int(v) for v in rng.integers(0, 33, size=2))
            crop_count = dmap[top:top + 32, left:left + 32].sum()
            inside = [(x, y) for x, y in scene.dots if left <= x < left + 32 and top <= y < top + 32]
            near_edge = [(x, y) for x, y in scene.dots
                         if left - 8 <= x < left + 40 and top - 8 <= y < top + 40
                         and not (left + 8 <= x < left + 24 and top + 8 <= y < top + 24)]
            assert abs(crop_count - len(inside)) <= len(near_edge) + 1e-3


def test_dme_dataset_small_image_rejected():
    with pytest.raises(ValueError, match="8x8"):
        build_dme_dataset([np.zeros((6, 6))], [np.zeros((6, 6))], np.random.default_rng(0))


def test_local_dataset_contract():
    _, images, maps = corpus(5, seed=6)
    data = build_local_dataset(images, maps, np.random.default_rng(0), 16)
    assert len(data) == 5 * LOCAL_CROPS == 500
    assert data.inputs.shape[1:] == (1, 16, 16)
    assert len(np.unique(data.labels)) >= 2
    np.testing.assert_array_equal(data.labels, fit_class_boundaries(data.counts).classify(data.counts))
    with pytest.raises(ValueError, match="larger"):
        build_local_dataset(images, maps, np.random.default_rng(0), 65)


def test_empty_patch_is_lowest_class():
    _, images, maps = corpus(10, seed=7)
    data = build_local_dataset(images, maps, np.random.default_rng(0), 16, crops=30)
    bounds = fit_class_boundaries(data.counts)
    assert bounds.classify([0.0])[0] == 0
    empty = data.counts < 1e-9
    if empty.any():
        assert np.all(data.labels[empty] == 0)


def test_datasets_deterministic():
    _, images, maps = corpus(2, seed=8)
    a = build_dme_dataset(images, maps, substream(1, "x"), crops=4)
    b = build_dme_dataset(images, maps, substream(1, "x"), crops=4)
    assert a.inputs.tobytes() == b.inputs.tobytes() and a.density.tobytes() == b.density.tobytes()


def test_corpus_maps_follow_scenes():
    scenes, _, maps = corpus(4, seed=9)
    for s, m in zip(scenes, maps):
        np.testing.assert_array_equal(m, render_density(s, 2.0).astype(np.float32))
        assert abs(m.sum() - s.count) < 1e-3


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((12, 20)).astype(np.float32)
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n20 12\n255\n")
    back = read_pgm(tmp_path / "a.pgm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
    write_pgm(tmp_path / "b.pgm", back)
    assert (tmp_path / "b.pgm").read_bytes() == raw


def test_pgm_errors(tmp_path):
    p = tmp_path / "x.pgm"
    for blob in [b"P2\n2 2\n255\n0 0 0 0", b"P5\n4 4\n255\n\0\0", b"P5\n4", b"P5\n2 2\n65535\n" + b"\0" * 8]:
        p.write_bytes(blob)
        with pytest.raises(ValueError):
            read_pgm(p)
    p.write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_pgm(p), [[0.0, 1.0]])


def test_corpus_round_trip(tmp_path):
    scenes, images, maps = corpus(6, seed=10)
    classes = [0, 1, 2, 3, 4, 0]
    write_corpus(tmp_path, scenes, images, maps, classes)
    manifest = (tmp_path / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "id,count,class" and len(manifest) == 7
    assert manifest[1] == f"0000,{scenes[0].count},0"
    back = read_corpus(tmp_path)
    assert back.ids == [f"{i:04d}" for i in range(6)] and back.classes == classes
    for m0, m1 in zip(maps, back.maps):
        assert m0.tobytes() == m1.tobytes()
    np.testing.assert_array_equal(back.counts, [s.count for s in scenes])
    train, test = back.split(0.5)
    assert train.ids == back.ids[:3] and test.ids == back.ids[3:]


def test_missing_corpus(tmp_path):
    with pytest.raises(FileNotFoundError, match="synth"):
        read_corpus(tmp_path)
