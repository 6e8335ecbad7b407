import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nprdetect.image import read_image, write_png
from nprdetect.npr import GridSpec, extract_npr
from nprdetect.synthgen import (
    CorpusConfig,
    DecoderSpec,
    SourceConfig,
    UpsampleKind,
    box_downsample,
    build_corpus,
    generate_fake,
    image_seed,
    make_decoder,
    manifest_hash,
    procedural_real,
    regenerate_corpus,
    upsample_bilinear,
    upsample_nearest,
)

# Mean |NPR| (l=2, index 1) over 200 pairs: reals procedural_real(image_seed(2024, i), 64, 64),
# fakes from make_decoder(i, nearest, depth=1 + i % 3, hidden=4 + i % 13). Measured once, frozen.
REAL_NPR_BASELINE = 0.025329535650683698
FAKE_NPR_BASELINE = 0.021172754697522805


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --- decoder -------------------------------------------------------------

def test_decoder_is_deterministic():
    a = make_decoder(7, "nearest", 1, 8)
    b = make_decoder(7, "nearest", 1, 8)
    assert [w.tobytes() for w in a.weights] == [w.tobytes() for w in b.weights]


def test_decoder_seed_changes_weights():
    a = make_decoder(7, "nearest", 1, 8)
    b = make_decoder(8, "nearest", 1, 8)
    assert all(x.tobytes() != y.tobytes() for x, y in zip(a.weights, b.weights))


@pytest.mark.parametrize("depth,hidden", [(1, 4), (2, 8), (3, 16)])
def test_decoder_weight_bound(depth, hidden):
    spec = make_decoder(3, "bilinear", depth, hidden)
    assert len(spec.weights) == depth + 1
    for w in spec.weights:
        bound = np.float32(1.0 / np.sqrt(w.shape[1] * w.shape[2] * w.shape[3]))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound


@pytest.mark.parametrize("bad", [dict(depth=0), dict(depth=4), dict(channels_hidden=3),
                                 dict(channels_hidden=17), dict(upsample_kind="cubic")])
def test_decoder_rejects(bad):
    args = dict(seed=1, upsample_kind="nearest", depth=1, channels_hidden=8)
    args.update(bad)
    with pytest.raises(ValueError):
        make_decoder(**args)


def test_decoder_dict_roundtrip():
    spec = make_decoder(11, "bilinear", 2, 12)
    assert DecoderSpec.from_dict(spec.to_dict()) == spec


# --- resampling ----------------------------------------------------------

def test_bilinear_upsample_weights():
    x = np.array([[0.0, 4.0]], np.float32)[:, :, None]
    up = upsample_bilinear(x)[:, :, 0]
    np.testing.assert_allclose(up[0], [0.0, 1.0, 3.0, 4.0])
    np.testing.assert_allclose(up[0], up[1])


def test_box_downsample_inverts_nearest():
    x = np.random.default_rng(0).random((4, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(box_downsample(upsample_nearest(x), 2), x)


# --- fakes ---------------------------------------------------------------

@pytest.mark.parametrize("kind", list(UpsampleKind))
@pytest.mark.parametrize("depth", [1, 2, 3])
def test_fake_preserves_shape(kind, depth):
    src = procedural_real(1, 32, 48)
    out = generate_fake(src, make_decoder(2, kind, depth, 6))
    assert out.shape == src.shape and out.dtype == np.float32
    assert out.min() >= 0 and out.max() <= 1


def test_fake_rejects_indivisible_and_gray():
    with pytest.raises(ValueError):
        generate_fake(np.zeros((36, 36, 3)), make_decoder(1, "nearest", 3, 4))
    with pytest.raises(ValueError):
        generate_fake(np.zeros((32, 32, 1)), make_decoder(1, "nearest", 1, 4))


def _delta_weights(spec, stage_delta=True):
    # stage convs copy input channel c into hidden channel c; final conv reads hidden 0..2
    weights = [w.copy() for w in spec.weights]
    if stage_delta:
        for w in weights[:-1]:
            w[...] = 0
            for c in range(min(w.shape[0], w.shape[1])):
                w[c, c, 1, 1] = 1
    final = np.zeros_like(weights[-1])
    for c in range(3):
        final[c, c, 1, 1] = 1
    weights[-1] = final
    return weights


def test_identity_decoder_reproduces_constant():
    spec = make_decoder(5, "nearest", 1, 8)
    src = np.full((16, 16, 3), 0.375, np.float32)
    out = generate_fake(src, spec, _delta_weights(spec))
    np.testing.assert_array_equal(out, src)
    assert np.all(extract_npr(out).data == 0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_nearest_delta_final_kernel_gives_zero_npr(seed):
    spec = make_decoder(seed, "nearest", 1, 8)
    src = procedural_real(seed, 64, 64)
    out = generate_fake(src, spec, _delta_weights(spec, stage_delta=False))
    assert np.all(extract_npr(out, GridSpec(2, 1)).data == 0)


def test_bilinear_delta_final_kernel_is_not_zero():
    spec = make_decoder(0, "bilinear", 1, 8)
    out = generate_fake(procedural_real(0, 64, 64), spec, _delta_weights(spec, stage_delta=False))
    assert np.abs(extract_npr(out).data).max() > 0


def test_fake_is_deterministic():
    src = procedural_real(4, 64, 64)
    spec = make_decoder(9, "bilinear", 2, 10)
    assert generate_fake(src, spec).tobytes() == generate_fake(src, spec).tobytes()


# --- reals ---------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), h=st.integers(32, 80), w=st.integers(32, 80))
def test_procedural_real_range_and_determinism(seed, h, w):
    a = procedural_real(seed, h, w)
    assert a.shape == (h, w, 3) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    assert a.tobytes() == procedural_real(seed, h, w).tobytes()


def test_procedural_real_seed_sensitivity_and_size_check():
    assert not np.array_equal(procedural_real(1, 32, 32), procedural_real(2, 32, 32))
    with pytest.raises(ValueError):
        procedural_real(1, 31, 64)


def test_reals_have_more_npr_energy_than_nearest_fakes():
    reals, fakes = [], []
    for i in range(200):
        real = procedural_real(image_seed(2024, i), 64, 64)
        fake = generate_fake(real, make_decoder(i, "nearest", 1 + i % 3, 4 + i % 13))
        reals.append(np.abs(extract_npr(real).data).mean(dtype=np.float64))
        fakes.append(np.abs(extract_npr(fake).data).mean(dtype=np.float64))
    real_mean, fake_mean = np.mean(reals), np.mean(fakes)
    assert fake_mean < real_mean
    assert real_mean == pytest.approx(REAL_NPR_BASELINE, rel=1e-6)
    assert fake_mean == pytest.approx(FAKE_NPR_BASELINE, rel=1e-6)


# --- corpus --------------------------------------------------------------

def _config(root, count=5, size=32, sources=None, real_dir=None):
    sources = sources or [SourceConfig("nearest", make_decoder(1, "nearest", 1, 4), 10, count)]
    return CorpusConfig(root, sources, size, real_dir)


def test_corpus_counts_and_manifest(tmp_path):
    top = build_corpus(_config(tmp_path, count=100))
    pngs = sorted(tmp_path.rglob("*.png"))
    assert len(pngs) == 200
    assert len(list((tmp_path / "nearest" / "0_real").glob("*.png"))) == 100
    manifest = json.loads((tmp_path / "nearest" / "manifest.json").read_text())
    assert manifest == {
        "source_name": "nearest", "seed": 10, "count": 100, "image_size": 32,
        "decoder": {"seed": 1, "upsample_kind": "nearest", "depth": 1, "channels_hidden": 4},
        "real_source": "procedural",
    }
    assert top["sources"] == [manifest]
    assert read_image(pngs[0]).shape == (32, 32, 3)


def test_corpus_regenerates_byte_identical(tmp_path):
    build_corpus(_config(tmp_path / "a", count=4))
    regenerate_corpus(tmp_path / "a" / "manifest.json", tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b") is not None


def test_corpus_jobs_do_not_change_output(tmp_path):
    build_corpus(_config(tmp_path / "a", count=6))
    cfg = _config(tmp_path / "b", count=6)
    cfg.jobs = 3
    build_corpus(cfg)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_different_decoder_seeds_give_disjoint_fakes(tmp_path):
    sources = [SourceConfig("a", make_decoder(1, "nearest", 1, 4), 10, 6),
               SourceConfig("b", make_decoder(2, "nearest", 1, 4), 10, 6)]
    build_corpus(_config(tmp_path, sources=sources))
    fa = {p.read_bytes() for p in (tmp_path / "a" / "1_fake").iterdir()}
    fb = {p.read_bytes() for p in (tmp_path / "b" / "1_fake").iterdir()}
    assert len(fa) == 6 and not fa & fb


def test_corpus_from_real_directory(tmp_path):
    reals = tmp_path / "reals"
    reals.mkdir()
    for i in range(3):
        write_png(reals / f"{i}.png", procedural_real(i, 40, 48))
    build_corpus(_config(tmp_path / "out", count=4, real_dir=reals))
    out = sorted((tmp_path / "out" / "nearest" / "0_real").iterdir())
    assert len(out) == 4
    # sources are cycled in sorted order and center-cropped
    np.testing.assert_array_equal(read_image(out[3]), read_image(out[0]))
    manifest = json.loads((tmp_path / "out" / "nearest" / "manifest.json").read_text())
    assert manifest["real_source"] == str(reals)


def test_corpus_rejects_empty_real_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError, match="no images"):
        build_corpus(_config(tmp_path / "out", real_dir=tmp_path / "empty"))


def test_corpus_rejects_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        build_corpus(_config(blocker / "corpus"))


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        CorpusConfig(tmp_path, [SourceConfig("a", make_decoder(1, "nearest", 3, 4), 1, 1)], 36)
    with pytest.raises(ValueError):
        SourceConfig("0_real", make_decoder(1), 1, 1)
