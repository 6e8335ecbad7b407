"""Toy generator tails and procedural textures for desk-scale experiments.

A fake image is made by box-downsampling a real image to a latent and running
it through a seeded decoder: ``depth`` stages of (3x3 conv, leaky ReLU, x2
up-sampling) followed by a final 3x3 conv to RGB. Ending every stage on the
up-sampler means the final conv always sees an up-sampled map, which is where
the neighbouring-pixel correlations come from.

Reals are seeded multi-octave value noise plus per-pixel noise, so they carry
no up-sampling correlation of their own.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .image import IMAGE_SUFFIXES, as_image, read_image, write_png
from .nn.layers import conv2d_forward_nhwc

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
KERNEL_SIZE = 3
REAL_NOISE_AMPLITUDE = 0.05
OCTAVES = 4
MIN_REAL_SIZE = 32
MANIFEST_NAME = "manifest.json"
CLASS_DIRS = ("0_real", "1_fake")


class UpsampleKind(str, enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


@dataclass(frozen=True)
class DecoderSpec:
    """Seeded description of a decoder; the seed fixes every weight."""

    seed: int
    upsample_kind: UpsampleKind = UpsampleKind.NEAREST
    depth: int = 1
    channels_hidden: int = 8
    kernel_size: int = KERNEL_SIZE

    def __post_init__(self):
        object.__setattr__(self, "upsample_kind", UpsampleKind(self.upsample_kind))
        if not 1 <= self.depth <= 3:
            raise ValueError(f"depth must be in [1, 3], got {self.depth}")
        if not 4 <= self.channels_hidden <= 16:
            raise ValueError(f"channels_hidden must be in [4, 16], got {self.channels_hidden}")
        if self.kernel_size != KERNEL_SIZE:
            raise ValueError("only 3x3 decoder kernels are supported")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def factor(self) -> int:
        return 2 ** self.depth

    def layer_shapes(self):
        """``(out, in, k, k)`` for each stage conv, then the final RGB conv."""
        k, h = self.kernel_size, self.channels_hidden
        shapes = [(h, 3, k, k)] + [(h, h, k, k)] * (self.depth - 1)
        return shapes + [(3, h, k, k)]

    @cached_property
    def weights(self) -> tuple:
        """Conv kernels, uniform in +-1/sqrt(fan_in), stored as float32."""
        rng = np.random.default_rng(self.seed)
        out = []
        for shape in self.layer_shapes():
            bound = 1.0 / np.sqrt(shape[1] * shape[2] * shape[3])
            w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            w.setflags(write=False)
            out.append(w)
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "upsample_kind": self.upsample_kind.value,
            "depth": int(self.depth),
            "channels_hidden": int(self.channels_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSpec":
        return cls(int(d["seed"]), UpsampleKind(d["upsample_kind"]), int(d["depth"]), int(d["channels_hidden"]))


def make_decoder(seed: int, upsample_kind=UpsampleKind.NEAREST, depth: int = 1,
                 channels_hidden: int = 8) -> DecoderSpec:
    return DecoderSpec(int(seed), UpsampleKind(upsample_kind), int(depth), int(channels_hidden))


# --- resampling ----------------------------------------------------------

def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = image.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by {factor}")
    tiles = image.reshape(h // factor, factor, w // factor, factor, c)
    return tiles.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _bilinear_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: output 2i blends 3/4 of x[i] with 1/4 of x[i-1], 2i+1 with x[i+1]
    n = x.shape[axis]
    prev = np.take(x, np.clip(np.arange(n) - 1, 0, n - 1), axis=axis)
    nxt = np.take(x, np.clip(np.arange(n) + 1, 0, n - 1), axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def upsample_bilinear(x: np.ndarray) -> np.ndarray:
    return _bilinear_axis(_bilinear_axis(x, 0), 1).astype(x.dtype)


def upsample(x: np.ndarray, kind: UpsampleKind) -> np.ndarray:
    if UpsampleKind(kind) is UpsampleKind.NEAREST:
        return upsample_nearest(x)
    return upsample_bilinear(x)


def _conv_same(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # reflect padding: zero padding would paint a dark frame with strong NPR
    pad = weight.shape[-1] // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    out, _ = conv2d_forward_nhwc(xp[None], weight, None, 1, 0)
    return out[0]


def _match_tone(out: np.ndarray, reference: np.ndarray) -> np.ndarray:
    # per-channel affine so the fake keeps the latent's mean and contrast;
    # the gain is measured at latent resolution so up-sampling texture does not inflate it
    out64 = out.astype(np.float64)
    ref64 = reference.astype(np.float64)
    low = box_downsample(out, out.shape[0] // reference.shape[0]).astype(np.float64)
    mu, sd = low.mean(axis=(0, 1)), low.std(axis=(0, 1))
    ref_mu, ref_sd = ref64.mean(axis=(0, 1)), ref64.std(axis=(0, 1))
    gain = np.divide(ref_sd, sd, out=np.zeros_like(sd), where=sd > 0)
    return ((out64 - mu) * gain + ref_mu).astype(np.float32)


def decode(latent: np.ndarray, decoder: DecoderSpec, weights=None) -> np.ndarray:
    """Run the decoder stack on a latent; no tone matching or clamping."""
    weights = decoder.weights if weights is None else weights
    x = np.ascontiguousarray(latent, dtype=np.float32)
    for w in weights[:-1]:
        x = _conv_same(x, w)
        x = np.where(x > 0, x, np.float32(LEAKY_SLOPE) * x)
        x = upsample(x, decoder.upsample_kind)
    return _conv_same(x, weights[-1])


def generate_fake(source, decoder: DecoderSpec, weights=None) -> np.ndarray:
    """Synthesize a fake with the same size as ``source``.

    The source is box-downsampled by ``2**depth`` and decoded back to full
    size. Each output channel is affinely matched to the mean and standard
    deviation of the matching latent channel, then clamped to [0, 1]. ``weights``
    overrides the seeded kernels (used to build hand-configured decoders).
    """
    image = as_image(source)
    if image.shape[2] != 3:
        raise ValueError(f"decoder expects a 3-channel source, got {image.shape[2]}")
    f = decoder.factor
    if image.shape[0] % f or image.shape[1] % f:
        raise ValueError(f"source {image.shape[0]}x{image.shape[1]} not divisible by {f}")
    if weights is not None:
        expected = decoder.layer_shapes()
        if [tuple(w.shape) for w in weights] != expected:
            raise ValueError(f"weights must have shapes {expected}")
    latent = box_downsample(image, f)
    out = decode(latent, decoder, weights)
    return np.clip(_match_tone(out, latent), 0.0, 1.0)


# --- procedural reals ----------------------------------------------------

def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(rng, height: int, width: int, cell: int) -> np.ndarray:
    """Lattice value noise with smoothstep interpolation, values in [0, 1]."""
    gh, gw = height // cell + 2, width // cell + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    ty, tx = _smoothstep(ys - y0)[:, None], _smoothstep(xs - x0)[None, :]
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = a + (b - a) * tx
    bottom = c + (d - c) * tx
    return top + (bottom - top) * ty


def procedural_real(seed: int, height: int, width: int) -> np.ndarray:
    """Seeded fBm texture (4 octaves, amplitude halving) with pixel noise.

    Three fBm fields are mixed into RGB with a random matrix, then uniform
    noise of amplitude 0.05 is added per pixel and the result clamped.
    """
    if height < MIN_REAL_SIZE or width < MIN_REAL_SIZE:
        raise ValueError(f"procedural reals need at least {MIN_REAL_SIZE}x{MIN_REAL_SIZE}")
    rng = np.random.default_rng(seed)
    base_cell = max(height, width)
    fields = []
    for _ in range(3):
        acc, amp, norm = np.zeros((height, width)), 1.0, 0.0
        for octave in range(OCTAVES):
            cell = max(base_cell >> octave, 1)
            acc += amp * value_noise(rng, height, width, cell)
            norm += amp
            amp *= 0.5
        fields.append(acc / norm - 0.5)
    mix = np.eye(3) * 0.6 + rng.uniform(-0.4, 0.4, (3, 3))
    img = 0.5 + rng.uniform(-0.15, 0.15, 3) + np.stack(fields, axis=-1) @ mix.T * 1.6
    img += rng.uniform(-REAL_NOISE_AMPLITUDE, REAL_NOISE_AMPLITUDE, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --- corpus --------------------------------------------------------------

@dataclass
class SourceConfig:
    """One source of the corpus: paired reals and decoder fakes."""

    name: str
    decoder: DecoderSpec
    seed: int
    count: int

    def __post_init__(self):
        if not self.name or "/" in self.name or self.name in CLASS_DIRS:
            raise ValueError(f"invalid source name {self.name!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass
class CorpusConfig:
    root: Path
    sources: list
    image_size: int = 128
    real_dir: Path | None = None
    jobs: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.real_dir is not None:
            self.real_dir = Path(self.real_dir)
        if self.image_size < MIN_REAL_SIZE:
            raise ValueError(f"image_size must be >= {MIN_REAL_SIZE}")
        names = [s.name for s in self.sources]
        if not names or len(set(names)) != len(names):
            raise ValueError("sources must be non-empty with unique names")
        for s in self.sources:
            if self.image_size % s.decoder.factor:
                raise ValueError(f"image_size {self.image_size} not divisible by {s.decoder.factor}")


def image_seed(base_seed: int, index: int) -> int:
    """Per-image seed derived from ``(base_seed, index)`` only."""
    return int(np.random.default_rng([base_seed, index]).integers(0, 2**63 - 1))


def _center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"real image {h}x{w} smaller than {size}x{size}")
    top, left = (h - size) // 2, (w - size) // 2
    crop = image[top:top + size, left:left + size]
    if crop.shape[2] == 1:
        crop = np.repeat(crop, 3, axis=2)
    return crop


def _list_images(directory: Path):
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"real-image directory {directory} contains no images")
    return files


def source_manifest(source: SourceConfig, image_size: int, real_dir) -> dict:
    return {
        "source_name": source.name,
        "seed": int(source.seed),
        "decoder": source.decoder.to_dict(),
        "count": int(source.count),
        "image_size": int(image_size),
        "real_source": "procedural" if real_dir is None else str(real_dir),
    }


def _write_pair(args):
    index, real, decoder, real_path, fake_path = args
    write_png(real_path, real)
    write_png(fake_path, generate_fake(real, decoder))
    return index


def _make_real(source: SourceConfig, index: int, size: int, real_files):
    if real_files is None:
        return procedural_real(image_seed(source.seed, index), size, size)
    return _center_crop(read_image(real_files[index % len(real_files)]), size)


def build_source(source: SourceConfig, root, image_size: int, real_dir=None, jobs: int = 1) -> dict:
    """Write ``<root>/<name>/{0_real,1_fake}/NNNNN.png`` plus a manifest."""
    base = Path(root) / source.name
    dirs = [base / d for d in CLASS_DIRS]
    for d in dirs:
        d.mkdir(parents=True, exist_ok=True)
    real_files = _list_images(Path(real_dir)) if real_dir is not None else None
    width = max(5, len(str(source.count - 1)))

    def tasks():
        for i in range(source.count):
            name = f"{i:0{width}d}.png"
            yield i, _make_real(source, i, image_size, real_files), source.decoder, dirs[0] / name, dirs[1] / name

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_write_pair, tasks()))
    else:
        for t in tasks():
            _write_pair(t)
    manifest = source_manifest(source, image_size, real_dir)
    (base / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def build_corpus(config: CorpusConfig) -> dict:
    """Generate every source and a top-level manifest; returns the manifest."""
    try:
        config.root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {config.root}: {exc}") from exc
    manifests = [
        build_source(s, config.root, config.image_size, config.real_dir, config.jobs)
        for s in config.sources
    ]
    top = {"image_size": config.image_size, "sources": manifests}
    top.update(config.extra)
    (config.root / MANIFEST_NAME).write_text(json.dumps(top, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d sources under %s", len(manifests), config.root)
    return top


def config_from_manifest(manifest: dict, root) -> CorpusConfig:
    """Rebuild the :class:`CorpusConfig` that produced ``manifest``."""
    sources, real_dirs = [], set()
    for m in manifest["sources"]:
        sources.append(SourceConfig(m["source_name"], DecoderSpec.from_dict(m["decoder"]),
                                    int(m["seed"]), int(m["count"])))
        real_dirs.add(m["real_source"])
    if len(real_dirs) != 1:
        raise ValueError("sources disagree on the real-image origin")
    real = real_dirs.pop()
    extra = {k: v for k, v in manifest.items() if k not in ("image_size", "sources")}
    return CorpusConfig(Path(root), sources, int(manifest["image_size"]),
                        None if real == "procedural" else Path(real), extra=extra)


def regenerate_corpus(manifest_path, root) -> dict:
    manifest = json.loads(Path(manifest_path).read_text())
    return build_corpus(config_from_manifest(manifest, root))


def manifest_hash(corpus_root) -> str | None:
    """SHA-256 of the corpus manifest file, or None if there is none."""
    path = Path(corpus_root) / MANIFEST_NAME
    if not path.is_file():
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()
