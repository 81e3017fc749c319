"""Datasets: CSV manifests, per-domain normalization, batch streams and
synthetic two-style road scenes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import DOMAINS, SOURCE, TARGET

IMAGE_HEIGHT = 80
IMAGE_WIDTH = 160

SEPARATE = "separate"
SHUFFLED = "shuffled"


@dataclass(frozen=True)
class NormalizationStats:
    """Global (all-channel) pixel mean/std per domain."""

    mean: dict
    std: dict

    def __post_init__(self):
        for d, s in self.std.items():
            if not s > 0:
                raise ValueError(f"std for {d} must be > 0, got {s}")

    def normalize(self, pixels: np.ndarray, domain: str) -> np.ndarray:
        return ((np.asarray(pixels, dtype=np.float64) - self.mean[domain]) / self.std[domain]).astype(np.float32)

    def denormalize(self, values, domain: str) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std[domain] + self.mean[domain]

    def to_text(self) -> str:
        return "".join(f"{d} mean={self.mean[d]!r} std={self.std[d]!r}\n" for d in DOMAINS if d in self.mean)

    @classmethod
    def from_text(cls, text: str) -> "NormalizationStats":
        mean, std = {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            domain, *kvs = line.split()
            kv = dict(item.split("=", 1) for item in kvs)
            mean[domain], std[domain] = float(kv["mean"]), float(kv["std"])
        return cls(mean, std)


# values measured on the Udacity (source) and comma.ai (target) training sets
DRIVING_STATS = NormalizationStats(mean={SOURCE: 128.0, TARGET: 70.0}, std={SOURCE: 47.0, TARGET: 44.6})


def compute_stats(pixels_by_domain: dict) -> NormalizationStats:
    mean, std = {}, {}
    for domain, pixels in pixels_by_domain.items():
        arr = np.asarray(pixels, dtype=np.float64)
        mean[domain], std[domain] = float(arr.mean()), float(arr.std())
    return NormalizationStats(mean, std)


@dataclass
class SampleRecord:
    image: np.ndarray  # (3, H, W) float32, normalized
    steering: Optional[float]
    domain: str
    id: str
    eval_only: bool = False

    @property
    def trainable_label(self) -> Optional[float]:
        return None if self.eval_only else self.steering


@dataclass
class DatasetManifest:
    domain: str
    records: list[SampleRecord]
    stats: NormalizationStats
    _images: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = np.stack([r.image for r in self.records]).astype(np.float32)
        return self._images

    def labels(self) -> np.ndarray:
        """Steering labels including evaluation-only ones; NaN where absent."""
        return np.array([np.nan if r.steering is None else r.steering for r in self.records], dtype=np.float32)

    @property
    def fully_labeled(self) -> bool:
        return all(r.steering is not None for r in self.records)

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(self.domain, [self.records[i] for i in indices], self.stats)

    def split(self, fraction: float, seed: int) -> tuple["DatasetManifest", "DatasetManifest"]:
        """Seeded (train, held-out) split; held-out gets ``ceil(fraction * n)`` records."""
        n = len(self.records)
        n_out = min(max(int(math.ceil(fraction * n)), 1 if fraction > 0 else 0), n - 1)
        perm = np.random.default_rng([seed, 7]).permutation(n)
        return self.subset(sorted(perm[n_out:])), self.subset(sorted(perm[:n_out]))

    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.records[0].image.shape)


def read_png(path: Path, height: int = IMAGE_HEIGHT, width: int = IMAGE_WIDTH) -> np.ndarray:
    """Decode to ``(H, W, 3)`` uint8, bilinear-resized when needed."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (width, height):
            im = im.resize((width, height), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def to_chw(pixels_hwc: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(pixels_hwc, (2, 0, 1)))


def load_manifest(
    path,
    domain: str,
    stats: NormalizationStats = DRIVING_STATS,
    height: int = IMAGE_HEIGHT,
    width: int = IMAGE_WIDTH,
) -> DatasetManifest:
    """Read a ``image,angle`` CSV; image paths are relative to the CSV.

    Source rows must carry an angle. Target angles, when present, are kept
    as evaluation-only labels.
    """
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    path = Path(path)
    root = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["image", "angle"]:
            raise ValueError(f"{path}: header must be 'image,angle'")
        for lineno, row in enumerate(reader, start=2):
            rel, raw = (row.get("image") or "").strip(), (row.get("angle") or "").strip()
            if raw == "":
                angle = None
            else:
                try:
                    angle = float(raw)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric angle {raw!r}") from None
            if angle is None and domain == SOURCE:
                raise ValueError(f"{path}:{lineno}: source row {rel!r} has no steering angle")
            img_path = root / rel
            if not img_path.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: image {rel!r} not found")
            pixels = read_png(img_path, height, width)
            records.append(SampleRecord(
                image=stats.normalize(to_chw(pixels), domain),
                steering=angle,
                domain=domain,
                id=Path(rel).stem,
                eval_only=domain == TARGET and angle is not None,
            ))
    if not records:
        raise ValueError(f"{path}: manifest has no rows")
    return DatasetManifest(domain, records, stats)


def write_manifest(path, rows: Sequence[tuple[str, Optional[float]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "angle"])
        for rel, angle in rows:
            w.writerow([rel, "" if angle is None else repr(float(angle))])


# --------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchStrategy:
    kind: str = SEPARATE
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in (SEPARATE, SHUFFLED):
            raise ValueError(f"unknown batch strategy {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Batch:
    ids: list[str]
    domains: list[str]
    images: torch.Tensor
    labels: torch.Tensor  # NaN where no training label is available

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def domain(self) -> Optional[str]:
        """The batch's single domain, or ``None`` for a mixed batch."""
        first = self.domains[0]
        return first if all(d == first for d in self.domains) else None

    def mask(self, domain: str) -> torch.Tensor:
        return torch.tensor([d == domain for d in self.domains])

    def select(self, domain: str) -> Optional["Batch"]:
        keep = [i for i, d in enumerate(self.domains) if d == domain]
        if not keep:
            return None
        if len(keep) == len(self.ids):
            return self
        idx = torch.tensor(keep)
        return Batch([self.ids[i] for i in keep], [domain] * len(keep), self.images[idx], self.labels[idx])

    @property
    def has_labels(self) -> bool:
        return bool(torch.isfinite(self.labels).all())


class _Cursor:
    """Epoch-wise seeded permutation, drop-last batching."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        out = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return out


class BatchStream:
    """Infinite, seed-deterministic stream of minibatches.

    ``separate`` alternates single-domain batches (source first); ``shuffled``
    draws from the pooled records. :meth:`next_from` always yields a
    single-domain batch and advances only that domain's cursor.
    """

    def __init__(self, manifests, strategy: BatchStrategy, seed: int):
        if isinstance(manifests, DatasetManifest):
            manifests = [manifests]
        self.manifests = {m.domain: m for m in manifests}
        if len(self.manifests) != len(manifests):
            raise ValueError("one manifest per domain")
        self.order = [d for d in DOMAINS if d in self.manifests]
        if not self.order:
            raise ValueError("make_batches needs at least one manifest")
        self.strategy = strategy
        self.seed = seed
        bs = strategy.batch_size
        for d, m in self.manifests.items():
            if len(m) == 0:
                raise ValueError(f"{d} manifest is empty")
            if bs > len(m):
                raise ValueError(f"batch_size {bs} exceeds {d} dataset size {len(m)}")
        self._cursors = {
            d: _Cursor(len(self.manifests[d]), bs, np.random.default_rng([seed, k]))
            for k, d in enumerate(DOMAINS) if d in self.manifests
        }
        self._pool = [(d, i) for d in self.order for i in range(len(self.manifests[d]))]
        self._mixed = _Cursor(len(self._pool), bs, np.random.default_rng([seed, 2]))
        self.draws = {"next": 0, SOURCE: 0, TARGET: 0}

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        return self.next()

    def next(self) -> Batch:
        k = self.draws["next"]
        self.draws["next"] += 1
        if self.strategy.kind == SEPARATE or len(self.order) == 1:
            domain = self.order[k % len(self.order)]
            return self._single(domain)
        picks = [self._pool[i] for i in self._mixed.take()]
        return self._assemble(picks)

    def next_from(self, domain: str) -> Batch:
        if domain not in self.manifests:
            raise ValueError(f"no {domain} manifest in this stream")
        self.draws[domain] += 1
        return self._single(domain)

    def _single(self, domain: str) -> Batch:
        return self._assemble([(domain, i) for i in self._cursors[domain].take()])

    def _assemble(self, picks) -> Batch:
        images, labels, ids, domains = [], [], [], []
        for domain, i in picks:
            m = self.manifests[domain]
            rec = m.records[i]
            images.append(m.images()[i])
            lab = rec.trainable_label
            labels.append(np.nan if lab is None else lab)
            ids.append(rec.id)
            domains.append(domain)
        return Batch(ids, domains, torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.float32))

    def state(self) -> dict:
        return dict(self.draws)

    def fast_forward(self, draws: dict) -> None:
        """Replay draw counts from :meth:`state` on a freshly built stream."""
        if any(self.draws.values()):
            raise RuntimeError("fast_forward needs a fresh stream")
        for _ in range(draws.get("next", 0)):
            self.draws["next"] += 1
            k = self.draws["next"] - 1
            if self.strategy.kind == SEPARATE or len(self.order) == 1:
                self._cursors[self.order[k % len(self.order)]].take()
            else:
                self._mixed.take()
        for d in DOMAINS:
            for _ in range(draws.get(d, 0)):
                self.draws[d] += 1
                self._cursors[d].take()


def make_batches(manifests, strategy: BatchStrategy, seed: int) -> BatchStream:
    return BatchStream(manifests, strategy, seed)


# --------------------------------------------------------------------------
# synthetic road scenes


@dataclass(frozen=True)
class Style:
    sky: tuple
    ground: tuple
    road: tuple
    marking: tuple
    noise: float  # std of per-pixel Gaussian texture, in 8-bit units
    horizon: float  # horizon row as a fraction of image height


STYLE_SIM = Style(sky=(120, 180, 235), ground=(60, 150, 60), road=(125, 125, 125), marking=(250, 250, 250),
                  noise=4.0, horizon=0.40)
STYLE_REAL = Style(sky=(215, 200, 165), ground=(150, 100, 60), road=(45, 45, 55), marking=(235, 200, 30),
                   noise=6.0, horizon=0.45)


@dataclass(frozen=True)
class SynthConfig:
    n_per_domain: int = 512
    n_test: int = 128
    angle_range: tuple = (-0.5, 0.5)
    style_a: Style = STYLE_SIM
    style_b: Style = STYLE_REAL
    seed: int = 0
    height: int = IMAGE_HEIGHT
    width: int = IMAGE_WIDTH

    def __post_init__(self):
        lo, hi = self.angle_range
        if not (-math.pi / 2 <= lo < hi <= math.pi / 2):
            raise ValueError("angle_range must be an increasing interval inside [-pi/2, pi/2]")
        if (self.style_a.sky, self.style_a.ground, self.style_a.road) == \
                (self.style_b.sky, self.style_b.ground, self.style_b.road):
            raise ValueError("style_a and style_b must differ in palette")


@dataclass(frozen=True)
class Scene:
    angle: float
    half_width: float  # road half-width at the bottom row, fraction of image width
    offset: float  # lateral shift of the road origin, fraction of image width
    noise_seed: int


def render_scene(scene: Scene, style: Style, height: int = IMAGE_HEIGHT, width: int = IMAGE_WIDTH) -> np.ndarray:
    """Road wedge leaving the bottom edge at ``scene.angle`` (positive = right)."""
    rows = np.arange(height, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(width, dtype=np.float64)[None, :] + 0.5
    horizon = style.horizon * height
    depth = np.clip((rows - horizon) / (height - horizon), 0.0, 1.0)  # 1 at the bottom, 0 at the horizon
    center = width * (0.5 + scene.offset) + np.tan(scene.angle) * (height - rows)
    half = scene.half_width * width * depth
    dist = np.abs(cols - center)
    img = np.empty((height, width, 3), dtype=np.float64)
    below = np.broadcast_to(rows > horizon, (height, width))
    img[~below] = style.sky
    img[below] = style.ground
    road = below & (dist < half)
    img[road] = style.road
    dashes = (np.floor((height - rows) / 6.0) % 2 == 0)
    marking = road & (dist < np.maximum(0.08 * half, 0.6)) & np.broadcast_to(dashes, (height, width))
    img[marking] = style.marking
    rng = np.random.default_rng(scene.noise_seed)
    img += rng.normal(0.0, style.noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class SyntheticDataset:
    source: DatasetManifest
    target: DatasetManifest
    target_test: DatasetManifest
    source_test: DatasetManifest
    scenes: dict  # record id -> Scene
    pixels: dict  # record id -> (H, W, 3) uint8
    config: SynthConfig

    def style_of(self, domain: str) -> Style:
        return self.config.style_a if domain == SOURCE else self.config.style_b

    def oracle_translate(self, record_id: str, to_domain: str) -> np.ndarray:
        """Ground-truth translation: re-render the record's scene in the other style.

        Returns pixels normalized with ``to_domain`` statistics.
        """
        c = self.config
        px = render_scene(self.scenes[record_id], self.style_of(to_domain), c.height, c.width)
        return self.source.stats.normalize(to_chw(px), to_domain)

    def oracle_label(self, record_id: str) -> float:
        return self.scenes[record_id].angle


def _sample_scenes(rng: np.random.Generator, n: int, angle_range, base_seed: int) -> list[Scene]:
    angles = rng.uniform(angle_range[0], angle_range[1], n)
    widths = rng.uniform(0.16, 0.24, n)
    offsets = rng.uniform(-0.04, 0.04, n)
    return [Scene(float(a), float(w), float(o), base_seed + i) for i, (a, w, o) in enumerate(zip(angles, widths, offsets))]


def generate_synthetic(config: SynthConfig = SynthConfig()) -> SyntheticDataset:
    """Render a labelled source domain and an independently sampled target domain.

    Target labels (train and test) are kept but flagged evaluation-only.
    Normalization statistics are computed from each domain's training pixels.
    """
    if config.n_per_domain < 1:
        raise ValueError("n_per_domain must be >= 1")
    rng = np.random.default_rng([config.seed, 11])
    groups = {}
    for k, (domain, split, n) in enumerate((
        (SOURCE, "train", config.n_per_domain),
        (TARGET, "train", config.n_per_domain),
        (TARGET, "test", config.n_test),
        (SOURCE, "test", config.n_test),
    )):
        prefix = f"{'src' if domain == SOURCE else 'tgt'}_{split}"
        scenes = _sample_scenes(rng, n, config.angle_range, base_seed=(config.seed * 10 + k) * 1_000_000)
        style = config.style_a if domain == SOURCE else config.style_b
        groups[(domain, split)] = [
            (f"{prefix}_{i:05d}", s, render_scene(s, style, config.height, config.width)) for i, s in enumerate(scenes)
        ]
    stats = compute_stats({
        d: np.stack([px for _, _, px in groups[(d, "train")]]) for d in DOMAINS
    })

    def manifest(domain, split):
        recs = [
            SampleRecord(stats.normalize(to_chw(px), domain), s.angle, domain, rid, eval_only=domain == TARGET)
            for rid, s, px in groups[(domain, split)]
        ]
        return DatasetManifest(domain, recs, stats)

    scenes = {rid: s for g in groups.values() for rid, s, _ in g}
    pixels = {rid: px for g in groups.values() for rid, _, px in g}
    return SyntheticDataset(
        source=manifest(SOURCE, "train"),
        target=manifest(TARGET, "train"),
        target_test=manifest(TARGET, "test"),
        source_test=manifest(SOURCE, "test"),
        scenes=scenes,
        pixels=pixels,
        config=config,
    )


MANIFEST_FILES = {
    (SOURCE, "train"): "source.csv",
    (TARGET, "train"): "target.csv",
    (TARGET, "test"): "target_test.csv",
    (SOURCE, "test"): "source_test.csv",
}


def write_synthetic(ds: SyntheticDataset, out_dir) -> Path:
    """PNG files, one CSV per split and ``stats.txt``.

    ``target.csv`` leaves the angle column empty: training never sees target
    labels. ``target_test.csv`` carries them for evaluation.
    """
    out = Path(out_dir)
    for (domain, split), fname in MANIFEST_FILES.items():
        manifest = {
            (SOURCE, "train"): ds.source, (TARGET, "train"): ds.target,
            (TARGET, "test"): ds.target_test, (SOURCE, "test"): ds.source_test,
        }[(domain, split)]
        sub = out / domain / split
        sub.mkdir(parents=True, exist_ok=True)
        rows = []
        for rec in manifest.records:
            rel = f"{domain}/{split}/{rec.id}.png"
            Image.fromarray(ds.pixels[rec.id]).save(out / rel, optimize=False)
            label = None if (domain, split) == (TARGET, "train") else rec.steering
            rows.append((rel, label))
        write_manifest(out / fname, rows)
    (out / "stats.txt").write_text(ds.source.stats.to_text(), encoding="utf-8")
    return out


def load_stats(path) -> NormalizationStats:
    return NormalizationStats.from_text(Path(path).read_text(encoding="utf-8"))


def with_labels_hidden(manifest: DatasetManifest) -> DatasetManifest:
    """Copy whose records expose no steering labels at all."""
    return DatasetManifest(manifest.domain, [replace(r, steering=None, eval_only=False) for r in manifest.records],
                           manifest.stats)
