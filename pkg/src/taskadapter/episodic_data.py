"""Synthetic moving-patch videos, episodic C-way K-shot sampling and the sub-action corpus."""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ConfigError, CorpusError, DataError

STAGE_NAMES = ("beginning", "process", "end")
SUBACTION_INSTRUCTION = "Given an action label {label}, describe three stages of the action."


@dataclass(frozen=True)
class EpisodeConfig:
    ways: int = 5
    shots: int = 1
    queries_per_class: int = 1
    frames: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.ways < 2:
            raise ConfigError(f"ways must be >= 2, got {self.ways}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.queries_per_class < 1:
            raise ConfigError(f"queries_per_class must be >= 1, got {self.queries_per_class}")
        # T - 1 aligned frames must split into three stages
        if self.frames < 4:
            raise ConfigError(f"frames must be >= 4, got {self.frames}")


@dataclass(frozen=True, eq=False)
class RawVideo:
    pixels: np.ndarray  # [F, H, W, 3] in [0, 1]

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise DataError(f"video pixels must be [F, H, W, 3], got {self.pixels.shape}")
        if self.pixels.shape[0] < 1:
            raise DataError("video needs at least one frame")

    @property
    def frame_count(self) -> int:
        return self.pixels.shape[0]

    def reversed(self) -> RawVideo:
        return RawVideo(np.ascontiguousarray(self.pixels[::-1]))


@dataclass(frozen=True)
class SyntheticClassSpec:
    """Motion program of one synthetic class.

    Positions are normalized (row, col) patch centres in [0, 1]; ``velocity`` is
    the total displacement over the clip. ``color=None`` draws a fresh colour
    for every video, which keeps appearance uninformative about the class.
    """

    class_id: int
    name: str
    start: tuple[float, float] = (0.5, 0.5)
    velocity: tuple[float, float] = (0.0, 0.0)
    shape: str = "square"
    color: tuple[float, float, float] | None = None
    reversal_partner: int | None = None


@dataclass
class Episode:
    support: list[tuple[RawVideo, int]]
    query: list[tuple[RawVideo, int]]
    class_names: list[str]
    class_ids: list[int]
    support_sources: list[tuple[int, int]] = field(default_factory=list)
    query_sources: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ways(self) -> int:
        return len(self.class_ids)

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([label for _, label in self.support], dtype=np.int64)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([label for _, label in self.query], dtype=np.int64)

    def support_pixels(self) -> np.ndarray:
        return np.stack([video.pixels for video, _ in self.support])

    def query_pixels(self) -> np.ndarray:
        return np.stack([video.pixels for video, _ in self.query])


class SyntheticDataset(Mapping):
    """class_id -> list of RawVideo, plus the specs and seed that produced it."""

    def __init__(self, specs: Sequence[SyntheticClassSpec], videos: dict[int, list[RawVideo]], seed: int):
        self.specs = {spec.class_id: spec for spec in specs}
        self.videos = videos
        self.seed = seed

    def __getitem__(self, class_id: int) -> list[RawVideo]:
        return self.videos[class_id]

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.videos))

    def __len__(self) -> int:
        return len(self.videos)

    def name(self, class_id: int) -> str:
        return self.specs[class_id].name

    def reversal_pairs(self) -> list[tuple[int, int]]:
        pairs = set()
        for spec in self.specs.values():
            if spec.reversal_partner is not None:
                pairs.add(tuple(sorted((spec.class_id, spec.reversal_partner))))
        return sorted(pairs)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"seed": self.seed, "classes": []}
        for class_id in self:
            spec = self.specs[class_id]
            filename = f"class_{class_id:04d}.npy"
            np.save(directory / filename, np.stack([v.pixels for v in self.videos[class_id]]))
            entry = asdict(spec)
            entry["file"] = filename
            manifest["classes"].append(entry)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> SyntheticDataset:
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read dataset manifest in {directory}: {exc}") from exc
        specs, videos = [], {}
        for entry in manifest["classes"]:
            filename = entry.pop("file")
            for key in ("start", "velocity", "color"):
                if entry.get(key) is not None:
                    entry[key] = tuple(entry[key])
            spec = SyntheticClassSpec(**entry)
            specs.append(spec)
            videos[spec.class_id] = [RawVideo(p) for p in np.load(directory / filename)]
        return cls(specs, videos, manifest["seed"])


def default_class_specs() -> list[SyntheticClassSpec]:
    """Ten motion classes, two of which are reversal pairs (0/1 and 2/3)."""
    S = SyntheticClassSpec
    return [
        S(0, "Pushing something from left to right", (0.5, 0.15), (0.0, 0.7), reversal_partner=1),
        S(1, "Pushing something from right to left", reversal_partner=0),
        S(2, "Lifting something up", (0.85, 0.5), (-0.7, 0.0), reversal_partner=3),
        S(3, "Putting something down", reversal_partner=2),
        S(4, "Sliding something down to the right", (0.15, 0.15), (0.7, 0.7)),
        S(5, "Sliding something down to the left", (0.15, 0.85), (0.7, -0.7)),
        S(6, "Holding something still", (0.5, 0.5), (0.0, 0.0)),
        S(7, "Nudging something slightly", (0.5, 0.35), (0.0, 0.25)),
        S(8, "Tossing something up to the right", (0.85, 0.15), (-0.7, 0.7)),
        S(9, "Rolling something along the top", (0.15, 0.85), (0.0, -0.7)),
    ]


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    if shape == "cross":
        return (np.abs(yy - c) < size / 6 + 0.5) | (np.abs(xx - c) < size / 6 + 0.5)
    if shape == "ring":
        r2 = (yy - c) ** 2 + (xx - c) ** 2
        return (r2 <= (size / 2) ** 2) & (r2 >= (size / 4) ** 2)
    raise ConfigError(f"unknown shape {shape!r}")


def render_motion(
    spec: SyntheticClassSpec,
    rng: np.random.Generator,
    frame_count: int = 16,
    size: int = 32,
    patch: int = 8,
    noise: float = 0.05,
) -> RawVideo:
    """Render one video of a moving patch with per-video nuisance variation."""
    color = np.asarray(spec.color if spec.color is not None else rng.uniform(0.2, 1.0, size=3))
    background = rng.uniform(0.0, 0.3, size=3)
    jitter = rng.normal(0.0, 0.04, size=2)
    speed = rng.uniform(0.85, 1.15)
    start = np.asarray(spec.start) + jitter
    velocity = np.asarray(spec.velocity) * speed
    mask = _shape_mask(spec.shape, patch)

    frames = np.empty((frame_count, size, size, 3))
    frames[:] = background
    frames += rng.normal(0.0, noise, size=frames.shape)
    span = size - patch
    for f in range(frame_count):
        t = f / max(frame_count - 1, 1)
        centre = np.clip(start + velocity * t, 0.0, 1.0)
        top, left = np.rint(centre * span).astype(int)
        region = frames[f, top : top + patch, left : left + patch]
        region[mask] = color
    return RawVideo(np.clip(frames, 0.0, 1.0))


def generate_synthetic_dataset(
    specs: Sequence[SyntheticClassSpec],
    videos_per_class: int,
    rng_seed: int,
    frame_count: int = 16,
    size: int = 32,
) -> SyntheticDataset:
    if not specs:
        raise ConfigError("at least one class spec is required")
    if videos_per_class < 1:
        raise ConfigError("videos_per_class must be >= 1")
    by_id: dict[int, SyntheticClassSpec] = {}
    for spec in specs:
        if spec.class_id in by_id:
            raise ConfigError(f"duplicate class_id {spec.class_id}")
        by_id[spec.class_id] = spec
    for spec in specs:
        partner = spec.reversal_partner
        if partner is None:
            continue
        if partner not in by_id or by_id[partner].reversal_partner != spec.class_id:
            raise ConfigError(f"class {spec.class_id}: reversal partner {partner} is missing or not mutual")

    videos: dict[int, list[RawVideo]] = {}
    # The lower id of a reversal pair owns the motion program; the partner's
    # videos are its videos played backwards.
    for class_id in sorted(by_id):
        spec = by_id[class_id]
        if spec.reversal_partner is not None and spec.reversal_partner < class_id:
            continue
        rng = np.random.default_rng([rng_seed, class_id])
        videos[class_id] = [render_motion(spec, rng, frame_count, size) for _ in range(videos_per_class)]
        if spec.reversal_partner is not None:
            videos[spec.reversal_partner] = [v.reversed() for v in videos[class_id]]
    return SyntheticDataset(specs, videos, rng_seed)


def frame_indices(frame_count: int, T: int) -> np.ndarray:
    """Centre-of-segment indices floor((j + 0.5) * F / T), clamped to [0, F)."""
    if T <= 0:
        raise ConfigError(f"T must be positive, got {T}")
    if frame_count < 1:
        raise DataError("video has no frames")
    j = np.arange(T)
    # integer arithmetic: floor((2j + 1) F / 2T)
    idx = ((2 * j + 1) * frame_count) // (2 * T)
    return np.minimum(idx, frame_count - 1)


def uniform_sample_frames(video: RawVideo, T: int) -> RawVideo:
    return RawVideo(video.pixels[frame_indices(video.frame_count, T)])


def sample_episode(
    dataset: Mapping[int, Sequence[RawVideo]],
    corpus: Mapping[str, Sequence[str]],
    config: EpisodeConfig,
    episode_index: int,
    class_pool: Sequence[int] | None = None,
    names: Mapping[int, str] | None = None,
) -> Episode:
    """Draw one C-way K-shot task; the rng stream is keyed by (seed, episode_index)."""
    if names is None:
        names = {cid: dataset.name(cid) for cid in dataset} if isinstance(dataset, SyntheticDataset) else {}
    pool = sorted(class_pool if class_pool is not None else dataset)
    per_class = config.shots + config.queries_per_class
    if len(pool) < config.ways:
        raise DataError(f"need {config.ways} classes, dataset has {len(pool)}")
    for cid in pool:
        if len(dataset[cid]) < per_class:
            raise DataError(f"class {cid} has {len(dataset[cid])} videos, need {per_class}")

    rng = np.random.default_rng([config.seed, episode_index])
    class_ids = [int(c) for c in rng.choice(pool, size=config.ways, replace=False)]
    class_names = [names.get(cid, str(cid)) for cid in class_ids]
    for name in class_names:
        if name not in corpus:
            raise CorpusError(f"class {name!r} has no entry in the corpus")

    support, query, support_src, query_src = [], [], [], []
    for label, cid in enumerate(class_ids):
        picks = rng.choice(len(dataset[cid]), size=per_class, replace=False)
        for k, vid in enumerate(picks):
            video = uniform_sample_frames(dataset[cid][vid], config.frames)
            if k < config.shots:
                support.append((video, label))
                support_src.append((cid, int(vid)))
            else:
                query.append((video, label))
                query_src.append((cid, int(vid)))
    order = rng.permutation(len(query))
    query = [query[i] for i in order]
    query_src = [query_src[i] for i in order]
    return Episode(support, query, class_names, class_ids, support_src, query_src)


class Corpus(dict):
    """class name -> (beginning, process, end) descriptions."""

    def __init__(self, entries: Mapping[str, Sequence[str]] = ()):
        super().__init__()
        for label, stages in dict(entries).items():
            self[label] = stages

    def __setitem__(self, label, stages):
        if not isinstance(label, str) or not label:
            raise CorpusError(f"corpus keys must be non-empty strings, got {label!r}")
        if isinstance(stages, str) or not isinstance(stages, Sequence) or len(stages) != 3:
            raise CorpusError(f"entry {label!r} must have exactly 3 stage descriptions")
        for stage in stages:
            if not isinstance(stage, str) or not stage.strip():
                raise CorpusError(f"entry {label!r} has an empty or non-string stage")
        super().__setitem__(label, tuple(stages))


def load_corpus(path: str | Path) -> Corpus:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CorpusError("corpus must be a JSON object")
    return Corpus(raw)


def save_corpus(corpus: Mapping[str, Sequence[str]], path: str | Path) -> None:
    data = {label: list(stages) for label, stages in corpus.items()}
    Path(path).write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def bundled_corpus() -> Corpus:
    text = resources.files("taskadapter.data").joinpath("corpus.json").read_text(encoding="utf-8")
    return Corpus(json.loads(text))


class SubActionGenerator(Protocol):
    def describe(self, label: str) -> Sequence[str]: ...


class TemplateGenerator:
    """Offline stand-in for an LLM: answers from a fixed corpus."""

    def __init__(self, corpus: Mapping[str, Sequence[str]] | None = None):
        self.corpus = corpus if corpus is not None else bundled_corpus()

    def prompt(self, label: str) -> str:
        return SUBACTION_INSTRUCTION.format(label=label)

    def describe(self, label: str) -> Sequence[str]:
        if label not in self.corpus:
            raise CorpusError(f"no template description for {label!r}")
        return self.corpus[label]


def build_corpus(labels: Sequence[str], generator: SubActionGenerator | None = None) -> Corpus:
    generator = generator or TemplateGenerator()
    return Corpus({label: generator.describe(label) for label in labels})
