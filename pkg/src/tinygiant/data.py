"""Synthetic top-down warehouse scenes with geometrically exact VQA answers.

Objects are axis-aligned boxes on a square floor seen by a downward-facing
camera. RGB renders them as class-coloured rectangles and the depth map holds
camera-to-surface distance in meters. Four question types mirror the
warehouse benchmark: distance, count, multiple choice and left/right.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .checkpoint import atomic_write_bytes
from .masks import RleMask, rle_decode, rle_encode

TASKS = ("distance", "count", "mcq", "left_right")
CLASSES = ("pallet", "buffer", "transporter", "shelf")
PLURAL = {"pallet": "pallets", "buffer": "buffers", "transporter": "transporters", "shelf": "shelves"}
COLORS = {
    "pallet": (150, 100, 50),
    "buffer": (230, 200, 40),
    "transporter": (40, 90, 200),
    "shelf": (170, 170, 170),
}
FLOOR_COLOR = (60, 60, 60)
HEIGHTS = {"pallet": (0.15, 0.3), "buffer": (0.02, 0.05), "transporter": (0.3, 0.6), "shelf": (1.5, 3.0)}
NORMALIZATION_FAILED = "<unparsed>"


class GenerationError(RuntimeError):
    pass


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    cls: str
    x: float  # center, meters
    y: float
    w: float  # footprint, meters
    h: float
    height: float


@dataclass
class Scene:
    extent: float
    objects: list[SceneObject]
    camera_height: float = 10.0


@dataclass
class DataConfig:
    rgb_size: int = 224
    depth_size: int = 384
    world_extent: float = 20.0
    camera_height: float = 10.0
    min_objects: int = 3
    max_objects: int = 6
    task_mix: dict[str, float] = field(default_factory=lambda: {t: 0.25 for t in TASKS})
    max_retries: int = 200


@dataclass
class Sample:
    id: str
    rgb: np.ndarray  # (3, H, W) uint8
    depth: np.ndarray  # (1, H', W') meters
    regions: list[tuple[RleMask, str]]
    question: str
    task: str
    answer_free: str
    answer_norm: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "rgb": self.rgb.tolist(),
            "depth": self.depth.tolist(),
            "regions": [{**m.to_json(), "class": c} for m, c in self.regions],
            "question": self.question,
            "task": self.task,
            "answer_free": self.answer_free,
            "answer_norm": self.answer_norm,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Sample":
        return cls(
            id=obj["id"],
            rgb=np.asarray(obj["rgb"], dtype=np.uint8),
            depth=np.asarray(obj["depth"], dtype=np.float64),
            regions=[(RleMask.from_json(r), r["class"]) for r in obj["regions"]],
            question=obj["question"],
            task=obj["task"],
            answer_free=obj["answer_free"],
            answer_norm=obj["answer_norm"],
        )

    def masks(self) -> list[np.ndarray]:
        return [rle_decode(m) for m, _ in self.regions]

    def text_record(self) -> dict:
        """Everything training needs besides pixels."""
        return {
            "id": self.id,
            "question": self.question,
            "task": self.task,
            "answer_free": self.answer_free,
            "answer_norm": self.answer_norm,
            "classes": [c for _, c in self.regions],
        }


# geometry and rendering ---------------------------------------------------------


def distance_answer(a: SceneObject, b: SceneObject) -> str:
    return f"{math.hypot(a.x - b.x, a.y - b.y):.2f}"


def pixel_x(obj: SceneObject, extent: float, size: int) -> float:
    return obj.x / extent * size


def left_right_answer(a: SceneObject, b: SceneObject, extent: float, size: int) -> str:
    return "left" if pixel_x(a, extent, size) < pixel_x(b, extent, size) else "right"


def count_answer(objects: Iterable[SceneObject], cls: str) -> str:
    return str(sum(1 for o in objects if o.cls == cls))


def mirror_scene(scene: Scene) -> Scene:
    """Reflect about the vertical image axis."""
    return replace(scene, objects=[replace(o, x=scene.extent - o.x) for o in scene.objects])


def object_mask(obj: SceneObject, extent: float, size: int) -> np.ndarray:
    centers = (np.arange(size) + 0.5) * extent / size
    cols = (centers >= obj.x - obj.w / 2) & (centers < obj.x + obj.w / 2)
    rows = (centers >= obj.y - obj.h / 2) & (centers < obj.y + obj.h / 2)
    return np.outer(rows, cols)


def render(scene: Scene, rgb_size: int, depth_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    rgb = np.empty((3, rgb_size, rgb_size), dtype=np.int64)
    rgb[:] = np.asarray(FLOOR_COLOR)[:, None, None]
    rgb += rng.integers(-8, 9, size=rgb.shape)
    depth = np.full((1, depth_size, depth_size), scene.camera_height)
    masks = []
    for obj in scene.objects:
        m = object_mask(obj, scene.extent, rgb_size)
        tint = np.asarray(COLORS[obj.cls]) + rng.integers(-12, 13, size=3)
        rgb[:, m] = tint[:, None]
        depth[0, object_mask(obj, scene.extent, depth_size)] = scene.camera_height - obj.height
        masks.append(m)
    rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    return rgb, np.round(depth, 3), masks


def random_scene(rng: np.random.Generator, cfg: DataConfig) -> Scene:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > cfg.max_retries:
            raise GenerationError(f"could not place {n} non-overlapping objects in {cfg.max_retries} tries")
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        w, h = rng.uniform(1.5, 3.5, size=2)
        margin = 0.5
        x = float(rng.uniform(w / 2 + margin, cfg.world_extent - w / 2 - margin))
        y = float(rng.uniform(h / 2 + margin, cfg.world_extent - h / 2 - margin))
        cand = SceneObject(cls, round(x, 3), round(y, 3), round(float(w), 3), round(float(h), 3), round(float(rng.uniform(*HEIGHTS[cls])), 3))
        if all(_apart(cand, o, gap=0.5) for o in objects):
            objects.append(cand)
    return Scene(cfg.world_extent, objects, cfg.camera_height)


def _apart(a: SceneObject, b: SceneObject, gap: float) -> bool:
    return abs(a.x - b.x) >= (a.w + b.w) / 2 + gap or abs(a.y - b.y) >= (a.h + b.h) / 2 + gap


# questions ----------------------------------------------------------------------


def _tags(n: int) -> list[str]:
    return [f"<R{j}>" for j in range(n)]


def _pick(rng, scene: Scene, k: int) -> list[int]:
    return sorted(int(i) for i in rng.choice(len(scene.objects), size=k, replace=False))


def make_question(task: str, scene: Scene, rng: np.random.Generator, cfg: DataConfig):
    """Return (region object indices, question, free answer, normalized answer) or None."""
    objs = scene.objects
    if task == "distance":
        idx = list(rng.permutation(_pick(rng, scene, 2)))
        a, b = objs[idx[0]], objs[idx[1]]
        ans = distance_answer(a, b)
        q = "What is the distance between <R0> and <R1>?"
        return idx, q, f"The distance between <R0> and <R1> is {ans} meters.", ans
    if task == "count":
        idx = list(range(len(objs)))
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        n = count_answer(objs, cls)
        tags = ", ".join(_tags(len(idx)))
        q = f"How many {PLURAL[cls]} are among {tags}?"
        noun = cls if n == "1" else PLURAL[cls]
        verb = "is" if n == "1" else "are"
        return idx, q, f"There {verb} {n} {noun} among the marked regions.", n
    if task == "mcq":
        if len(objs) < 4:
            return None
        idx = [int(i) for i in rng.permutation(len(objs))[:4]]
        cands, ref = idx[:3], objs[idx[3]]
        if rng.random() < 0.5:
            d = [math.hypot(objs[i].x - ref.x, objs[i].y - ref.y) for i in cands]
            order = np.argsort(d)
            if d[order[1]] - d[order[0]] < 0.5:
                return None
            q = "Which of <R0>, <R1>, <R2> is closest to <R3>?"
            word = "closest"
        else:
            d = [objs[i].x for i in cands]
            order = np.argsort(d)
            if d[order[1]] - d[order[0]] < 0.5:
                return None
            q = "Which of <R0>, <R1>, <R2> is the leftmost?"
            word = "leftmost"
            idx = cands
        best = int(order[0])
        return idx, q, f"The {word} one is <R{best}>.", str(best)
    if task == "left_right":
        idx = _pick(rng, scene, 2)
        a, b = objs[idx[0]], objs[idx[1]]
        if abs(pixel_x(a, scene.extent, cfg.rgb_size) - pixel_x(b, scene.extent, cfg.rgb_size)) < 2.0:
            return None
        if rng.random() < 0.5:
            idx = idx[::-1]
            a, b = b, a
        side = left_right_answer(a, b, scene.extent, cfg.rgb_size)
        q = "Is <R0> to the left or the right of <R1>?"
        return idx, q, f"<R0> is to the {side} of <R1>.", side
    raise ValueError(f"unknown task {task!r}")


def task_schedule(n: int, task_mix: Mapping[str, float], rng: np.random.Generator) -> list[str]:
    """Exact per-task quotas (largest remainder), in a seeded random order."""
    total = sum(task_mix.values())
    if any(v < 0 for v in task_mix.values()) or not math.isclose(total, 1.0, abs_tol=1e-9):
        raise GenerationError(f"task_mix must be non-negative and sum to 1, got {dict(task_mix)}")
    unknown = set(task_mix) - set(TASKS)
    if unknown:
        raise GenerationError(f"unknown tasks in task_mix: {sorted(unknown)}")
    raw = {t: n * task_mix.get(t, 0.0) for t in TASKS}
    quota = {t: int(math.floor(v)) for t, v in raw.items()}
    for t in sorted(TASKS, key=lambda t: (-(raw[t] - quota[t]), TASKS.index(t)))[: n - sum(quota.values())]:
        quota[t] += 1
    tasks = [t for t in TASKS for _ in range(quota[t])]
    return [tasks[i] for i in rng.permutation(n)]


SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def generate_sample(sample_id: str, task: str, rng: np.random.Generator, cfg: DataConfig) -> Sample:
    for _ in range(cfg.max_retries):
        scene = random_scene(rng, cfg)
        made = make_question(task, scene, rng, cfg)
        if made is None:
            continue
        idx, q, free, norm = made
        rgb, depth, masks = render(scene, cfg.rgb_size, cfg.depth_size, rng)
        if any(not masks[i].any() for i in idx):
            continue
        regions = [(rle_encode(masks[i]), scene.objects[i].cls) for i in idx]
        return Sample(sample_id, rgb, depth, regions, q, task, free, norm)
    raise GenerationError(f"could not generate a {task} sample after {cfg.max_retries} scenes")


def generate_dataset(seed: int, n_samples: int, cfg: DataConfig | None = None, split: str = "train") -> list[Sample]:
    """Deterministic in (seed, split, config); sample i uses its own RNG stream."""
    cfg = cfg or DataConfig()
    code = SPLIT_CODES.get(split, len(SPLIT_CODES))
    tasks = task_schedule(n_samples, cfg.task_mix, np.random.default_rng([seed, 101, code]))
    return [
        generate_sample(f"{split}-{i:06d}", task, np.random.default_rng([seed, 102, code, i]), cfg)
        for i, task in enumerate(tasks)
    ]


def write_jsonl(path, rows: Iterable[Mapping]) -> None:
    text = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_dataset(path, samples: Sequence[Sample]) -> None:
    write_jsonl(path, (s.to_json() for s in samples))


def read_dataset(path) -> list[Sample]:
    return [Sample.from_json(r) for r in read_jsonl(path)]


# normalization and scoring -------------------------------------------------------

_TAG = re.compile(r"<R(\d+)>", re.IGNORECASE)
_DECIMAL = re.compile(r"\d+(?:\.\d+)?")
_INT = re.compile(r"\d+")
_SIDE = re.compile(r"\b(left|right)\b", re.IGNORECASE)


def normalize_answer(text: str, task: str) -> str:
    """Canonical answer string for ``task``; ``NORMALIZATION_FAILED`` if nothing parses."""
    if task == "mcq":
        m = _TAG.search(text)
        if m:
            return str(int(m.group(1)))
        m = _INT.search(text)
        return str(int(m.group(0))) if m else NORMALIZATION_FAILED
    plain = _TAG.sub(" ", text)
    if task == "distance":
        m = _DECIMAL.search(plain)
        return f"{float(m.group(0)):.2f}" if m else NORMALIZATION_FAILED
    if task == "count":
        m = _INT.search(plain)
        return str(int(m.group(0))) if m else NORMALIZATION_FAILED
    if task == "left_right":
        m = _SIDE.search(plain)
        return m.group(1).lower() if m else NORMALIZATION_FAILED
    raise ValueError(f"unknown task {task!r}")


def is_correct(pred: str, truth: str, task: str, distance_tolerance: float = 0.10) -> bool:
    if pred == NORMALIZATION_FAILED:
        return False
    if task == "distance":
        try:
            p, t = float(pred), float(truth)
        except ValueError:
            return False
        if t == 0:
            return p == 0
        return abs(p - t) / abs(t) <= distance_tolerance + 1e-12
    return pred == truth


@dataclass
class ScoreReport:
    per_task: dict[str, float]
    counts: dict[str, int]
    overall: float
    unparsed: int = 0

    def to_json(self) -> dict:
        return {"per_task": self.per_task, "counts": self.counts, "overall": self.overall, "unparsed": self.unparsed}

    def table(self) -> str:
        lines = [f"{'task':<12}{'n':>6}{'accuracy':>10}"]
        for t in TASKS:
            if self.counts.get(t):
                lines.append(f"{t:<12}{self.counts[t]:>6}{self.per_task[t]:>10.2f}")
        lines.append(f"{'overall':<12}{sum(self.counts.values()):>6}{self.overall:>10.2f}")
        if self.unparsed:
            lines.append(f"unparsed predictions: {self.unparsed}")
        return "\n".join(lines)


def score_records(predictions: Mapping[str, str], truth: Sequence[Mapping], distance_tolerance: float = 0.10) -> ScoreReport:
    truth_ids = {r["id"] for r in truth}
    missing = sorted(truth_ids - set(predictions))
    extra = sorted(set(predictions) - truth_ids)
    if missing or extra:
        raise ScoringError(f"id mismatch: missing predictions for {missing[:10]}, unknown ids {extra[:10]}")
    hits = {t: 0 for t in TASKS}
    counts = {t: 0 for t in TASKS}
    unparsed = 0
    for r in truth:
        pred = predictions[r["id"]]
        counts[r["task"]] += 1
        unparsed += pred == NORMALIZATION_FAILED
        hits[r["task"]] += is_correct(pred, r["answer_norm"], r["task"], distance_tolerance)
    per_task = {t: (100.0 * hits[t] / counts[t] if counts[t] else 0.0) for t in TASKS}
    n = sum(counts.values())
    overall = 100.0 * sum(hits.values()) / n if n else 0.0
    return ScoreReport(per_task, counts, overall, unparsed)


def score(predictions_path, truth_path, distance_tolerance: float = 0.10) -> ScoreReport:
    """Score a predictions JSONL ({id, answer}) against a ground-truth JSONL."""
    preds = {r["id"]: r["answer"] for r in read_jsonl(predictions_path)}
    return score_records(preds, read_jsonl(truth_path), distance_tolerance)
