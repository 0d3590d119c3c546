"""Procedural fundus-like images with exact lesion ground truth.

Images are 64x64x3 reals quantised to multiples of 1/255, so an image written to
PPM and read back is bit-identical to the in-memory array.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SIDE = 64
CENTER = (32.0, 32.0)
DISC_RADIUS = 30.0
LESION_FIELD_RADIUS = 26.0  # lesion centres are drawn from this inner disc
OPTIC_DISC = (32.0, 50.0)  # nasal side is to the right (col > 32)
OPTIC_RADIUS = 4.5

KINDS = ("microaneurysm", "hemorrhage", "hard_exudate", "soft_exudate", "neovascularization", "irma")
GRADE_NAMES = ("No DR", "Mild DR", "Moderate DR", "Severe DR", "Proliferative DR")

# per-kind size bounds in pixels (radius, or filament length for neovascularization)
RADIUS_BOUNDS = {
    "microaneurysm": (1, 1),
    "hemorrhage": (2, 4),
    "hard_exudate": (1, 3),
    "soft_exudate": (3, 5),
    "neovascularization": (6, 12),
    "irma": (3, 6),
}
DARK_KINDS = frozenset({"microaneurysm", "hemorrhage", "irma"})

_BASE = np.array([0.78, 0.40, 0.18])
_COLORS = {
    "microaneurysm": np.array([0.22, 0.02, 0.02]),
    "hemorrhage": np.array([0.42, 0.06, 0.04]),
    "hard_exudate": np.array([1.00, 0.95, 0.30]),
    "soft_exudate": np.array([0.96, 0.92, 0.84]),
    "neovascularization": np.array([1.00, 0.80, 0.95]),
    "irma": np.array([0.18, 0.02, 0.55]),
}
NOISE_STD = 0.012


class LesionError(ValueError):
    pass


@dataclass(frozen=True)
class LesionSpec:
    kind: str
    center: tuple[float, float]
    radius: float
    intensity: float = 1.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise LesionError(f"unknown lesion kind {self.kind!r}")
        r, c = self.center
        if (r - CENTER[0]) ** 2 + (c - CENTER[1]) ** 2 > DISC_RADIUS**2:
            raise LesionError(f"{self.kind} at {self.center} lies outside the fundus disc")
        lo, hi = RADIUS_BOUNDS[self.kind]
        if not lo <= self.radius <= hi:
            raise LesionError(f"{self.kind} radius {self.radius} outside [{lo}, {hi}]")
        if not 0.0 <= self.intensity <= 1.0:
            raise LesionError(f"intensity {self.intensity} outside [0, 1]")

    def to_json(self) -> dict:
        return {"kind": self.kind, "center": [float(self.center[0]), float(self.center[1])],
                "radius": float(self.radius), "intensity": float(self.intensity)}

    @classmethod
    def from_json(cls, d: dict) -> "LesionSpec":
        return cls(d["kind"], (float(d["center"][0]), float(d["center"][1])), float(d["radius"]),
                   float(d["intensity"]))


@dataclass
class GradingThresholds:
    severe_hemorrhages: int = 20
    severe_soft_exudates: int = 4


@dataclass
class FundusSample:
    id: str
    image: np.ndarray
    grade: int
    concepts: tuple[bool, ...]
    lesions: list[LesionSpec]
    seed: int
    split: str = ""


# -- labels ---------------------------------------------------------------
def grade_from_lesions(lesions, thresholds: GradingThresholds | None = None) -> int:
    th = thresholds or GradingThresholds()
    n = Counter(l.kind for l in lesions)
    if n["neovascularization"]:
        return 4
    if n["hemorrhage"] >= th.severe_hemorrhages or n["irma"] or n["soft_exudate"] >= th.severe_soft_exudates:
        return 3
    if n["hemorrhage"] or n["hard_exudate"] or n["soft_exudate"]:
        return 2
    if n["microaneurysm"]:
        return 1
    return 0


def concepts_from_lesions(lesions) -> tuple[bool, ...]:
    present = {l.kind for l in lesions}
    return tuple(k in present for k in KINDS)


# -- rendering ------------------------------------------------------------
_rr, _cc = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)


def disc_mask() -> np.ndarray:
    return (_rr - CENTER[0]) ** 2 + (_cc - CENTER[1]) ** 2 <= DISC_RADIUS**2


def _line_points(r0, c0, r1, c1):
    n = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    t = np.linspace(0.0, 1.0, n)
    return np.rint(r0 + t * (r1 - r0)).astype(int), np.rint(c0 + t * (c1 - c0)).astype(int)


def _clip_idx(rows, cols):
    keep = (rows >= 0) & (rows < SIDE) & (cols >= 0) & (cols < SIDE)
    return rows[keep], cols[keep]


def _filament_pixels(lesion: LesionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Three-branch tuft for neovascularization; shape fixed by centre so masks are seed-free."""
    r0, c0 = lesion.center
    length = lesion.radius
    rows, cols = [], []
    for k in range(3):
        ang = 2.0 * np.pi * k / 3 + 0.4
        r1, c1 = r0 + length * np.sin(ang), c0 + length * np.cos(ang)
        a, b = _line_points(r0, c0, r1, c1)
        rows.append(a)
        cols.append(b)
        # side twig from the branch midpoint
        rm, cm = (r0 + r1) / 2, (c0 + c1) / 2
        a, b = _line_points(rm, cm, rm + 0.4 * length * np.sin(ang + 0.9), cm + 0.4 * length * np.cos(ang + 0.9))
        rows.append(a)
        cols.append(b)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    # two pixels wide
    return _clip_idx(np.concatenate([rows, rows]), np.concatenate([cols, cols + 1]))


def _squiggle_pixels(lesion: LesionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Short zig-zag for IRMA spanning roughly 2*radius pixels horizontally."""
    r0, c0 = lesion.center
    span = lesion.radius
    n = int(2 * span) + 1
    cols = np.rint(np.linspace(c0 - span, c0 + span, n)).astype(int)
    rows = np.rint(r0 + 1.5 * np.sin(np.arange(n) * 1.7)).astype(int)
    # thicken to two pixels so the stroke survives noise
    rows = np.concatenate([rows, rows + 1])
    cols = np.concatenate([cols, cols])
    return _clip_idx(rows, cols)


def lesion_alpha(lesion: LesionSpec) -> np.ndarray:
    """Per-pixel blend weight in [0, 1] of one lesion over the background."""
    alpha = np.zeros((SIDE, SIDE))
    r0, c0 = lesion.center
    d2 = (_rr - r0) ** 2 + (_cc - c0) ** 2
    if lesion.kind in ("microaneurysm", "hemorrhage", "hard_exudate"):
        alpha[d2 <= lesion.radius**2 + 0.5] = 1.0
    elif lesion.kind == "soft_exudate":
        a = np.exp(-d2 / (2 * (0.6 * lesion.radius) ** 2))
        a[d2 > (lesion.radius + 1) ** 2] = 0.0
        alpha = np.where(a > 0.05, a, 0.0)
    elif lesion.kind == "neovascularization":
        rows, cols = _filament_pixels(lesion)
        alpha[rows, cols] = 1.0
    else:
        rows, cols = _squiggle_pixels(lesion)
        alpha[rows, cols] = 1.0
    return alpha * lesion.intensity * disc_mask()


def lesion_mask(lesions) -> np.ndarray:
    mask = np.zeros((SIDE, SIDE), dtype=bool)
    for l in lesions:
        mask |= lesion_alpha(l) > 0
    return mask


def _background(rng: np.random.Generator) -> np.ndarray:
    disc = disc_mask()
    d = np.sqrt((_rr - CENTER[0]) ** 2 + (_cc - CENTER[1]) ** 2) / DISC_RADIUS
    shade = 1.0 - 0.25 * d**2
    img = _BASE[None, None, :] * shade[..., None]

    # vessel arcs leaving the optic disc
    vessel = np.zeros((SIDE, SIDE))
    for sign in (-1.0, 1.0):
        for k in range(2):
            bend = rng.uniform(0.010, 0.022) * (1 + k)
            offset = rng.uniform(-2.0, 2.0)
            cols = np.arange(4, int(OPTIC_DISC[1]) + 1)
            rows = OPTIC_DISC[0] + sign * (bend * (cols - OPTIC_DISC[1]) ** 2 + offset * (k + 1) * 0.5)
            r, c = _clip_idx(np.rint(rows).astype(int), cols)
            vessel[r, c] = np.maximum(vessel[r, c], 0.35 - 0.1 * k)
    img = img * (1.0 - vessel[..., None] * 0.5)

    od = np.exp(-((_rr - OPTIC_DISC[0]) ** 2 + (_cc - OPTIC_DISC[1]) ** 2) / (2 * OPTIC_RADIUS**2))
    img = img + od[..., None] * (np.array([0.98, 0.85, 0.55]) - img) * 0.9
    img = img * disc[..., None]
    return img


def render_image(lesions, seed: int) -> np.ndarray:
    for l in lesions:
        l.validate()
    rng = np.random.default_rng(seed)
    img = _background(rng)
    for l in lesions:
        a = lesion_alpha(l)[..., None]
        img = img * (1.0 - a) + _COLORS[l.kind][None, None, :] * a
    img = img + rng.normal(0.0, NOISE_STD, size=img.shape) * disc_mask()[..., None]
    img = np.clip(img, 0.0, 1.0)
    return np.rint(img * 255.0) / 255.0


# -- grade-conditioned lesion sampling -------------------------------------
def _sample_lesion(kind: str, rng: np.random.Generator) -> LesionSpec:
    rad = np.sqrt(rng.uniform(0.0, 1.0)) * LESION_FIELD_RADIUS
    ang = rng.uniform(0.0, 2 * np.pi)
    center = (round(CENTER[0] + rad * np.sin(ang), 2), round(CENTER[1] + rad * np.cos(ang), 2))
    lo, hi = RADIUS_BOUNDS[kind]
    radius = float(rng.integers(lo, hi + 1))
    return LesionSpec(kind, center, radius, round(float(rng.uniform(0.85, 1.0)), 3))


def _propose(grade: int, rng: np.random.Generator, th: GradingThresholds) -> list[LesionSpec]:
    counts = Counter()
    if grade == 1:
        counts["microaneurysm"] = int(rng.integers(3, 8))
    elif grade >= 2:
        if rng.random() < 0.5:
            counts["microaneurysm"] = int(rng.integers(2, 7))
        mild = ["hemorrhage", "hard_exudate", "soft_exudate"]
        # at least one moderate-level lesion kind
        chosen = [k for k in mild if rng.random() < 0.5] or [mild[int(rng.integers(0, 3))]]
        for k in chosen:
            counts[k] = int(rng.integers(1, 5)) if k != "soft_exudate" else int(rng.integers(1, th.severe_soft_exudates - 1))
        if grade == 2 and counts["hemorrhage"]:
            counts["hemorrhage"] = min(counts["hemorrhage"], 6)
    if grade == 3 or (grade == 4 and rng.random() < 0.3):
        trigger = ("hemorrhage", "irma", "soft_exudate")[int(rng.integers(0, 3))]
        if trigger == "hemorrhage":
            counts["hemorrhage"] = int(rng.integers(th.severe_hemorrhages, th.severe_hemorrhages + 7))
        elif trigger == "irma":
            counts["irma"] = int(rng.integers(1, 4))
        else:
            counts["soft_exudate"] = int(rng.integers(th.severe_soft_exudates, th.severe_soft_exudates + 3))
    if grade >= 3 and not counts["irma"] and rng.random() < 0.35:
        counts["irma"] = int(rng.integers(1, 3))
    if grade == 4:
        counts["neovascularization"] = int(rng.integers(1, 3))
    return [_sample_lesion(k, rng) for k in KINDS for _ in range(counts[k])]


def sample_lesions(grade: int, rng: np.random.Generator, thresholds: GradingThresholds | None = None,
                   max_tries: int = 1000) -> list[LesionSpec]:
    th = thresholds or GradingThresholds()
    if grade not in range(5):
        raise ValueError(f"grade {grade} outside 0-4")
    if th.severe_soft_exudates < 3 or th.severe_hemorrhages < 2:
        raise ValueError("thresholds leave no room for a moderate recipe: need severe_soft_exudates >= 3 "
                         "and severe_hemorrhages >= 2")
    for _ in range(max_tries):
        lesions = _propose(grade, rng, th)
        if grade_from_lesions(lesions, th) == grade:
            return lesions
    raise RuntimeError(f"rejection sampling found no lesion set for grade {grade} in {max_tries} tries")


# -- dataset --------------------------------------------------------------
@dataclass
class DatasetConfig:
    counts: tuple[int, ...] = (10, 10, 10, 10, 10)
    seed: int = 7
    thresholds: GradingThresholds = field(default_factory=GradingThresholds)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def make_sample(index: int, grade: int, config: DatasetConfig) -> FundusSample:
    s = sample_seed(config.seed, index)
    rng = np.random.default_rng(s)
    lesions = sample_lesions(grade, rng, config.thresholds)
    image = render_image(lesions, s)
    return FundusSample(id=f"s{index:05d}", image=image, grade=grade, concepts=concepts_from_lesions(lesions),
                        lesions=lesions, seed=s)


def build_samples(config: DatasetConfig, workers: int = 1) -> list[FundusSample]:
    if len(config.counts) != 5 or any(c < 0 for c in config.counts):
        raise ValueError(f"counts must be five non-negative integers, got {config.counts}")
    jobs = [(i, g) for i, g in enumerate(g for g, n in enumerate(config.counts) for _ in range(n))]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(make_sample, [i for i, _ in jobs], [g for _, g in jobs], [config] * len(jobs)))
    return [make_sample(i, g, config) for i, g in jobs]


def write_ppm(path, image: np.ndarray) -> None:
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pix = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / maxval


def sample_record(s: FundusSample, image_path: str) -> dict:
    return {"id": s.id, "image": image_path, "grade": s.grade, "concepts": [bool(c) for c in s.concepts],
            "lesions": [l.to_json() for l in s.lesions], "split": s.split}


@dataclass
class DatasetManifest:
    records: list[dict]
    seed: int
    root: Path | None = None

    @property
    def counts_per_grade(self) -> list[int]:
        c = Counter(r["grade"] for r in self.records)
        return [c[g] for g in range(5)]

    def write(self, path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path, seed: int = 0) -> "DatasetManifest":
        path = Path(path)
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        return cls(recs, seed, path.parent)

    def validate(self) -> None:
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in manifest")
        for r in self.records:
            if self.root is not None and not (self.root / r["image"]).exists():
                raise FileNotFoundError(f"missing image {r['image']} for {r['id']}")
            lesions = [LesionSpec.from_json(d) for d in r["lesions"]]
            if grade_from_lesions(lesions) != r["grade"] or list(concepts_from_lesions(lesions)) != r["concepts"]:
                raise ValueError(f"label inconsistency in record {r['id']}")

    def samples(self) -> list[FundusSample]:
        out = []
        for r in self.records:
            img = read_ppm(self.root / r["image"]) if self.root is not None else None
            out.append(FundusSample(r["id"], img, r["grade"], tuple(r["concepts"]),
                                    [LesionSpec.from_json(d) for d in r["lesions"]], 0, r.get("split", "")))
        return out


def generate_dataset(config: DatasetConfig, out_dir, workers: int = 1) -> tuple[DatasetManifest, list[FundusSample]]:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    samples = build_samples(config, workers)
    records = []
    for s in samples:
        rel = f"images/{s.id}.ppm"
        write_ppm(out_dir / rel, s.image)
        records.append(sample_record(s, rel))
    manifest = DatasetManifest(records, config.seed, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest, samples


# -- splitting ------------------------------------------------------------
SPLIT_NAMES = ("train", "val", "test")


def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    raw = [n * r for r in ratios]
    base = [int(np.floor(x + 1e-9)) for x in raw]
    rest = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def split(records: list[dict], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> list[dict]:
    """Stratified-by-grade assignment of a split tag to every record (returns new dicts)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    active = sum(r > 0 for r in ratios)
    out = [dict(r) for r in records]
    by_grade: dict[int, list[int]] = {}
    for i, r in enumerate(out):
        by_grade.setdefault(r["grade"], []).append(i)
    rng = np.random.default_rng(seed)
    for g in sorted(by_grade):
        idx = by_grade[g]
        if len(idx) < active:
            raise ValueError(f"grade {g} stratum has {len(idx)} samples, fewer than {active} splits")
        perm = rng.permutation(len(idx))
        cuts = np.cumsum([0] + split_counts(len(idx), ratios))
        for s, lo, hi in zip(SPLIT_NAMES, cuts[:-1], cuts[1:]):
            for j in perm[lo:hi]:
                out[idx[j]]["split"] = s
    return out


def to_dict(cfg: DatasetConfig) -> dict:
    return asdict(cfg)
