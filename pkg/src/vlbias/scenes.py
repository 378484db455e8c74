"""Synthetic corpora with planted gender/object co-occurrence, and external result ingestion."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import DEFAULT_CATEGORIES, DEFAULT_INDOOR, DEFAULT_OUTDOOR, MAN, PERSON, WOMAN, SceneInput, TextInput

MALE, FEMALE, NONE, EXCLUDED = "male", "female", "none", "excluded"

MALE_WORDS = ("male", "males", "man", "men", "boy", "boys")
FEMALE_WORDS = ("female", "females", "woman", "women", "girl", "girls")
_MALE_RE = re.compile(r"\b(?:%s)\b" % "|".join(MALE_WORDS), re.IGNORECASE)
_FEMALE_RE = re.compile(r"\b(?:%s)\b" % "|".join(FEMALE_WORDS), re.IGNORECASE)


@dataclass(frozen=True)
class GenConfig:
    n_images: int = 2000
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    indoor: tuple[str, ...] = DEFAULT_INDOOR
    outdoor: tuple[str, ...] = DEFAULT_OUTDOOR
    cooccur_skew: float = 0.6
    person_rate: float = 1.0
    gender_balance: float = 0.5
    min_objects: int = 1
    max_objects: int = 3
    appearance_noise: float = 0.1
    grid: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("categories", "indoor", "outdoor"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.categories:
            raise ValueError("empty category list")
        if set(self.indoor) & set(self.outdoor):
            raise ValueError("indoor and outdoor sets overlap")
        unknown = (set(self.indoor) | set(self.outdoor)) - set(self.categories)
        if unknown:
            raise ValueError(f"indoor/outdoor names not in categories: {sorted(unknown)}")
        for name in ("cooccur_skew", "person_rate", "gender_balance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_images < 1:
            raise ValueError("n_images must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.max_objects + 1 > self.grid * self.grid:
            raise ValueError("too many objects for the grid")
        if self.appearance_noise < 0:
            raise ValueError("appearance_noise must be nonnegative")


@dataclass(frozen=True)
class LabeledSample:
    scene: SceneInput
    text: TextInput
    truth: frozenset[str]
    gender: str


def person_appearance(n_categories: int) -> np.ndarray:
    """Appearance of a gender-neutral person: the one-hot after the category block."""
    v = np.zeros(n_categories + 1)
    v[n_categories] = 1.0
    return v


def generate(cfg: GenConfig) -> list[LabeledSample]:
    """Generate ``cfg.n_images`` labelled scenes, deterministically from ``cfg.seed``.

    Each object slot draws from the indoor group with probability
    ``(1 + skew) / 2`` in female scenes, ``(1 - skew) / 2`` in male scenes and
    ``1/2`` otherwise (outdoor otherwise); categories in neither group are drawn
    with their share of the category list. Object cells get a one-hot
    appearance plus Gaussian noise; the person cell gets the noise-free
    neutral person appearance.
    """
    rng = np.random.default_rng(cfg.seed)
    K = len(cfg.categories)
    cat_index = {c: i for i, c in enumerate(cfg.categories)}
    neutral = tuple(c for c in cfg.categories if c not in cfg.indoor and c not in cfg.outdoor)
    n_cells = cfg.grid * cfg.grid
    p_neutral = len(neutral) / K

    samples = []
    for _ in range(cfg.n_images):
        has_person = rng.random() < cfg.person_rate
        gender = NONE
        if has_person:
            gender = MALE if rng.random() < cfg.gender_balance else FEMALE
        q_indoor = 0.5 + 0.5 * cfg.cooccur_skew * (gender == FEMALE) - 0.5 * cfg.cooccur_skew * (gender == MALE)
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objs = []
        for _ in range(n_obj):
            if neutral and rng.random() < p_neutral:
                group = neutral
            else:
                group = cfg.indoor if rng.random() < q_indoor else cfg.outdoor
                if not group:
                    group = cfg.outdoor or cfg.indoor or neutral
            objs.append(group[int(rng.integers(len(group)))])
        slots = rng.permutation(n_cells)[: n_obj + has_person]
        cells: list[Optional[str]] = [None] * n_cells
        for s, o in zip(slots, objs):
            cells[s] = o
        appearance = rng.normal(0.0, cfg.appearance_noise, size=(n_cells, K + 1))
        for i, c in enumerate(cells):
            if c is not None:
                appearance[i, cat_index[c]] += 1.0
        gc = np.zeros(n_cells)
        word = None
        if has_person:
            p = int(slots[n_obj])
            cells[p] = PERSON
            appearance[p] = person_appearance(K)
            gc[p] = 1.0 if gender == MALE else -1.0
            word = MAN if gender == MALE else WOMAN
        scene = SceneInput(tuple(cells), gc, appearance)
        samples.append(LabeledSample(scene, TextInput.prompt(cfg.categories, word), frozenset(objs), gender))
    return samples


def label_gender_from_captions(captions: Iterable[str]) -> str:
    """``male``/``female`` from gender keywords; ``excluded`` when both or neither appear.

    Matching is case-insensitive on word boundaries ("mango" is not "man").
    """
    male = female = False
    for cap in captions:
        male = male or bool(_MALE_RE.search(cap))
        female = female or bool(_FEMALE_RE.search(cap))
    if male == female:
        return EXCLUDED
    return MALE if male else FEMALE


def frequent_categories(records: Iterable[tuple[Iterable[str], str]], min_count: int = 100) -> list[str]:
    """Categories present in more than ``min_count`` gendered images.

    ``records`` yields ``(categories present, gender)`` pairs; only male and
    female images count. Output is sorted by name.
    """
    counts: Counter = Counter()
    for cats, gender in records:
        if gender in (MALE, FEMALE):
            counts.update(set(cats))
    return sorted(c for c, n in counts.items() if n > min_count)


# ------------------------------------------------------------------ ingestion


class IngestError(ValueError):
    def __init__(self, message: str, source: str = "", record=None):
        super().__init__(f"{source}: {message}" if source else message)
        self.source = source
        self.record = record


@dataclass
class ImageRecord:
    image_id: int
    gender: str
    truth: frozenset[str]
    predictions: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class ExternalDetections:
    categories: tuple[str, ...]
    images: list[ImageRecord]
    dropped: list[int] = field(default_factory=list)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Image-level score matrix (max score per category, 0 if absent), truth matrix, genders."""
        idx = {c: i for i, c in enumerate(self.categories)}
        scores = np.zeros((len(self.images), len(self.categories)))
        truth = np.zeros_like(scores, dtype=bool)
        for r, rec in enumerate(self.images):
            for c in rec.truth:
                truth[r, idx[c]] = True
            for c, s in rec.predictions:
                scores[r, idx[c]] = max(scores[r, idx[c]], s)
        return scores, truth, [rec.gender for rec in self.images]


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"invalid JSON ({exc})", str(path)) from None
    except OSError as exc:
        raise IngestError(f"cannot read {what} ({exc})", str(path)) from None


def read_gender_file(path) -> dict[int, str]:
    """Two-column text (``image_id gender``), whitespace or comma separated, ``#`` comments."""
    out: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\s]+", line) if p]
        if parts == ["image_id", "gender"]:
            continue
        if len(parts) != 2:
            raise IngestError(f"line {lineno}: expected two columns", str(path), line)
        try:
            image_id = int(parts[0])
        except ValueError:
            raise IngestError(f"line {lineno}: image id {parts[0]!r} is not an integer", str(path), line) from None
        gender = parts[1].lower()
        if gender not in (MALE, FEMALE, EXCLUDED, NONE):
            raise IngestError(f"line {lineno}: unknown gender label {parts[1]!r}", str(path), line)
        if image_id in out:
            raise IngestError(f"duplicate image id {image_id}", str(path), line)
        out[image_id] = gender
    return out


def read_caption_genders(path) -> dict[int, str]:
    """Gender labels from a COCO captions file (``annotations: [{image_id, caption}]``)."""
    data = _load_json(path, "captions")
    caps: dict[int, list[str]] = {}
    for ann in data.get("annotations", []):
        caps.setdefault(int(ann["image_id"]), []).append(str(ann["caption"]))
    return {i: label_gender_from_captions(c) for i, c in caps.items()}


def ingest_external(
    results_file,
    annotations_file,
    gender_file=None,
    captions_file=None,
) -> ExternalDetections:
    """Join COCO-style detections, annotations and gender labels per image.

    Images whose gender is excluded/none (or missing from the label source)
    are dropped and listed in ``dropped``. Records are ordered by image id.
    """
    if (gender_file is None) == (captions_file is None):
        raise IngestError("give exactly one of a gender file or a captions file")
    ann = _load_json(annotations_file, "annotations")
    src = str(annotations_file)
    cat_names: dict[int, str] = {}
    for c in ann.get("categories", []):
        cid = int(c["id"])
        if cid in cat_names:
            raise IngestError(f"duplicate category id {cid}", src, c)
        cat_names[cid] = str(c["name"])
    images: dict[int, set[str]] = {}
    for im in ann.get("images", []):
        iid = int(im["id"])
        if iid in images:
            raise IngestError(f"duplicate image id {iid}", src, im)
        images[iid] = set()
    for a in ann.get("annotations", []):
        iid, cid = int(a["image_id"]), int(a["category_id"])
        if cid not in cat_names:
            raise IngestError(f"annotation references undeclared category id {cid}", src, a)
        if iid not in images:
            raise IngestError(f"annotation references unknown image id {iid}", src, a)
        images[iid].add(cat_names[cid])

    results = _load_json(results_file, "results")
    if not isinstance(results, list):
        raise IngestError("results file must hold a JSON list", str(results_file))
    preds: dict[int, list[tuple[str, float]]] = {}
    for r in results:
        iid, cid, score = int(r["image_id"]), int(r["category_id"]), float(r["score"])
        if cid not in cat_names:
            raise IngestError(f"detection references undeclared category id {cid}", str(results_file), r)
        if iid not in images:
            raise IngestError(f"detection for image {iid} has no ground truth", str(results_file), r)
        if not np.isfinite(score):
            raise IngestError(f"non-finite score for image {iid}", str(results_file), r)
        preds.setdefault(iid, []).append((cat_names[cid], score))

    if gender_file is not None:
        genders, gsrc = read_gender_file(gender_file), str(gender_file)
    else:
        genders, gsrc = read_caption_genders(captions_file), str(captions_file)
    for iid in genders:
        if iid not in images:
            raise IngestError(f"gender label for image {iid} has no ground truth", gsrc, iid)

    out, dropped = [], []
    for iid in sorted(images):
        g = genders.get(iid, EXCLUDED)
        if g not in (MALE, FEMALE):
            dropped.append(iid)
            continue
        out.append(ImageRecord(iid, g, frozenset(images[iid]), preds.get(iid, [])))
    ordered = tuple(cat_names[c] for c in sorted(cat_names))
    return ExternalDetections(ordered, out, dropped)


def write_external(det: ExternalDetections, out_dir, prefix: str = "") -> dict[str, Path]:
    """Write ``det`` as results JSON, annotations JSON and a gender TSV that re-ingest to ``det``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cid = {c: i + 1 for i, c in enumerate(det.categories)}
    ann = {
        "images": [{"id": r.image_id} for r in det.images],
        "annotations": [
            {"id": n, "image_id": r.image_id, "category_id": cid[c]}
            for n, (r, c) in enumerate(((r, c) for r in det.images for c in sorted(r.truth)), 1)
        ],
        "categories": [{"id": cid[c], "name": c} for c in det.categories],
    }
    results = [
        {"image_id": r.image_id, "category_id": cid[c], "score": s} for r in det.images for c, s in r.predictions
    ]
    paths = {
        "results": out_dir / f"{prefix}detections.json",
        "annotations": out_dir / f"{prefix}annotations.json",
        "genders": out_dir / f"{prefix}genders.tsv",
    }
    paths["results"].write_text(json.dumps(results, indent=1) + "\n")
    paths["annotations"].write_text(json.dumps(ann, indent=1) + "\n")
    paths["genders"].write_text(
        "image_id\tgender\n" + "".join(f"{r.image_id}\t{r.gender}\n" for r in det.images)
    )
    return paths


def samples_to_external(samples: Sequence[LabeledSample], scores: np.ndarray, categories: Sequence[str]) -> ExternalDetections:
    """Package model image-level scores on a generated corpus as external detections (gendered images only)."""
    recs, dropped = [], []
    for i, s in enumerate(samples):
        if s.gender not in (MALE, FEMALE):
            dropped.append(i)
            continue
        preds = [(c, float(scores[i, k])) for k, c in enumerate(categories)]
        recs.append(ImageRecord(i, s.gender, s.truth, preds))
    return ExternalDetections(tuple(categories), recs, dropped)
