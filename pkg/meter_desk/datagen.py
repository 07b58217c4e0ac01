"""Synthetic image-caption corpus, toy vocabulary and the k-means patch codebook.

Scenes are 1-3 coloured shapes on a 4x4 layout grid. Captions follow a closed
grammar over the objects in reading order:

    caption  := object (relation object)*
    object   := "a" COLOR SHAPE
    relation := "left of" | "above"

"left of" joins two objects on the same layout row, "above" an object with one
on a later row. ``parse_caption`` inverts the grammar back to the description
(ordered attribute chain) the caption was produced from.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus
from tqdm import tqdm

from meter_desk import settings
from meter_desk.exceptions import CodebookError, DataError, VocabularyError
from meter_desk.items import PairRecord, QuestionAnswer, Scene, SceneObject

logger = logging.getLogger(__name__)

RELATION_SAME_ROW = "left of"
RELATION_NEXT_ROW = "above"
ANSWER_VOCAB = tuple(sorted(settings.COLORS + settings.SHAPES + settings.COUNT_WORDS))

QUESTION_TEMPLATES = {
    "color": "what color is the {shape}",
    "shape": "what shape is the {color} object",
    "count": "how many objects are there",
}


# --- Scenes and captions ---

def make_scene(seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, settings.MAX_OBJECTS + 1))
    cells = np.sort(rng.choice(settings.LAYOUT_GRID ** 2, size=count, replace=False))
    shapes = rng.integers(0, len(settings.SHAPES), size=count)
    colors = rng.integers(0, len(settings.COLORS), size=count)
    objects = tuple(
        SceneObject(
            shape=settings.SHAPES[int(s)],
            color=settings.COLORS[int(c)],
            cell=(int(cell) // settings.LAYOUT_GRID, int(cell) % settings.LAYOUT_GRID),
        )
        for cell, s, c in zip(cells, shapes, colors)
    )
    return Scene(objects=objects, seed=int(seed))


def describe_scene(scene: Scene) -> tuple:
    """The caption semantics: ((color, shape), relation, (color, shape), ...)."""
    parts = []
    for i, obj in enumerate(scene.objects):
        if i:
            prev = scene.objects[i - 1]
            parts.append(RELATION_SAME_ROW if prev.cell[0] == obj.cell[0] else RELATION_NEXT_ROW)
        parts.append((obj.color, obj.shape))
    return tuple(parts)


def caption_from_description(description: tuple) -> str:
    words = []
    for part in description:
        if isinstance(part, tuple):
            words.extend(["a", part[0], part[1]])
        else:
            words.append(part)
    return " ".join(words)


def scene_caption(scene: Scene) -> str:
    return caption_from_description(describe_scene(scene))


def parse_caption(caption: str) -> tuple:
    """Inverse of ``caption_from_description``; raises DataError on text outside the grammar."""
    words = caption.lower().split()
    parts = []
    i = 0

    def take_object(pos):
        if pos + 3 > len(words) or words[pos] != "a" or words[pos + 1] not in settings.COLORS \
                or words[pos + 2] not in settings.SHAPES:
            raise DataError(f"caption not in grammar at word {pos}: '{caption}'")
        return (words[pos + 1], words[pos + 2]), pos + 3

    obj, i = take_object(i)
    parts.append(obj)
    while i < len(words):
        if words[i:i + 2] == RELATION_SAME_ROW.split():
            parts.append(RELATION_SAME_ROW)
            i += 2
        elif words[i] == RELATION_NEXT_ROW:
            parts.append(RELATION_NEXT_ROW)
            i += 1
        else:
            raise DataError(f"unknown relation at word {i}: '{caption}'")
        obj, i = take_object(i)
        parts.append(obj)
    return tuple(parts)


def make_question(scene: Scene) -> QuestionAnswer:
    """Pick a question type among those answerable without ambiguity."""
    rng = np.random.default_rng([scene.seed, 1])
    shape_counts = {s: sum(o.shape == s for o in scene.objects) for s in settings.SHAPES}
    color_counts = {c: sum(o.color == c for o in scene.objects) for c in settings.COLORS}
    kinds = ["count"]
    if any(shape_counts[o.shape] == 1 for o in scene.objects):
        kinds.append("color")
    if any(color_counts[o.color] == 1 for o in scene.objects):
        kinds.append("shape")
    kind = kinds[int(rng.integers(0, len(kinds)))]
    if kind == "count":
        answer = settings.COUNT_WORDS[len(scene.objects) - 1]
        question = QUESTION_TEMPLATES["count"]
    elif kind == "color":
        target = next(o for o in scene.objects if shape_counts[o.shape] == 1)
        answer = target.color
        question = QUESTION_TEMPLATES["color"].format(shape=target.shape)
    else:
        target = next(o for o in scene.objects if color_counts[o.color] == 1)
        answer = target.shape
        question = QUESTION_TEMPLATES["shape"].format(color=target.color)
    return QuestionAnswer(question=question, answer_id=ANSWER_VOCAB.index(answer))


def grammar_terminals() -> set:
    """Every word the caption and question grammars can emit."""
    words = {"a"} | set(RELATION_SAME_ROW.split()) | {RELATION_NEXT_ROW}
    words |= set(settings.COLORS) | set(settings.SHAPES)
    for template in QUESTION_TEMPLATES.values():
        words |= {w for w in template.split() if not w.startswith("{")}
    return words


# --- Rendering ---

def _shape_mask(shape: str, cell: int) -> np.ndarray:
    margin = max(1, cell // 8)
    ys, xs = np.mgrid[0:cell, 0:cell]
    inside = (ys >= margin) & (ys < cell - margin) & (xs >= margin) & (xs < cell - margin)
    centre = cell / 2.0
    if shape == "square":
        return inside
    if shape == "circle":
        radius = centre - margin
        return ((ys + 0.5 - centre) ** 2 + (xs + 0.5 - centre) ** 2) <= radius ** 2
    if shape == "triangle":
        height = cell - 2 * margin
        half_width = (ys - margin + 0.5) * (centre - margin) / height
        return inside & (np.abs(xs + 0.5 - centre) <= half_width)
    raise DataError(f"unknown shape '{shape}'")


def render_scene(scene: Scene, resolution: int) -> np.ndarray:
    if resolution not in settings.SUPPORTED_RESOLUTIONS:
        raise DataError(f"unsupported resolution {resolution}; expected one of {settings.SUPPORTED_RESOLUTIONS}")
    cell = resolution // settings.LAYOUT_GRID
    image = np.zeros((resolution, resolution, 3), dtype=np.float64)
    for obj in scene.objects:
        mask = _shape_mask(obj.shape, cell)
        r0, c0 = obj.cell[0] * cell, obj.cell[1] * cell
        region = image[r0:r0 + cell, c0:c0 + cell]
        region[mask] = settings.COLOR_RGB[obj.color]
    return image


def generate_pair(seed: int, resolution: int, with_qa: bool = False) -> PairRecord:
    scene = make_scene(seed)
    image = render_scene(scene, resolution)
    qa = make_question(scene) if with_qa else None
    return PairRecord(id=int(seed), image=image, caption=scene_caption(scene), qa=qa, scene=scene)


def corpus_seeds(seed: int, size: int) -> list:
    state = np.random.SeedSequence(seed).generate_state(size, dtype=np.uint64)
    return [int(s) for s in state]


def generate_corpus(seed: int, size: int, resolution: int, with_qa: bool = False) -> list:
    logger.info(f"Generating {size} pairs at {resolution}x{resolution} (seed {seed})...")
    seeds = corpus_seeds(seed, size)
    return [generate_pair(s, resolution, with_qa) for s in tqdm(seeds, desc="Rendering scenes", disable=size < 256)]


# --- Vocabulary ---

class Vocabulary:
    """Bijective token <-> id table: specials, then sentinels, then sorted words."""

    def __init__(self, words):
        sentinels = [f"<extra_{i}>" for i in range(settings.NUM_SENTINELS)]
        self.tokens = list(settings.SPECIAL_TOKENS) + sentinels + list(words)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabularyError(f"unknown token '{token}'") from None

    def token_of(self, token_id: int) -> str:
        return self.tokens[int(token_id)]

    def sentinel_id(self, i: int) -> int:
        if not 0 <= i < settings.NUM_SENTINELS:
            raise VocabularyError(f"sentinel index {i} out of range")
        return settings.SENTINEL_OFFSET + i

    def is_sentinel(self, token_id: int) -> bool:
        return settings.SENTINEL_OFFSET <= int(token_id) < settings.FIRST_WORD_ID

    @property
    def word_ids(self) -> range:
        return range(settings.FIRST_WORD_ID, len(self.tokens))

    def to_json(self) -> dict:
        return {"words": self.tokens[settings.FIRST_WORD_ID:]}

    @classmethod
    def from_json(cls, payload: dict) -> "Vocabulary":
        return cls(payload["words"])


def build_vocab(corpus) -> Vocabulary:
    words = set()
    seen_any = False
    for text in corpus:
        seen_any = True
        words.update(text.lower().split())
    if not seen_any:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    words -= set(settings.SPECIAL_TOKENS)
    return Vocabulary(sorted(words))


def encode_text(caption: str, vocab: Vocabulary, max_len: int):
    """[CLS] t1..tn [SEP] padded with [PAD]; returns (ids, attention mask)."""
    words = caption.lower().split()
    if len(words) + 2 > max_len:
        raise VocabularyError(f"'{caption}' needs {len(words) + 2} positions, max_len is {max_len}")
    ids = np.full(max_len, settings.PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=np.int64)
    body = [vocab.id_of(w) for w in words]
    ids[0] = settings.CLS_ID
    ids[1:1 + len(body)] = body
    ids[1 + len(body)] = settings.SEP_ID
    mask[:len(body) + 2] = 1
    return ids, mask


def decode_text(ids, vocab: Vocabulary) -> str:
    skip = {settings.PAD_ID, settings.CLS_ID, settings.SEP_ID}
    return " ".join(vocab.token_of(i) for i in ids if int(i) not in skip)


# --- Patches and codebook ---

def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Row-major patches of ``image`` (H x W x 3), each flattened in (row, col, channel) order."""
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise DataError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    grid = image.reshape(gh, patch_size, gw, patch_size, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(gh * gw, patch_size * patch_size * c)


@dataclass
class Codebook:
    centroids: np.ndarray
    k: int
    fit_seed: int
    objective_history: list = field(default_factory=list)

    @property
    def patch_dim(self) -> int:
        return self.centroids.shape[1]


def fit_codebook(patches, k: int, seed: int, iters: int = 20) -> Codebook:
    """Lloyd's k-means with seeded k-means++ initialisation and a fixed iteration count.

    An empty cluster is re-seeded at the point farthest from its assigned centroid
    (ties to the lowest index); several empties take successive farthest points.
    ``objective_history`` holds the sum of squared distances at every assignment step.
    """
    x = np.asarray(patches, dtype=np.float64)
    if k < 2:
        raise CodebookError(f"codebook needs K >= 2, got {k}")
    if x.shape[0] < k:
        raise CodebookError(f"sample of {x.shape[0]} patches is smaller than K={k}")
    centroids, _ = kmeans_plusplus(x, n_clusters=k, random_state=seed)
    centroids = np.array(centroids, dtype=np.float64)
    rows = np.arange(x.shape[0])
    history = []
    for _ in range(iters):
        dist = cdist(x, centroids, "sqeuclidean")
        labels = dist.argmin(axis=1)
        nearest = dist[rows, labels]
        history.append(float(nearest.sum()))
        counts = np.bincount(labels, minlength=k)
        updated = centroids.copy()
        for j in np.nonzero(counts)[0]:
            updated[j] = x[labels == j].mean(axis=0)
        empty = np.nonzero(counts == 0)[0]
        if empty.size:
            farthest = np.argsort(-nearest, kind="stable")
            for j, idx in zip(empty, farthest):
                logger.warning(f"Empty cluster {j}; re-seeding at patch {idx}")
                updated[j] = x[idx]
        centroids = updated
    dist = cdist(x, centroids, "sqeuclidean")
    history.append(float(dist.min(axis=1).sum()))
    if not np.isfinite(centroids).all():
        raise CodebookError("codebook fit produced non-finite centroids")
    return Codebook(centroids=centroids, k=k, fit_seed=seed, objective_history=history)


def quantize_patches(patch_vectors, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid code per patch; ties go to the lowest index."""
    x = np.asarray(patch_vectors, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    if flat.shape[1] != codebook.patch_dim:
        raise CodebookError(f"patch length {flat.shape[1]} does not match centroid length {codebook.patch_dim}")
    codes = cdist(flat, codebook.centroids, "sqeuclidean").argmin(axis=1)
    return codes.reshape(x.shape[:-1])


def save_codebook(codebook: Codebook, filepath: str):
    np.savez(filepath, centroids=codebook.centroids, k=codebook.k, fit_seed=codebook.fit_seed,
             objective_history=np.array(codebook.objective_history))
    logger.info(f"Successfully saved codebook to '{filepath}'")


def load_codebook(filepath: str) -> Codebook:
    with np.load(filepath) as payload:
        return Codebook(
            centroids=payload["centroids"],
            k=int(payload["k"]),
            fit_seed=int(payload["fit_seed"]),
            objective_history=payload["objective_history"].tolist(),
        )


# --- Image files and manifest ---

def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(filepath: str, image: np.ndarray):
    h, w, _ = image.shape
    with open(filepath, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_bytes(image).tobytes())


def write_pgm(filepath: str, pixels: np.ndarray):
    h, w = pixels.shape
    with open(filepath, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.asarray(pixels, dtype=np.uint8).tobytes())


def _read_netpbm(filepath: str, magic: bytes, channels: int) -> np.ndarray:
    with open(filepath, "rb") as f:
        payload = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(payload) and payload[pos:pos + 1].isspace():
            pos += 1
        if payload[pos:pos + 1] == b"#":
            pos = payload.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated header in '{filepath}'")
        fields.append(payload[start:pos])
    pos += 1
    if fields[0] != magic or fields[3] != b"255":
        raise DataError(f"'{filepath}' is not an 8-bit {magic.decode()} file")
    w, h = int(fields[1]), int(fields[2])
    body = payload[pos:pos + w * h * channels]
    if len(body) != w * h * channels:
        raise DataError(f"truncated pixel data in '{filepath}'")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def read_ppm(filepath: str) -> np.ndarray:
    return _read_netpbm(filepath, b"P6", 3).astype(np.float64) / 255.0


def read_pgm(filepath: str) -> np.ndarray:
    return _read_netpbm(filepath, b"P5", 1)


def write_manifest(records, out_dir: str) -> str:
    image_dir = os.path.join(out_dir, settings.IMAGE_DIR_NAME)
    os.makedirs(image_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, settings.MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as f:
        for record in records:
            rel_path = os.path.join(settings.IMAGE_DIR_NAME, f"{record.id}.ppm")
            write_ppm(os.path.join(out_dir, rel_path), record.image)
            row = {"id": record.id, "image_path": rel_path, "caption": record.caption}
            if record.qa is not None:
                row["question"] = record.qa.question
                row["answer_id"] = record.qa.answer_id
            f.write(json.dumps(row) + "\n")
    logger.info(f"Successfully saved {len(records)} pairs to '{manifest_path}'")
    return manifest_path


def read_manifest(manifest_path: str) -> list:
    logger.info(f"Loading pairs from '{manifest_path}'...")
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    base = os.path.dirname(manifest_path)
    records = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                logger.warning(f"Could not decode JSON on line {lineno} of {manifest_path}")
                continue
            try:
                qa = None
                if "question" in row:
                    qa = QuestionAnswer(question=row["question"], answer_id=int(row["answer_id"]))
                image = read_ppm(os.path.join(base, row["image_path"]))
                records.append(PairRecord(id=int(row["id"]), image=image, caption=row["caption"], qa=qa))
            except (KeyError, TypeError, ValueError, OSError, DataError) as e:
                logger.warning(f"Skipping line {lineno} of {manifest_path}: {e!r}")
    logger.info(f"Successfully loaded {len(records)} pairs.")
    return records


def save_json(data, filepath: str):
    """Saves data to a JSON file with logging."""
    try:
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
        logger.info(f"Successfully saved data to '{filepath}'")
    except OSError as e:
        logger.error(f"Failed to save data to '{filepath}': {e}")
        raise


def load_json(filepath: str):
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)
