"""Tokenizer, vocabulary, dataset container, statistics, synthetic data.

The synthetic corpus is the acceptance substrate: each sample draws a
subset of anatomical entities plus a per-entity finding state, renders
deterministic geometric glyphs into entity-specific canvas bands, and
renders the report from per-entity sentence templates. Report content
is therefore an exact function of the image, so the image-to-report
mapping is learnable at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from radgen.dictionary import AnatomicalDictionary

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_CLEAN = re.compile(r"[^a-z0-9-]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, map everything outside [a-z0-9-] to spaces, split."""
    return _TOKEN_CLEAN.sub(" ", text.lower()).split()


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids.

    Ids 0..3 are PAD/BOS/EOS/UNK; the rest are assigned by descending
    training-split frequency, ties broken lexicographically. Dictionary
    entity tokens are force-included regardless of frequency.
    """

    def __init__(self, tokens: list[str]):
        self._tokens = list(RESERVED_TOKENS) + list(tokens)
        if len(set(self._tokens)) != len(self._tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    @classmethod
    def from_full_tokens(cls, tokens) -> "Vocabulary":
        """Rebuild from a stored token list (reserved ids included)."""
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("token list does not start with the reserved ids")
        return cls(tokens[4:])

    @classmethod
    def build(cls, texts, min_freq: int = 3, force_include=()) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(tokenize(text))
        keep = {t for t, c in counts.items() if c >= min_freq}
        for entity in force_include:
            keep.update(tokenize(entity))
        keep -= set(RESERVED_TOKENS)
        ordered = sorted(keep, key=lambda t: (-counts[t], t))
        return cls(ordered)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def encode_report(self, text: str) -> list[int]:
        return [BOS_ID] + self.encode(tokenize(text)) + [EOS_ID]

    def decode(self, ids, strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_special and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self._tokens[i])
        return out


@dataclass
class Sample:
    sid: str
    images: list[np.ndarray]  # each [H, W, C], values in [0, 1]
    report: str
    split: str

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"sample {self.sid}: bad split tag {self.split!r}")
        if not self.report:
            raise ValueError(f"sample {self.sid}: empty report")
        if not 1 <= len(self.images) <= 2:
            raise ValueError(f"sample {self.sid}: expected 1 or 2 views")


@dataclass
class Corpus:
    samples: list[Sample]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def __len__(self):
        return len(self.samples)


def images_array(samples: list[Sample]) -> np.ndarray:
    """Stack a batch into [B, views, H, W, C]; dims must agree."""
    views = {len(s.images) for s in samples}
    if len(views) != 1:
        raise ValueError(f"mixed view counts in batch: {sorted(views)}")
    return np.stack([np.stack(s.images) for s in samples])


# synthetic corpus ---------------------------------------------------------

# entity -> (normal finding sentence, abnormal finding sentence); each
# sentence contains its own entity token and no other entity's token.
TEMPLATES: dict[str, tuple[str, str]] = {
    "pneumothorax": (
        "no pneumothorax is present",
        "there is a small apical pneumothorax",
    ),
    "pleural": (
        "no pleural effusion is seen",
        "a moderate pleural effusion is seen on the right",
    ),
    "spine": (
        "the spine is unremarkable",
        "degenerative changes are noted in the spine",
    ),
    "heart": (
        "the heart size is within normal limits",
        "the heart is enlarged",
    ),
    "hernia": (
        "no hernia is identified",
        "a large hiatal hernia is noted",
    ),
}

_GENERIC_TEMPLATES = (
    "no abnormality of the {e} is seen",
    "the {e} shows an abnormal finding",
)

_NORMAL_LEVEL = 0.5
_ABNORMAL_LEVEL = 1.0


def _entity_templates(entity: str) -> tuple[str, str]:
    if entity in TEMPLATES:
        return TEMPLATES[entity]
    return tuple(t.format(e=entity) for t in _GENERIC_TEMPLATES)


def render_views(states, entities, image_size: int, views: int) -> list[np.ndarray]:
    """Deterministic glyphs: entity k owns a horizontal band of the canvas.

    Normal findings draw the band's outline at half intensity; abnormal
    findings fill the band at full intensity. The second view, when
    requested, is the transposed canvas (bands become vertical strips).
    """
    H = W = image_size
    img = np.zeros((H, W, 1))
    C = len(entities)
    for k, entity in enumerate(entities):
        state = states.get(entity)
        if state is None:
            continue
        r0, r1 = k * H // C, (k + 1) * H // C
        if state == 1:
            img[r0:r1, :, 0] = _ABNORMAL_LEVEL
        else:
            img[r0:r1, :, 0] = 0.0
            img[r0, :, 0] = _NORMAL_LEVEL
            img[r1 - 1, :, 0] = _NORMAL_LEVEL
            img[r0:r1, 0, 0] = _NORMAL_LEVEL
            img[r0:r1, W - 1, 0] = _NORMAL_LEVEL
    # snap through float32 so the image container round-trips losslessly
    img = img.astype(np.float32).astype(np.float64)
    out = [img]
    if views == 2:
        out.append(np.transpose(img, (1, 0, 2)))
    return out


def render_report(states, entities) -> str:
    sentences = []
    for entity in entities:
        state = states.get(entity)
        if state is None:
            continue
        sentences.append(_entity_templates(entity)[state])
    return ". ".join(sentences) + "."


def split_of(seed: int, sid: str) -> str:
    """Stable 70/10/20 split from a seeded hash of the sample id."""
    h = hashlib.sha256(f"{seed}:{sid}".encode("utf-8")).digest()
    u = int.from_bytes(h[:8], "little") / 2**64
    if u < 0.7:
        return "train"
    if u < 0.8:
        return "val"
    return "test"


def generate_synthetic(
    seed: int,
    n_samples: int,
    config,
    dictionary: AnatomicalDictionary | None = None,
) -> Corpus:
    """Seeded, bit-reproducible synthetic corpus of (image, report) pairs."""
    if n_samples < 4:
        raise ValueError(f"need at least 4 samples, got {n_samples}")
    dictionary = dictionary or AnatomicalDictionary.default()
    entities = dictionary.entities
    image_size = config["synthetic.image_size"]
    views = config["synthetic.views"]
    if views not in (1, 2):
        raise ValueError(f"synthetic views must be 1 or 2, got {views}")
    p_mention = config["synthetic.mention_prob"]
    p_abnormal = config["synthetic.abnormal_prob"]
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n_samples):
        sid = f"s{idx:05d}"
        mention = rng.random(len(entities)) < p_mention
        abnormal = rng.random(len(entities)) < p_abnormal
        if not mention.any():
            mention[rng.integers(len(entities))] = True  # reports are non-empty
        states = {
            e: (int(abnormal[k]) if mention[k] else None)
            for k, e in enumerate(entities)
        }
        samples.append(
            Sample(
                sid=sid,
                images=render_views(states, entities, image_size, views),
                report=render_report(states, entities),
                split=split_of(seed, sid),
            )
        )
    meta = {
        "kind": "synthetic",
        "seed": seed,
        "n_samples": n_samples,
        "entities": list(entities),
        "image_size": image_size,
        "views": views,
        "config_digest": config.digest(),
    }
    return Corpus(samples=samples, meta=meta)


# statistics ---------------------------------------------------------------


@dataclass
class CorpusStats:
    # split -> {"images": int, "reports": int, "patients": int, "avg_len": float|None}
    by_split: dict


SPLIT_ORDER = ("train", "val", "test")


def compute_stats(corpus: Corpus) -> CorpusStats:
    by_split = {}
    for name in SPLIT_ORDER:
        samples = corpus.split(name)
        lengths = [len(tokenize(s.report)) for s in samples]
        by_split[name] = {
            "images": sum(len(s.images) for s in samples),
            "reports": len(samples),
            "patients": len(samples),  # synthetic corpus: sample == patient
            "avg_len": (sum(lengths) / len(lengths)) if lengths else None,
        }
    return CorpusStats(by_split=by_split)


def format_stats_table(stats: CorpusStats) -> str:
    rows = [("Image", "images"), ("Report", "reports"), ("Patient", "patients")]
    header = f"{'':<10}" + "".join(f"{name.capitalize():>10}" for name in SPLIT_ORDER)
    lines = [header]
    for label, key in rows:
        cells = "".join(f"{stats.by_split[s][key]:>10,}" for s in SPLIT_ORDER)
        lines.append(f"{label:<10}{cells}")
    avg_cells = "".join(
        f"{stats.by_split[s]['avg_len']:>10.2f}"
        if stats.by_split[s]["avg_len"] is not None
        else f"{'-':>10}"
        for s in SPLIT_ORDER
    )
    lines.append(f"{'Avg. Len.':<10}{avg_cells}")
    return "\n".join(lines)


def stats_json(stats: CorpusStats) -> str:
    return json.dumps(stats.by_split, sort_keys=True)


# container formats ---------------------------------------------------------

IMAGE_MAGIC = b"RIMG"


def write_image(path, img: np.ndarray) -> None:
    """Raw image container: magic, H/W/F as u32 LE, float32 LE pixels."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"expected [H, W, C] image, got shape {img.shape}")
    H, W, F = img.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<III", H, W, F))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != IMAGE_MAGIC:
            raise ValueError(f"{path}: not an image container (magic {magic!r})")
        H, W, F = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(H * W * F * 4), dtype="<f4")
        if data.size != H * W * F:
            raise ValueError(f"{path}: truncated image data")
    return data.reshape(H, W, F).astype(np.float64)


def save_corpus(corpus: Corpus, path) -> None:
    """Directory layout: manifest.jsonl + images/ + meta.json."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for s in corpus.samples:
            files = []
            for k, img in enumerate(s.images):
                name = f"images/{s.sid}_{k}.rimg"
                write_image(root / name, img)
                files.append(name)
            fh.write(
                json.dumps(
                    {
                        "id": s.sid,
                        "split": s.split,
                        "report": s.report,
                        "image_files": files,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(root / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(corpus.meta, fh, indent=2, sort_keys=True)


def load_corpus(path) -> Corpus:
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    samples = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                sid, split = rec["id"], rec["split"]
                report, files = rec["report"], rec["image_files"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{manifest}: malformed line {lineno}: {e}") from e
            images = []
            for name in files:
                img_path = root / name
                if not img_path.exists():
                    raise FileNotFoundError(
                        f"sample {sid}: missing image file {name}"
                    )
                images.append(read_image(img_path))
            samples.append(Sample(sid=sid, images=images, report=report, split=split))
    meta_path = root / "meta.json"
    meta = {}
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    return Corpus(samples=samples, meta=meta)


def corpus_digest(corpus: Corpus) -> str:
    """Content digest over ids, splits, reports, and pixel bytes."""
    h = hashlib.sha256()
    for s in corpus.samples:
        h.update(s.sid.encode())
        h.update(s.split.encode())
        h.update(s.report.encode())
        for img in s.images:
            h.update(np.ascontiguousarray(img, dtype="<f8").tobytes())
    return h.hexdigest()
