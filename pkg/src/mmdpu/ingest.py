"""Manifests, preprocessing, tokenization and the synthetic corpus generator."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .datamodel import Article, IMDSample
from .manip_synth import CopyMoveParams, copy_move


class ManifestError(ValueError):
    """A manifest row could not be parsed or its image could not be read."""

    def __init__(self, message: str, line: Optional[int] = None, row_id: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if row_id is not None:
            where.append(f"row {row_id!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.row_id = row_id


@dataclass
class PreprocessConfig:
    image_size: int = 224
    # None means the conventional 256-for-224 ratio
    resize_size: Optional[int] = None
    max_text_len: int = 128
    vocab_size: int = 30000

    @property
    def resize_to(self) -> int:
        if self.resize_size is not None:
            return self.resize_size
        return int(round(self.image_size * 256 / 224))


class ToyTokenizer:
    """Lowercased whitespace split hashed into ``[1, vocab_size)``; 0 is padding."""

    def __init__(self, vocab_size: int = 30000):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        self.vocab_size = vocab_size

    def token_id(self, word: str) -> int:
        return 1 + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - 1)

    def __call__(self, text: str, max_len: int = 128) -> list[int]:
        return [self.token_id(w) for w in text.lower().split()[:max_len]]


def preprocess_image(img: Image.Image, config: PreprocessConfig, rng: Optional[np.random.Generator] = None):
    """Resize to ``resize_to`` square, crop to ``image_size`` (random if ``rng``, else center), scale to [0,1]."""
    img = img.convert("RGB")
    side = config.resize_to
    if side < config.image_size:
        raise ValueError("resize_size must be >= image_size")
    if img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    slack = side - config.image_size
    if rng is not None:
        top, left = int(rng.integers(0, slack + 1)), int(rng.integers(0, slack + 1))
    else:
        top = left = slack // 2
    return arr[top:top + config.image_size, left:left + config.image_size].copy()


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", line=lineno) from None
            if not isinstance(row, dict):
                raise ManifestError("row is not an object", line=lineno)
            yield lineno, row


def _resolve(root: Path, rel: str, lineno: int, row_id) -> Path:
    p = (root / rel).resolve()
    if root.resolve() not in p.parents and p != root.resolve():
        raise ManifestError(f"image_path {rel!r} escapes the manifest root", line=lineno, row_id=row_id)
    return p


def _label(row: dict, key: str, lineno: int, row_id, required: bool = True):
    if key not in row or row[key] is None:
        if required:
            raise ManifestError(f"missing {key!r}", line=lineno, row_id=row_id)
        return None
    v = row[key]
    if isinstance(v, bool) or v not in (0, 1):
        raise ManifestError(f"{key} {v!r} not in {{0,1}}", line=lineno, row_id=row_id)
    return int(v)


class _ImageCache:
    def __init__(self, config: PreprocessConfig, rng):
        self.config, self.rng, self.cache = config, rng, {}

    def get(self, path: Path, lineno: int, row_id):
        if path not in self.cache:
            if not path.is_file():
                raise ManifestError(f"image not found: {path}", line=lineno, row_id=row_id)
            try:
                with Image.open(path) as im:
                    arr = preprocess_image(im, self.config, self.rng)
            except OSError as exc:
                raise ManifestError(f"unreadable image {path}: {exc}", line=lineno, row_id=row_id) from None
            arr.flags.writeable = False
            self.cache[path] = arr
        return self.cache[path]


def load_mmd(manifest, config: PreprocessConfig = PreprocessConfig(), train: bool = False, seed: int = 0,
             tokenizer=None, require_labels: bool = True, failures: Optional[list] = None) -> list[Article]:
    """Read a JSON-lines article manifest (``id``, ``text``, ``image_path``, ``label``).

    Training loads crop at a seeded random offset, evaluation loads crop at the
    center. Rows sharing an ``image_path`` share one decoded image. Missing or
    unreadable images raise, unless ``failures`` is given, in which case the
    row is skipped and its error appended there.
    """
    manifest = Path(manifest)
    root = manifest.parent
    tok = tokenizer or ToyTokenizer(config.vocab_size)
    images = _ImageCache(config, np.random.default_rng(seed) if train else None)
    out = []
    for lineno, row in _read_jsonl(manifest):
        row_id = str(row.get("id", lineno))
        for key in ("text", "image_path"):
            if not isinstance(row.get(key), str):
                raise ManifestError(f"missing or non-string {key!r}", line=lineno, row_id=row_id)
        label = _label(row, "label", lineno, row_id, required=require_labels)
        try:
            tokens = tok(row["text"], config.max_text_len)
            if not tokens:
                raise ManifestError("text has no tokens", line=lineno, row_id=row_id)
            img = images.get(_resolve(root, row["image_path"], lineno, row_id), lineno, row_id)
        except ManifestError as exc:
            if failures is None:
                raise
            failures.append(exc)
            continue
        out.append(Article(row_id, tokens, img, label))
    return out


def load_imd(manifest, config: PreprocessConfig = PreprocessConfig(), train: bool = False, seed: int = 0,
             failures: Optional[list] = None) -> list[IMDSample]:
    """Read a JSON-lines manipulation manifest (``image_path``, ``manipulated``)."""
    manifest = Path(manifest)
    root = manifest.parent
    images = _ImageCache(config, np.random.default_rng(seed) if train else None)
    out = []
    for lineno, row in _read_jsonl(manifest):
        row_id = str(row.get("id", lineno))
        if not isinstance(row.get("image_path"), str):
            raise ManifestError("missing or non-string 'image_path'", line=lineno, row_id=row_id)
        label = _label(row, "manipulated", lineno, row_id)
        try:
            img = images.get(_resolve(root, row["image_path"], lineno, row_id), lineno, row_id)
        except ManifestError as exc:
            if failures is None:
                raise
            failures.append(exc)
            continue
        out.append(IMDSample(img, label, row_id))
    return out


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticCorpusSpec:
    n_articles: int = 1000
    frac_fake: float = 0.5
    frac_fake_manip: float = 0.664
    frac_real_manip: float = 0.100
    frac_harmful_given_fake_manip: float = 0.6
    seed: int = 0
    image_size: int = 32
    vocab_size: int = 30000
    n_imd: int = 2000
    # how often each class-cue word in the text agrees with the true label
    cue_reliability: float = 0.7
    n_cues: int = 3
    filler_vocab: int = 200
    text_len: tuple = (16, 32)
    harmless_region: tuple = (0.1, 0.2)
    harmful_region: tuple = (0.25, 0.4)

    def __post_init__(self):
        self.text_len = tuple(self.text_len)
        self.harmless_region = tuple(self.harmless_region)
        self.harmful_region = tuple(self.harmful_region)
        for name in ("frac_fake", "frac_fake_manip", "frac_real_manip", "frac_harmful_given_fake_manip",
                     "cue_reliability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        if self.frac_harmful_given_fake_manip > 0 and (self.frac_fake_manip == 0 or self.frac_fake == 0):
            raise ValueError("harmful manipulations need manipulated fake articles to live in")
        if self.n_articles < 1:
            raise ValueError("n_articles must be >= 1")


@dataclass
class SyntheticCorpus:
    root: Path
    mmd_manifest: Path
    imd_manifest: Optional[Path]
    sidecar: Path
    truth: list = field(default_factory=list)


_CLASS_TINT = {0: np.array([0.2, 0.35, 0.8]), 1: np.array([0.8, 0.3, 0.2])}


def _base_image(rng: np.random.Generator, size: int, tint=None, noise: float = 0.01) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        img[..., c] = rng.uniform(0.3, 0.7) + rng.uniform(0.25, 0.45) * (ramp - ramp.mean())
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    sigma = size * rng.uniform(0.12, 0.2)
    blob = np.exp(-((np.arange(size)[:, None] - cy) ** 2 + (np.arange(size)[None, :] - cx) ** 2) / (2 * sigma**2))
    color = tint if tint is not None else rng.uniform(0.1, 0.9, size=3)
    img = img * (1 - 0.5 * blob[..., None]) + 0.5 * blob[..., None] * color
    img += rng.normal(0, noise, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def _exact_count(n: int, frac: float) -> int:
    return int(math.floor(n * frac + 0.5))


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir) -> SyntheticCorpus:
    """Write a procedurally generated article corpus (and a labeled manipulation set).

    Latent structure per article: veracity ``y``; manipulation ``y_manip``
    (exactly ``frac_fake_manip`` of fake and ``frac_real_manip`` of real
    articles); intention ``y_intent`` (1 harmless, 0 harmful). Only
    manipulated fake articles can be harmful, so both weak-label rules hold by
    construction. Harmful edits paste larger regions and come with a text
    motif; text also carries noisy class cue words and the image a weakly
    class-tinted blob.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_articles
    n_fake = _exact_count(n, spec.frac_fake)
    y = np.array([1] * n_fake + [0] * (n - n_fake))
    rng.shuffle(y)

    manip = np.zeros(n, dtype=int)
    intent = np.ones(n, dtype=int)
    fake_idx, real_idx = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    fake_manip = rng.choice(fake_idx, _exact_count(len(fake_idx), spec.frac_fake_manip), replace=False)
    real_manip = rng.choice(real_idx, _exact_count(len(real_idx), spec.frac_real_manip), replace=False)
    manip[fake_manip] = 1
    manip[real_manip] = 1
    harmful = rng.choice(fake_manip, _exact_count(len(fake_manip), spec.frac_harmful_given_fake_manip),
                         replace=False)
    intent[harmful] = 0

    harmless_params = CopyMoveParams(*spec.harmless_region)
    harmful_params = CopyMoveParams(*spec.harmful_region)
    rows, truth = [], []
    for i in range(n):
        aid = f"a{i:05d}"
        tint = _CLASS_TINT[int(y[i])] if rng.random() < 0.6 else _CLASS_TINT[1 - int(y[i])]
        img = _base_image(rng, spec.image_size, tint)
        region = None
        if manip[i]:
            params = harmful_params if intent[i] == 0 else harmless_params
            img, rec = copy_move(img, params, rng)
            region = rec.to_dict()
        Image.fromarray(img).save(out / "images" / f"{aid}.png")
        rows.append({"id": aid, "text": _synthetic_text(rng, spec, int(y[i]), intent[i] == 0),
                     "image_path": f"images/{aid}.png", "label": int(y[i])})
        truth.append({"id": aid, "y": int(y[i]), "y_manip": int(manip[i]), "y_intent": int(intent[i]),
                      "region": region})
    write_jsonl(out / "mmd.jsonl", rows)
    write_jsonl(out / "truth.jsonl", truth)

    imd_path = None
    if spec.n_imd > 0:
        imd_path = _generate_imd(spec, out, np.random.default_rng([spec.seed, 1]))
    with open(out / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
    return SyntheticCorpus(out, out / "mmd.jsonl", imd_path, out / "truth.jsonl", truth)


def _synthetic_text(rng: np.random.Generator, spec: SyntheticCorpusSpec, label: int, harmful: bool) -> str:
    length = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
    words = [f"w{int(k)}" for k in rng.integers(0, spec.filler_vocab, size=length)]
    for _ in range(spec.n_cues):
        cls = label if rng.random() < spec.cue_reliability else 1 - label
        words[int(rng.integers(0, length))] = f"{'fake' if cls else 'real'}cue{int(rng.integers(0, 20))}"
    if rng.random() < (0.8 if harmful else 0.15):
        words[int(rng.integers(0, length))] = f"motif{int(rng.integers(0, 5))}"
    return " ".join(words)


def _generate_imd(spec: SyntheticCorpusSpec, out: Path, rng: np.random.Generator) -> Path:
    (out / "imd" / "images").mkdir(parents=True, exist_ok=True)
    params = CopyMoveParams(spec.harmless_region[0], spec.harmful_region[1])
    rows = []
    labels = np.array([1] * (spec.n_imd // 2) + [0] * (spec.n_imd - spec.n_imd // 2))
    rng.shuffle(labels)
    for j, lab in enumerate(labels):
        # slightly noisier, untinted images: a mild shift from the article images
        img = _base_image(rng, spec.image_size, None, noise=0.015)
        if lab:
            img, _ = copy_move(img, params, rng)
        name = f"m{j:05d}.png"
        Image.fromarray(img).save(out / "imd" / "images" / name)
        rows.append({"id": f"m{j:05d}", "image_path": f"images/{name}", "manipulated": int(lab)})
    write_jsonl(out / "imd" / "imd.jsonl", rows)
    return out / "imd" / "imd.jsonl"
