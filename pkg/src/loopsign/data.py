"""Skeleton dataset files, a synthetic sign generator, vocabulary and batching.

Samples live in JSON-lines files, one sample per line::

    {"id": "...", "gloss": "...", "frames": T,
     "parts": {"body": [[[x, y, c] x 9] x T], "face": ..., "left": ..., "right": ...}}

A ``manifest.json`` next to them lists every record with its file (relative
to the manifest), gloss and split, plus the token vocabulary.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PARTS = ("body", "face", "left", "right")
KEYPOINTS = {"body": 9, "face": 18, "left": 21, "right": 21}

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
MANIFEST_VERSION = 1


@dataclass
class SkeletonSequence:
    id: str
    gloss: str
    parts: dict[str, np.ndarray]

    @property
    def frames(self) -> int:
        return int(self.parts["body"].shape[0])

    def validate(self) -> None:
        missing = [p for p in PARTS if p not in self.parts]
        if missing:
            raise DataError(f"sample {self.id!r} lacks parts {missing}")
        frames = None
        for p in PARTS:
            arr = self.parts[p]
            if arr.ndim != 3 or arr.shape[1:] != (KEYPOINTS[p], 3):
                raise DataError(
                    f"sample {self.id!r} part {p!r}: expected (T, {KEYPOINTS[p]}, 3), got {arr.shape}"
                )
            if frames is None:
                frames = arr.shape[0]
            elif arr.shape[0] != frames:
                raise DataError(f"sample {self.id!r}: parts disagree on frame count")
            if not np.all(np.isfinite(arr[..., :2])):
                raise DataError(f"sample {self.id!r} part {p!r} has non-finite coordinates")
            conf = arr[..., 2]
            if np.any(conf < 0) or np.any(conf > 1):
                raise DataError(f"sample {self.id!r} part {p!r} has confidence outside [0, 1]")
        if not frames:
            raise DataError(f"sample {self.id!r} has no frames")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "gloss": self.gloss,
            "frames": self.frames,
            "parts": {p: self.parts[p].tolist() for p in PARTS},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SkeletonSequence":
        try:
            parts = {p: np.asarray(rec["parts"][p], dtype=np.float64) for p in PARTS}
            seq = cls(id=str(rec["id"]), gloss=str(rec["gloss"]), parts=parts)
            frames = int(rec["frames"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed sample record: {exc!r}") from None
        seq.validate()
        if frames != seq.frames:
            raise DataError(f"sample {seq.id!r}: 'frames'={frames} but parts hold {seq.frames}")
        return seq


def write_jsonl(path: str | os.PathLike, samples: Iterable[SkeletonSequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(json.dumps(s.to_record(), separators=(",", ":")))
                fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_jsonl(path: str | os.PathLike) -> list[SkeletonSequence]:
    path = Path(path)
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(SkeletonSequence.from_record(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Word-level vocabulary; ids 0/1/2 are pad/begin/end."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:3] != [PAD, BOS, EOS]:
            tokens = [PAD, BOS, EOS] + [t for t in tokens if t not in (PAD, BOS, EOS)]
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_glosses(cls, glosses: Iterable[str]) -> "Vocabulary":
        words = sorted({w for g in glosses for w in g.split()})
        return cls(words)

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, gloss: str) -> list[int]:
        try:
            return [self.index[w] for w in gloss.split()]
        except KeyError as exc:
            raise DataError(f"gloss {gloss!r} has out-of-vocabulary word {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def check_ids(self, ids: np.ndarray) -> None:
        if np.any(ids < 0) or np.any(ids >= len(self)):
            raise DataError(f"token id outside vocabulary of size {len(self)}")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    path: str
    gloss: str
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    vocabulary: Vocabulary
    root: Path = field(default_factory=Path)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for r in self.records:
            for w in r.gloss.split():
                if w not in self.vocabulary.index:
                    raise DataError(f"record {r.id!r}: gloss word {w!r} missing from vocabulary")
            if r.id in seen:
                raise DataError(f"record id {r.id!r} appears twice (splits {seen[r.id]!r} and {r.split!r})")
            seen[r.id] = r.split

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> "DatasetManifest":
        sub = DatasetManifest([r for r in self.records if r.split == name], self.vocabulary, self.root)
        sub._cache = self._cache
        return sub

    @property
    def classes(self) -> list[str]:
        return sorted({r.gloss for r in self.records})

    def save(self, path: str | os.PathLike) -> None:
        payload = {
            "version": MANIFEST_VERSION,
            "vocabulary": self.vocabulary.tokens,
            "records": [asdict(r) for r in self.records],
        }
        Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot load manifest {path}: {exc}") from None
        if payload.get("version") != MANIFEST_VERSION:
            raise DataError(f"{path}: unsupported manifest version {payload.get('version')!r}")
        records = [ManifestRecord(**r) for r in payload["records"]]
        return cls(records, Vocabulary(payload["vocabulary"]), path.parent)

    def sequence(self, index: int) -> SkeletonSequence:
        rec = self.records[index]
        table = self._cache.get(rec.path)
        if table is None:
            table = {s.id: s for s in read_jsonl(self.root / rec.path)}
            self._cache[rec.path] = table
        try:
            seq = table[rec.id]
        except KeyError:
            raise DataError(f"record {rec.id!r} not found in {rec.path}") from None
        if seq.gloss != rec.gloss:
            raise DataError(f"record {rec.id!r}: manifest gloss {rec.gloss!r} != file gloss {seq.gloss!r}")
        return seq


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def normalize(seq: SkeletonSequence) -> dict[str, np.ndarray]:
    """Centre x, y on the per-frame body centroid and scale into [-1, 1]."""
    centroid = seq.parts["body"][:, :, :2].mean(axis=1)  # (T, 2)
    centred = {p: seq.parts[p][:, :, :2] - centroid[:, None, :] for p in PARTS}
    extent = max(float(np.abs(a).max()) for a in centred.values())
    scale = 1.0 / extent if extent > 0 else 1.0
    return {
        p: np.concatenate([centred[p] * scale, seq.parts[p][:, :, 2:3]], axis=-1) for p in PARTS
    }


@dataclass
class Batch:
    parts: dict[str, np.ndarray]  # (B, T, N, 3)
    frame_mask: np.ndarray  # (B, T) bool
    tokens_in: np.ndarray  # (B, Lt) int: <bos> w1 ... wn <pad>...
    targets: np.ndarray  # (B, Lt) int: w1 ... wn <eos> <pad>...
    text_mask: np.ndarray  # (B, Lt) bool
    glosses: list[str]
    ids: list[str]

    @property
    def size(self) -> int:
        return len(self.ids)

    def subset(self, index: Sequence[int]) -> "Batch":
        index = list(index)
        return Batch(
            {p: a[index] for p, a in self.parts.items()},
            self.frame_mask[index],
            self.tokens_in[index],
            self.targets[index],
            self.text_mask[index],
            [self.glosses[i] for i in index],
            [self.ids[i] for i in index],
        )


def collate(
    sequences: Sequence[SkeletonSequence],
    vocab: Vocabulary,
    pad_to: int | None = None,
    text_len: int | None = None,
) -> Batch:
    if not sequences:
        raise DataError("cannot build an empty batch")
    frames = max(s.frames for s in sequences)
    if pad_to is not None:
        if pad_to < frames:
            raise DataError(f"pad_to={pad_to} is shorter than the longest sample ({frames} frames)")
        frames = pad_to
    encoded = [vocab.encode(s.gloss) for s in sequences]
    length = max(len(e) for e in encoded) + 1
    if text_len is not None:
        if text_len < length:
            raise DataError(f"text_len={text_len} is shorter than the longest gloss ({length} tokens)")
        length = text_len
    b = len(sequences)
    parts = {p: np.zeros((b, frames, KEYPOINTS[p], 3)) for p in PARTS}
    frame_mask = np.zeros((b, frames), dtype=bool)
    tokens_in = np.full((b, length), vocab.pad_id, dtype=np.int64)
    targets = np.full((b, length), vocab.pad_id, dtype=np.int64)
    text_mask = np.zeros((b, length), dtype=bool)
    for i, (s, ids) in enumerate(zip(sequences, encoded)):
        norm = normalize(s)
        for p in PARTS:
            parts[p][i, : s.frames] = norm[p]
        frame_mask[i, : s.frames] = True
        n = len(ids)
        tokens_in[i, : n + 1] = [vocab.bos_id] + ids
        targets[i, : n + 1] = ids + [vocab.eos_id]
        text_mask[i, : n + 1] = True
    return Batch(parts, frame_mask, tokens_in, targets, text_mask, [s.gloss for s in sequences], [s.id for s in sequences])


def load_batch(manifest: DatasetManifest, indices: Sequence[int], pad_to: int | None = None) -> Batch:
    """Read, normalise and pad the records at ``indices``."""
    if len(manifest) == 0:
        raise DataError("manifest is empty")
    for i in indices:
        if not 0 <= int(i) < len(manifest):
            raise DataError(f"record index {i} outside manifest of size {len(manifest)}")
    return collate([manifest.sequence(int(i)) for i in indices], manifest.vocabulary, pad_to)


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    num_classes: int = 10
    frames: int = 16
    samples_per_class: int = 200
    noise: float = 0.05
    seed: int = 0
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    decimals: int = 4

    def validate(self) -> None:
        if self.num_classes < 1 or self.frames < 1 or self.samples_per_class < 1:
            raise DataError("class count, frames and samples per class must be positive")
        if self.noise < 0:
            raise DataError("noise must be nonnegative")
        if not 0 <= self.val_fraction + self.test_fraction < 1:
            raise DataError("split fractions must leave room for training data")


def _layout() -> dict[str, np.ndarray]:
    """Rest pose shared by every class (fixed, seed-independent)."""
    rng = np.random.default_rng(12345)
    body = np.stack([np.linspace(-0.6, 0.6, 9), np.abs(np.linspace(-0.6, 0.6, 9)) * 0.5 - 0.2], -1)
    theta = np.linspace(0, 2 * np.pi, 18, endpoint=False)
    face = np.stack([0.15 * np.cos(theta), 0.6 + 0.2 * np.sin(theta)], -1)

    def hand(cx):
        pts = [(0.0, 0.0)]
        for f, angle in enumerate(np.linspace(-0.9, 0.9, 5)):
            for j in range(1, 5):
                r = 0.04 * j
                pts.append((r * np.sin(angle), r * np.cos(angle)))
        return np.asarray(pts) + [cx, -0.1] + rng.normal(scale=0.003, size=(21, 2))

    return {"body": body, "face": face, "left": hand(-0.45), "right": hand(0.45)}


@dataclass
class ClassTemplate:
    freq: dict[str, float]
    phase: dict[str, float]
    amplitude: dict[str, float]
    direction: dict[str, np.ndarray]  # per part, unit 2-vector
    articulation: dict[str, np.ndarray]  # per part, per-keypoint gain


def class_templates(spec: SyntheticTaskSpec) -> list[ClassTemplate]:
    rng = np.random.default_rng([spec.seed, 7919])
    out = []
    for _ in range(spec.num_classes):
        freq, phase, amp, direction, artic = {}, {}, {}, {}, {}
        for p in PARTS:
            freq[p] = float(rng.uniform(0.5, 3.0))
            phase[p] = float(rng.uniform(0, 2 * np.pi))
            amp[p] = float(rng.uniform(0.05, 0.25))
            ang = rng.uniform(0, 2 * np.pi)
            direction[p] = np.array([np.cos(ang), np.sin(ang)])
            artic[p] = rng.uniform(0.2, 1.0, size=KEYPOINTS[p])
        out.append(ClassTemplate(freq, phase, amp, direction, artic))
    return out


def render(template: ClassTemplate, frames: int, layout=None) -> dict[str, np.ndarray]:
    """Noise-free (T, N, 2) coordinates of one class."""
    layout = layout or _layout()
    t = np.arange(frames) / max(frames, 1)
    out = {}
    for p in PARTS:
        wave = template.amplitude[p] * np.sin(2 * np.pi * template.freq[p] * t + template.phase[p])
        offset = wave[:, None, None] * template.articulation[p][None, :, None] * template.direction[p]
        out[p] = layout[p][None] + offset
    return out


def gloss_name(k: int) -> str:
    return f"sign{k:02d}"


def synthesize(spec: SyntheticTaskSpec) -> list[SkeletonSequence]:
    spec.validate()
    layout = _layout()
    templates = class_templates(spec)
    rng = np.random.default_rng([spec.seed, 104729])
    samples = []
    for k, tpl in enumerate(templates):
        clean = render(tpl, spec.frames, layout)
        for j in range(spec.samples_per_class):
            shift = rng.uniform(-0.5, 0.5, size=2)
            parts = {}
            for p in PARTS:
                xy = clean[p] + shift + rng.normal(scale=spec.noise, size=clean[p].shape) if spec.noise else clean[p] + shift
                conf = rng.uniform(0.7, 1.0, size=clean[p].shape[:2] + (1,))
                parts[p] = np.round(np.concatenate([xy, conf], axis=-1), spec.decimals)
            samples.append(SkeletonSequence(f"{gloss_name(k)}-{j:04d}", gloss_name(k), parts))
    return samples


def _assign_splits(spec: SyntheticTaskSpec, samples: list[SkeletonSequence]) -> list[str]:
    n = spec.samples_per_class
    n_test = int(round(n * spec.test_fraction))
    n_val = int(round(n * spec.val_fraction))
    splits = []
    for s in samples:
        j = int(s.id.rsplit("-", 1)[1])
        splits.append("test" if j < n_test else "val" if j < n_test + n_val else "train")
    return splits


def generate_synthetic(spec: SyntheticTaskSpec, out_dir: str | os.PathLike) -> DatasetManifest:
    """Write ``data/{split}.jsonl`` plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    samples = synthesize(spec)
    splits = _assign_splits(spec, samples)
    records = []
    by_split: dict[str, list[SkeletonSequence]] = {}
    for s, split in zip(samples, splits):
        rel = f"data/{split}.jsonl"
        by_split.setdefault(split, []).append(s)
        records.append(ManifestRecord(s.id, rel, s.gloss, split))
    for split, seqs in sorted(by_split.items()):
        write_jsonl(out_dir / f"data/{split}.jsonl", seqs)
    vocab = Vocabulary.from_glosses(s.gloss for s in samples)
    manifest = DatasetManifest(records, vocab, out_dir)
    try:
        manifest.save(out_dir / "manifest.json")
        (out_dir / "task.json").write_text(json.dumps(asdict(spec), indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write manifest under {out_dir}: {exc}") from exc
    return manifest


def nearest_template_accuracy(spec: SyntheticTaskSpec, samples: Sequence[SkeletonSequence]) -> float:
    """Classify each sample by the closest normalised class template."""
    layout = _layout()
    refs = []
    for tpl in class_templates(spec):
        clean = render(tpl, spec.frames, layout)
        seq = SkeletonSequence("t", "t", {p: np.concatenate([clean[p], np.ones(clean[p].shape[:2] + (1,))], -1) for p in PARTS})
        norm = normalize(seq)
        refs.append(np.concatenate([norm[p][..., :2].ravel() for p in PARTS]))
    refs = np.stack(refs)
    correct = 0
    for s in samples:
        norm = normalize(s)
        v = np.concatenate([norm[p][..., :2].ravel() for p in PARTS])
        pred = int(np.argmin(((refs - v) ** 2).sum(-1)))
        correct += gloss_name(pred) == s.gloss
    return correct / len(samples)
