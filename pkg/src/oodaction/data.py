"""On-disk clip format, annotations, manifests, and the synthetic generator.

A clip file bundles the per-video object features a detection backbone
would produce: local appearance/motion features per object, global
per-frame features, and normalized bounding boxes, followed by a JSON
annotation blob. Layout (little-endian):

    magic       4 bytes  b"UAAN"
    version     u16      currently 1
    T, S, d_in, K        u32 each
    appearance_local     T*S*d_in float32, row-major
    motion_local         T*S*d_in float32
    appearance_global    T*d_in   float32
    motion_global        T*d_in   float32
    boxes                T*S*4    float32 (x1, y1, x2, y2 in [0, 1])
    ann_len     u32
    annotation  ann_len bytes of UTF-8 JSON

The synthetic generator plants one feature prototype pair (appearance,
motion) per in-distribution class on action frames, a separate prototype
on background frames, and reserves one held-out prototype pair for
out-of-distribution segments that only appear in val/test splits.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"UAAN"
FORMAT_VERSION = 1
OOD_LABEL = -1  # label marker for out-of-distribution segments


@dataclass
class Annotation:
    """Temporal segments with class labels and the derived frame mask."""

    segments: list[tuple[int, int]]  # (t_start, t_end), frame units, end exclusive
    labels: list[int]                # class index in [0, K) or OOD_LABEL
    frame_action_mask: np.ndarray    # bool, length T; union of all segment spans

    def id_segments(self):
        return [(s, lab) for s, lab in zip(self.segments, self.labels) if lab != OOD_LABEL]

    def ood_segments(self):
        return [s for s, lab in zip(self.segments, self.labels) if lab == OOD_LABEL]


@dataclass
class ObjectFeatureClip:
    """Per-video container of backbone-style object features."""

    video_id: str
    appearance_local: np.ndarray   # (T, S, d_in)
    motion_local: np.ndarray       # (T, S, d_in)
    appearance_global: np.ndarray  # (T, d_in)
    motion_global: np.ndarray      # (T, d_in)
    boxes: np.ndarray              # (T, S, 4) normalized x1, y1, x2, y2
    num_classes: int

    @property
    def T(self) -> int:
        return self.appearance_local.shape[0]

    @property
    def S(self) -> int:
        return self.appearance_local.shape[1]

    @property
    def d_in(self) -> int:
        return self.appearance_local.shape[2]


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    split: str
    clip_paths: list[str]  # absolute paths after loading


def frame_mask(segments, T: int) -> np.ndarray:
    mask = np.zeros(T, dtype=bool)
    for s, e in segments:
        mask[s:e] = True
    return mask


def _validate_annotation(segments, labels, T, K, path="<memory>"):
    if len(segments) != len(labels):
        raise FormatError(f"{path}: segment/label count mismatch")
    for i, ((s, e), lab) in enumerate(zip(segments, labels)):
        if not (0 <= s < e <= T):
            raise FormatError(f"{path}: segment {i} out of range or degenerate: ({s}, {e}) with T={T}")
        if lab != OOD_LABEL and not (0 <= lab < K):
            raise FormatError(f"{path}: segment {i} has invalid label {lab} for K={K}")


def _validate_boxes(boxes, path, block_offset):
    bad = ~((boxes[..., 0] >= 0) & (boxes[..., 0] <= boxes[..., 2]) & (boxes[..., 2] <= 1)
            & (boxes[..., 1] >= 0) & (boxes[..., 1] <= boxes[..., 3]) & (boxes[..., 3] <= 1))
    if bad.any():
        t, k = map(int, np.argwhere(bad)[0])
        offset = block_offset + (t * boxes.shape[1] + k) * 4 * 4
        raise FormatError(f"{path}: invalid box at (t={t}, k={k}): {boxes[t, k].tolist()}", offset)


def save_clip(path, clip: ObjectFeatureClip, annotation: Annotation) -> None:
    """Write a clip plus annotation in the binary format above."""
    T, S, d_in = clip.T, clip.S, clip.d_in
    ann = {
        "video_id": clip.video_id,
        "segments": [[int(s), int(e)] for s, e in annotation.segments],
        "labels": [int(lab) for lab in annotation.labels],
    }
    blob = json.dumps(ann, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HIIII", FORMAT_VERSION, T, S, d_in, clip.num_classes))
        for block in (clip.appearance_local, clip.motion_local,
                      clip.appearance_global, clip.motion_global, clip.boxes):
            f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_clip(path) -> tuple[ObjectFeatureClip, Annotation]:
    """Read and fully validate a clip file."""
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated while reading {what}", pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a clip file", 0)
    version, T, S, d_in, K = struct.unpack("<HIIII", take(18, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", 4)

    def block(shape, what):
        n = int(np.prod(shape))
        arr = np.frombuffer(take(4 * n, what), dtype="<f4").reshape(shape)
        return arr.astype(np.float64)

    app_local = block((T, S, d_in), "appearance_local")
    mot_local = block((T, S, d_in), "motion_local")
    app_global = block((T, d_in), "appearance_global")
    mot_global = block((T, d_in), "motion_global")
    boxes_offset = pos
    boxes = block((T, S, 4), "boxes")
    (ann_len,) = struct.unpack("<I", take(4, "annotation length"))
    blob = take(ann_len, "annotation")
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after annotation", pos)

    _validate_boxes(boxes, path, boxes_offset)
    try:
        ann = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed annotation JSON: {e}", len(raw) - ann_len) from None
    segments = [tuple(seg) for seg in ann["segments"]]
    labels = list(ann["labels"])
    _validate_annotation(segments, labels, T, K, path)

    clip = ObjectFeatureClip(
        video_id=ann.get("video_id", os.path.splitext(os.path.basename(path))[0]),
        appearance_local=app_local, motion_local=mot_local,
        appearance_global=app_global, motion_global=mot_global,
        boxes=boxes, num_classes=K,
    )
    annotation = Annotation(segments, labels, frame_mask(segments, T))
    return clip, annotation


def save_manifest(path, manifest: DatasetManifest) -> None:
    base = os.path.dirname(os.path.abspath(path))
    doc = {
        "format": "oodaction-manifest-v1",
        "num_classes": manifest.num_classes,
        "class_names": manifest.class_names,
        "split": manifest.split,
        "clips": [os.path.relpath(p, base) for p in manifest.clip_paths],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != "oodaction-manifest-v1":
        raise FormatError(f"{path}: not a dataset manifest")
    base = os.path.dirname(os.path.abspath(path))
    return DatasetManifest(
        num_classes=int(doc["num_classes"]),
        class_names=list(doc["class_names"]),
        split=doc["split"],
        clip_paths=[os.path.join(base, p) for p in doc["clips"]],
    )


def validate_train_manifest(manifest: DatasetManifest) -> None:
    """Assert that no clip in a training manifest carries an OOD label."""
    if manifest.split != "train":
        return
    for p in manifest.clip_paths:
        _, ann = load_clip(p)
        if any(lab == OOD_LABEL for lab in ann.labels):
            raise ContractError(f"training clip {p} contains an OOD-labelled segment")


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthConfig:
    """Knobs for the deterministic synthetic dataset generator."""

    num_classes: int = 3
    frames: int = 32          # T
    objects: int = 3          # S
    feature_dim: int = 32     # d_in
    train_clips: int = 64
    val_clips: int = 16
    test_clips: int = 16
    noise: float = 0.1
    separation: float = 2.0   # distance between distinct class prototypes
    segment_min: int = 6
    segment_max: int = 12
    segments_per_clip: int = 3   # upper bound
    ood_fraction: float = 0.4    # per-segment OOD probability in val/test
    train_ood: bool = False      # requesting OOD in train is a contract error

    def validate(self):
        if self.num_classes < 2:
            raise ContractError("synthetic generation requires num_classes >= 2")
        if self.frames < 8:
            raise ContractError("synthetic generation requires frames >= 8")
        if self.objects < 2:
            raise ContractError("synthetic generation requires objects >= 2")
        if self.feature_dim < self.num_classes + 3:
            raise ContractError("feature_dim must be at least num_classes + 3")
        if not 0 <= self.ood_fraction <= 1:
            raise ContractError("ood_fraction must lie in [0, 1]")


@dataclass
class PrototypeBank:
    """Per-class feature prototypes; row K is the held-out OOD prototype,
    row K+1 the background prototype."""

    appearance: np.ndarray  # (K + 2, d_in)
    motion: np.ndarray      # (K + 2, d_in)


def make_prototypes(config: SynthConfig, seed: int) -> PrototypeBank:
    """Build prototype banks shared by all splits of one dataset.

    Every action prototype carries a common "action" direction that the
    background prototype opposes, so a class-agnostic action/background
    separator generalizes to action classes never seen in training. Class
    identity lives in mutually orthogonal directions; distinct ID
    prototypes sit `separation` apart.

    The held-out OOD prototype blends the class directions of two ID
    classes (the same pair in the appearance and motion banks) with a
    direction of its own: an unseen action resembles known ones without
    being reducible to them, which keeps its class evidence genuinely
    ambiguous instead of an extrapolation artifact.
    """
    K, d = config.num_classes, config.feature_dim
    ood_pair = np.random.default_rng([seed, 100]).permutation(K)[:2]
    blend = 0.75  # weight of the parent-class mixture in the OOD direction
    banks = []
    for stream in (101, 102):  # appearance, motion
        rng = np.random.default_rng([seed, stream])
        basis, _ = np.linalg.qr(rng.normal(size=(d, K + 3)))
        carrier, class_dirs, bg_dir = basis[:, 0], basis[:, 1:K + 2], basis[:, K + 2]
        scale = config.separation / np.sqrt(2.0)
        protos = np.empty((K + 2, d))
        for c in range(K):
            protos[c] = scale * (carrier + class_dirs[:, c])
        mix = class_dirs[:, ood_pair[0]] + class_dirs[:, ood_pair[1]]
        mix /= np.linalg.norm(mix)
        own = class_dirs[:, K]  # orthogonal to every ID class direction
        protos[K] = scale * (carrier + blend * mix + np.sqrt(1.0 - blend ** 2) * own)
        protos[K + 1] = scale * (-carrier + bg_dir)
        banks.append(protos)
    return PrototypeBank(appearance=banks[0], motion=banks[1])


def _plan_segments(rng, config: SynthConfig, allow_ood: bool):
    """Lay out non-overlapping segments with >= 1-frame gaps; returns the
    spans plus per-segment OOD flags (class labels are assigned later,
    balanced across the whole split)."""
    T = config.frames
    n_target = int(rng.integers(1, config.segments_per_clip + 1))
    segments, ood_flags = [], []
    cursor = 0
    for _ in range(n_target):
        gap = int(rng.integers(1, 4))
        length = int(rng.integers(config.segment_min, config.segment_max + 1))
        start = cursor + gap
        end = start + length
        if end > T - 1:
            break
        segments.append((start, end))
        ood_flags.append(bool(allow_ood and rng.random() < config.ood_fraction))
        cursor = end
    if not segments:  # geometry guarantees room for at least one segment
        segments.append((1, 1 + config.segment_min))
        ood_flags.append(bool(allow_ood and rng.random() < config.ood_fraction))
    return segments, ood_flags


def _synth_clip(rng, config: SynthConfig, protos: PrototypeBank, video_id: str,
                segments, labels) -> tuple[ObjectFeatureClip, Annotation]:
    T, S, d = config.frames, config.objects, config.feature_dim
    K = config.num_classes
    bg_row = K + 1
    row_of = np.full(T, bg_row, dtype=int)
    for (s, e), lab in zip(segments, labels):
        row_of[s:e] = K if lab == OOD_LABEL else lab

    def noisy(proto_rows, shape):
        return proto_rows + config.noise * rng.standard_normal(shape)

    app_local = noisy(protos.appearance[row_of][:, None, :], (T, S, d))
    mot_local = noisy(protos.motion[row_of][:, None, :], (T, S, d))
    app_global = noisy(protos.appearance[row_of], (T, d))
    mot_global = noisy(protos.motion[row_of], (T, d))

    x1y1 = rng.uniform(0.0, 0.6, size=(T, S, 2))
    wh = rng.uniform(0.1, 0.35, size=(T, S, 2))
    boxes = np.concatenate([x1y1, np.minimum(x1y1 + wh, 1.0)], axis=2)

    def f32(a):  # features live as float32 on disk; keep memory bit-compatible
        return a.astype(np.float32).astype(np.float64)

    clip = ObjectFeatureClip(
        video_id=video_id,
        appearance_local=f32(app_local), motion_local=f32(mot_local),
        appearance_global=f32(app_global), motion_global=f32(mot_global),
        boxes=f32(boxes), num_classes=K,
    )
    return clip, Annotation(segments, labels, frame_mask(segments, T))


def generate_split(config: SynthConfig, protos: PrototypeBank, split: str,
                   n_clips: int, seed: int, out_dir: str) -> DatasetManifest:
    """Generate one split of clips and write its manifest."""
    allow_ood = split != "train"
    if split == "train" and config.train_ood:
        raise ContractError("OOD segments were requested in the train split")
    split_id = {"train": 0, "val": 1, "test": 2}[split]
    os.makedirs(out_dir, exist_ok=True)

    plans = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, 7, split_id, i])
        plans.append((rng, *_plan_segments(rng, config, allow_ood)))

    if allow_ood and n_clips > 0:
        # the split must exercise both outcomes; flip deterministically if not
        all_flags = [f for _, _, flags in plans for f in flags]
        if not any(all_flags):
            plans[0][2][0] = True
        if all(all_flags):
            plans[0][2][0] = False

    # assign ID classes balanced across the split so no class is starved
    n_id_slots = sum(1 for _, _, flags in plans for f in flags if not f)
    pool_rng = np.random.default_rng([seed, 8, split_id])
    class_pool: list[int] = []
    while len(class_pool) < n_id_slots:
        class_pool.extend(int(c) for c in pool_rng.permutation(config.num_classes))

    paths = []
    slot = 0
    for i, (rng, segments, ood_flags) in enumerate(plans):
        labels = []
        for flag in ood_flags:
            if flag:
                labels.append(OOD_LABEL)
            else:
                labels.append(class_pool[slot])
                slot += 1
        video_id = f"{split}_{i:04d}"
        clip, ann = _synth_clip(rng, config, protos, video_id, segments, labels)
        path = os.path.join(out_dir, f"{video_id}.bin")
        save_clip(path, clip, ann)
        paths.append(os.path.abspath(path))

    manifest = DatasetManifest(
        num_classes=config.num_classes,
        class_names=[f"class_{c}" for c in range(config.num_classes)],
        split=split,
        clip_paths=paths,
    )
    save_manifest(os.path.join(out_dir, f"{split}_manifest.json"), manifest)
    return manifest


def generate_synthetic(config: SynthConfig, seed: int, out_dir: str) -> dict[str, DatasetManifest]:
    """Generate train/val/test splits; fully deterministic given the seed."""
    config.validate()
    protos = make_prototypes(config, seed)
    counts = {"train": config.train_clips, "val": config.val_clips, "test": config.test_clips}
    return {split: generate_split(config, protos, split, n, seed, out_dir)
            for split, n in counts.items()}
