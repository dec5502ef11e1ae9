"""Synthetic identity-structured corpus: procedural person images, keypoint
poses, template-grammar captions, filtering utilities, and the identity pair
index used for hard-negative sampling.

The generator is built so the different factors are separable by
construction: appearance and background live only in the pixels, the
normal/anomaly distinction lives only in the keypoint channels and the
action token of the caption. That separation is what makes the hard-negative
and pose ablations meaningful, and it is checked by probe-based tests.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .model import CLS_ID, PAD_ID, SEP_ID
from .objectives import TrainingBatch, mask_tokens
from .tensor import read_tensor, write_tensor

MANIFEST_SCHEMA_VERSION = 1
HEATMAP_SIGMA = 1.5
N_KEYPOINTS = 17
MAX_TEXT_LEN = 56

# -- vocabulary --------------------------------------------------------------

SPECIAL_WORDS = ["[CLS]", "[PAD]", "[MASK]", "[SEP]"]
PERSON_SUBJECTS = ["man", "woman", "person", "boy", "girl", "he", "she", "people"]
OTHER_SUBJECTS = ["dog", "cat", "robot", "car"]
COLORS = ["red", "blue", "green", "yellow", "black", "white", "purple",
          "orange", "pink", "brown", "gray", "cyan", "magenta", "beige"]
GARMENT_TOPS = ["jacket", "shirt", "coat", "hoodie", "sweater", "dress",
                "vest", "uniform", "tshirt", "blouse", "raincoat", "jersey"]
GARMENT_BOTTOMS = ["jeans", "trousers", "shorts", "skirt", "pants",
                   "leggings", "slacks", "overalls"]
NORMAL_ACTIONS = ["walking", "running", "jumping", "standing", "sitting",
                  "skateboarding", "dancing", "cycling", "climbing",
                  "waving", "stretching", "jogging"]
ANOMALY_ACTIONS = ["falling", "lying", "slipping", "tripping", "collapsing",
                   "crashing", "stumbling", "fainting", "tumbling",
                   "sliding", "toppling", "dropping"]
SCENES = ["park", "street", "beach", "gym", "plaza", "station", "parking",
          "playground", "bridge", "market", "stairs", "lobby"]
CONNECTORS = ["a", "in", "wearing", "and", "the", "is", "on", "with"]

VOCAB_SIZE = 512


class Vocabulary:
    """Fixed word list of size 512 with the special ids at the front."""

    def __init__(self):
        words = (SPECIAL_WORDS + PERSON_SUBJECTS + OTHER_SUBJECTS + COLORS
                 + GARMENT_TOPS + GARMENT_BOTTOMS + NORMAL_ACTIONS
                 + ANOMALY_ACTIONS + SCENES + CONNECTORS)
        words += [f"w{i:03d}" for i in range(VOCAB_SIZE - len(words))]
        assert len(words) == VOCAB_SIZE
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return VOCAB_SIZE

    def encode(self, words):
        unknown = [w for w in words if w not in self.index]
        if unknown:
            raise KeyError(f"unknown tokens: {unknown}")
        return np.array([self.index[w] for w in words], dtype=np.int64)

    def decode(self, ids):
        return [self.words[int(i)] for i in ids]


VOCAB = Vocabulary()
PERSON_LEXICON = frozenset(PERSON_SUBJECTS)

_COLOR_RGB = {
    "red": (0.85, 0.15, 0.15), "blue": (0.15, 0.25, 0.85), "green": (0.15, 0.7, 0.2),
    "yellow": (0.9, 0.85, 0.1), "black": (0.08, 0.08, 0.08), "white": (0.95, 0.95, 0.95),
    "purple": (0.55, 0.15, 0.75), "orange": (0.95, 0.55, 0.1), "pink": (0.95, 0.6, 0.75),
    "brown": (0.55, 0.35, 0.15), "gray": (0.5, 0.5, 0.5), "cyan": (0.1, 0.8, 0.85),
    "magenta": (0.85, 0.1, 0.75), "beige": (0.9, 0.85, 0.7),
}
_SCENE_RGB = {s: c for s, c in zip(SCENES, [
    (0.2, 0.55, 0.25), (0.45, 0.45, 0.5), (0.85, 0.75, 0.5), (0.6, 0.3, 0.3),
    (0.65, 0.6, 0.55), (0.4, 0.4, 0.3), (0.3, 0.3, 0.35), (0.7, 0.5, 0.3),
    (0.5, 0.55, 0.6), (0.6, 0.45, 0.55), (0.55, 0.5, 0.4), (0.35, 0.5, 0.55),
])}


# -- domain types ------------------------------------------------------------


@dataclass
class IdentitySpec:
    identity_id: int
    color_top: str
    garment_top: str
    color_bottom: str
    garment_bottom: str
    normal_action: str
    anomaly_action: str
    scene: str
    appearance_vector: np.ndarray  # shared by both variants of the identity
    background_vector: np.ndarray


@dataclass
class CorpusRecord:
    record_id: int
    identity_id: int
    variant: str              # "normal" | "anomaly"
    caption_kind: str         # "C_n" | "C_a" | "C_a_plus"
    caption: np.ndarray       # token ids, position 0 is [CLS]
    keypoints: np.ndarray     # [17, 3] of (x, y, confidence) in the unit square
    attributes: dict          # {"action_or_anomaly": word, "scene": word}
    image: np.ndarray         # [H, W, 3] float32 in [0, 1]
    split: str = "train"
    _heatmap: np.ndarray | None = field(default=None, repr=False, compare=False)

    def heatmap(self):
        if self._heatmap is None:
            self._heatmap = rasterize_keypoints(self.keypoints, self.image.shape[0])
        return self._heatmap


class PairIndex:
    """identity_id -> (normal record ids, anomaly record ids), O(1) lookups."""

    def __init__(self, by_identity=None):
        self.by_identity = by_identity or {}

    @classmethod
    def build(cls, records):
        by_identity = {}
        for r in records:
            sides = by_identity.setdefault(r.identity_id, {"normal": [], "anomaly": []})
            sides[r.variant].append(r.record_id)
        return cls(by_identity)

    def counterpart_ids(self, record):
        """Record ids of the same identity's opposite variant."""
        sides = self.by_identity.get(record.identity_id)
        if sides is None:
            return []
        other = "anomaly" if record.variant == "normal" else "normal"
        return sides[other]

    def has_both_variants(self, identity_id):
        sides = self.by_identity.get(identity_id)
        return bool(sides and sides["normal"] and sides["anomaly"])

    def to_json(self):
        return {str(k): v for k, v in sorted(self.by_identity.items())}

    @classmethod
    def from_json(cls, d):
        return cls({int(k): v for k, v in d.items()})


# -- pose synthesis ----------------------------------------------------------

# Upright 17-joint skeleton (x, y) in the unit square, y growing downward:
# nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
_BASE_SKELETON = np.array([
    [0.50, 0.12], [0.47, 0.10], [0.53, 0.10], [0.44, 0.12], [0.56, 0.12],
    [0.40, 0.25], [0.60, 0.25], [0.36, 0.40], [0.64, 0.40], [0.34, 0.52],
    [0.66, 0.52], [0.44, 0.52], [0.56, 0.52], [0.43, 0.70], [0.57, 0.70],
    [0.42, 0.88], [0.58, 0.88],
])


def pose_template(action, anomaly):
    """Deterministic 17x2 keypoint layout for one action label.

    Normal actions stay upright with action-specific limb offsets; anomaly
    actions rotate the skeleton towards horizontal (fallen postures).
    """
    actions = ANOMALY_ACTIONS if anomaly else NORMAL_ACTIONS
    idx = actions.index(action)
    rng = np.random.default_rng(10_000 * int(anomaly) + idx)
    coords = _BASE_SKELETON + rng.uniform(-0.06, 0.06, size=_BASE_SKELETON.shape)
    if anomaly:
        center = np.array([0.5, 0.5])
        angle = np.pi / 2 + (idx - len(actions) / 2) * 0.06
        rot = np.array([[np.cos(angle), -np.sin(angle)],
                        [np.sin(angle), np.cos(angle)]])
        coords = (coords - center) @ rot.T
        coords[:, 1] *= 0.6               # squash towards the ground plane
        coords = coords + np.array([0.5, 0.72])
    return np.clip(coords, 0.04, 0.96)


def rasterize_keypoints(keypoints, size, sigma=HEATMAP_SIGMA):
    """[17, 3] keypoints -> [size, size, 17] Gaussian heatmaps.

    Channel k peaks at keypoint k with amplitude equal to its confidence.
    """
    kps = np.asarray(keypoints)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    cx = kps[:, 0] * (size - 1)
    cy = kps[:, 1] * (size - 1)
    d2 = ((xs[..., None] - cx) ** 2 + (ys[..., None] - cy) ** 2)
    return (kps[:, 2] * np.exp(-d2 / (2.0 * sigma * sigma))).astype(np.float32)


# -- image synthesis ---------------------------------------------------------


def _checker(size, freq, phase=0.0):
    ax = np.arange(size)
    return 0.5 * (1 + np.sign(np.sin((ax[:, None] * 0.9 + ax[None, :] * 1.3)
                                     * freq * np.pi / size + phase)))


def render_image(spec: IdentitySpec, rng, size=32, border=None):
    """Procedural pseudo-image: appearance pattern inside, background border.

    Deliberately carries no action/variant information; the variant signal
    lives only in the keypoint channels.
    """
    border = border if border is not None else max(size // 8, 2)
    img = np.empty((size, size, 3), dtype=np.float32)
    bg = np.clip(np.asarray(_SCENE_RGB[spec.scene]) + spec.background_vector[:3] * 0.15, 0, 1)
    img[:] = bg
    inner = size - 2 * border
    top_rgb = np.asarray(_COLOR_RGB[spec.color_top])
    bot_rgb = np.asarray(_COLOR_RGB[spec.color_bottom])
    freq_top = GARMENT_TOPS.index(spec.garment_top) + 2
    freq_bot = GARMENT_BOTTOMS.index(spec.garment_bottom) + 2
    half = inner // 2
    tex_top = _checker(inner, freq_top, phase=spec.appearance_vector[0])[:half]
    tex_bot = _checker(inner, freq_bot, phase=spec.appearance_vector[1])[half:inner]
    body = np.empty((inner, inner, 3), dtype=np.float32)
    body[:half] = top_rgb * (0.7 + 0.3 * tex_top[..., None])
    body[half:] = bot_rgb * (0.7 + 0.3 * tex_bot[..., None])
    img[border:size - border, border:size - border] = body
    img += rng.normal(0.0, 0.05, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


# -- captions ----------------------------------------------------------------


def caption_words(spec: IdentitySpec, anomaly):
    action = spec.anomaly_action if anomaly else spec.normal_action
    return ["[CLS]", "a", "man" if spec.identity_id % 2 == 0 else "woman",
            "wearing", "a", spec.color_top, spec.garment_top, "and",
            spec.color_bottom, spec.garment_bottom, "is", action,
            "in", "the", spec.scene]


def concat_captions(c_n, c_a, max_len=MAX_TEXT_LEN):
    """Concatenate a normal and an anomaly caption with a separator,
    truncating to `max_len` while preserving the front."""
    c_n = list(np.asarray(c_n).tolist())
    c_a = list(np.asarray(c_a).tolist())
    if c_a and c_a[0] == CLS_ID:
        c_a = c_a[1:]
    combined = c_n + [SEP_ID] + c_a
    return np.array(combined[:max_len], dtype=np.int64)


def subject_filter(caption, person_lexicon=None, vocab=VOCAB):
    """True iff the caption's subject slot refers to a person.

    The template grammar places the subject right after "[CLS] a".
    """
    lexicon = person_lexicon or PERSON_LEXICON
    ids = np.asarray(caption)
    slot = 2 if ids.size > 2 and ids[0] == CLS_ID else 1
    if ids.size <= slot:
        return False
    return vocab.words[int(ids[slot])] in lexicon


# -- generation --------------------------------------------------------------


def _make_identity(identity_id, combo_idx, rng):
    n_bottom_colors = len(COLORS)
    c1, rest = divmod(combo_idx, len(GARMENT_TOPS) * n_bottom_colors * len(GARMENT_BOTTOMS))
    g1, rest = divmod(rest, n_bottom_colors * len(GARMENT_BOTTOMS))
    c2, g2 = divmod(rest, len(GARMENT_BOTTOMS))
    return IdentitySpec(
        identity_id=identity_id,
        color_top=COLORS[c1],
        garment_top=GARMENT_TOPS[g1],
        color_bottom=COLORS[c2],
        garment_bottom=GARMENT_BOTTOMS[g2],
        normal_action=NORMAL_ACTIONS[rng.integers(len(NORMAL_ACTIONS))],
        anomaly_action=ANOMALY_ACTIONS[rng.integers(len(ANOMALY_ACTIONS))],
        scene=SCENES[rng.integers(len(SCENES))],
        appearance_vector=rng.uniform(-1, 1, size=4),
        background_vector=rng.uniform(-1, 1, size=3),
    )


def n_appearance_combos():
    return len(COLORS) * len(GARMENT_TOPS) * len(COLORS) * len(GARMENT_BOTTOMS)


def generate_corpus(n_identities, images_per_caption=1, ratio=(2, 3), seed=0,
                    image_size=32, split="train", identity_start=0,
                    record_start=0, anomaly_share_both=True):
    """Generate a deterministic identity-structured corpus.

    Per identity: ratio[0] * images_per_caption normal records (caption C_n)
    and ratio[1] * images_per_caption anomaly records (captions alternating
    C_a and, when `anomaly_share_both`, the concatenated C_a+). Appearance
    combos are assigned without replacement so captions are unique across
    identities.
    """
    if n_identities < 1:
        raise ValueError("n_identities must be >= 1")
    if n_identities > n_appearance_combos():
        raise ValueError(f"at most {n_appearance_combos()} distinct identities supported")
    combo_rng = np.random.default_rng([seed, 0xC0])
    combos = combo_rng.choice(n_appearance_combos(), size=n_identities, replace=False)

    records = []
    rid = record_start
    for i in range(n_identities):
        identity_id = identity_start + i
        rng = np.random.default_rng([seed, 1, identity_id])
        spec = _make_identity(identity_id, int(combos[i]), rng)
        c_n = VOCAB.encode(caption_words(spec, anomaly=False))
        c_a = VOCAB.encode(caption_words(spec, anomaly=True))
        c_a_plus = concat_captions(c_n, c_a)

        plan = [("normal", "C_n", c_n)] * (ratio[0] * images_per_caption)
        for j in range(ratio[1] * images_per_caption):
            if anomaly_share_both and j % 2 == 1:
                plan.append(("anomaly", "C_a_plus", c_a_plus))
            else:
                plan.append(("anomaly", "C_a", c_a))

        for variant, kind, caption in plan:
            anomaly = variant == "anomaly"
            action = spec.anomaly_action if anomaly else spec.normal_action
            kps_xy = pose_template(action, anomaly) + rng.normal(0, 0.01, size=(N_KEYPOINTS, 2))
            conf = rng.uniform(0.8, 1.0, size=(N_KEYPOINTS, 1))
            records.append(CorpusRecord(
                record_id=rid,
                identity_id=identity_id,
                variant=variant,
                caption_kind=kind,
                caption=caption.copy(),
                keypoints=np.clip(np.concatenate([kps_xy, conf], axis=1), 0.0, 1.0),
                attributes={"action_or_anomaly": action, "scene": spec.scene},
                image=render_image(spec, rng, size=image_size),
                split=split,
            ))
            rid += 1
    return records, PairIndex.build(records)


def generate_test_corpus(n_identities, seed=0, image_size=32, identity_start=100000):
    """Held-out identities with exactly one normal and one anomaly record
    each (1:1 ratio)."""
    return generate_corpus(
        n_identities, images_per_caption=1, ratio=(1, 1), seed=seed,
        image_size=image_size, split="test", identity_start=identity_start,
        anomaly_share_both=False,
    )


# -- pipeline filters --------------------------------------------------------


def extract_frame_pair(n_frames, anomaly_timestamp):
    """Middle frames of the segments before and after the anomaly timestamp."""
    t = anomaly_timestamp
    if not 0 < t < n_frames:
        raise ValueError(f"timestamp {t} outside clip of {n_frames} frames")
    return t // 2, (t + n_frames) // 2


def pose_presence_filter(records, min_keypoints=5, min_confidence=0.3):
    """Keep records with at least `min_keypoints` joints at or above
    `min_confidence`."""
    return [r for r in records
            if int(np.sum(np.asarray(r.keypoints)[:, 2] >= min_confidence)) >= min_keypoints]


def similarity_dedup(pairs, threshold=0.95):
    """Drop feature pairs with cosine similarity strictly greater than the
    threshold (boundary values are kept)."""
    kept = []
    for a, b in pairs:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError("similarity_dedup: zero-norm feature")
        if float(a @ b / (na * nb)) <= threshold:
            kept.append((a, b))
    return kept


# -- batch sampling ----------------------------------------------------------


def build_training_batch(chunk, all_records, index: PairIndex, rng, ihnm=True,
                         mask_rate=0.25, vocab_size=VOCAB_SIZE):
    """Assemble a TrainingBatch for an already-chosen list of positives."""
    by_id = {r.record_id: r for r in all_records}
    hn_records, text_fallback, image_fallback = [], [], []
    for r in chunk:
        cids = index.counterpart_ids(r) if ihnm else []
        if cids:
            hn = by_id[int(cids[rng.integers(len(cids))])]
            fallback = False
        else:
            while True:
                hn = all_records[rng.integers(len(all_records))]
                if hn.record_id != r.record_id:
                    break
            fallback = True
        hn_records.append(hn)
        text_fallback.append(fallback)
        image_fallback.append(fallback)

    pad_len = max(len(r.caption) for r in list(chunk) + hn_records)

    def padded(caption):
        out = np.full(pad_len, PAD_ID, dtype=np.int64)
        out[: len(caption)] = caption
        return out

    tokens = np.stack([padded(r.caption) for r in chunk])
    hn_tokens = np.stack([padded(r.caption) for r in hn_records])

    masked_rows, mask_rows, mask_cols, mask_targets = [], [], [], []
    for i, row in enumerate(tokens):
        masked, positions, originals = mask_tokens(
            row, rate=mask_rate, rng=rng, vocab_size=vocab_size)
        masked_rows.append(masked)
        mask_rows.extend([i] * len(positions))
        mask_cols.extend(positions.tolist())
        mask_targets.extend(originals.tolist())

    return TrainingBatch(
        images=np.stack([r.image for r in chunk]),
        poses=np.stack([r.heatmap() for r in chunk]),
        tokens=tokens,
        hn_text_tokens=hn_tokens,
        hn_images=np.stack([r.image for r in hn_records]),
        hn_poses=np.stack([r.heatmap() for r in hn_records]),
        hn_text_fallback=np.array(text_fallback, dtype=bool),
        hn_image_fallback=np.array(image_fallback, dtype=bool),
        masked_tokens=np.stack(masked_rows),
        mask_rows=np.array(mask_rows, dtype=np.int64),
        mask_cols=np.array(mask_cols, dtype=np.int64),
        mask_targets=np.array(mask_targets, dtype=np.int64),
    )


def sample_batch_ihnm(records, index: PairIndex, batch_size, rng, ihnm=True,
                      mask_rate=0.25, vocab_size=VOCAB_SIZE):
    """Sample a batch of positives and attach identity-based hard negatives
    (or flagged random fallbacks for one-sided identities)."""
    if len(records) < batch_size:
        raise ValueError(f"corpus size {len(records)} < batch size {batch_size}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    chosen = rng.choice(len(records), size=batch_size, replace=False)
    chunk = [records[i] for i in chosen]
    return build_training_batch(chunk, records, index, rng, ihnm=ihnm,
                                mask_rate=mask_rate, vocab_size=vocab_size)


# -- manifest IO -------------------------------------------------------------


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_corpus(out_dir, records, index: PairIndex, meta=None):
    """Write manifest.jsonl, pair_index.json, and per-record image/pose
    tensors. Output is byte-identical for identical inputs."""
    tensor_dir = os.path.join(out_dir, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as f:
        header = {"schema_version": MANIFEST_SCHEMA_VERSION,
                  "n_records": len(records)}
        header.update(meta or {})
        f.write(_canonical(header) + "\n")
        for r in records:
            img_path = f"tensors/img_{r.record_id:06d}.cmpt"
            pose_path = f"tensors/pose_{r.record_id:06d}.cmpt"
            write_tensor(os.path.join(out_dir, img_path), r.image)
            write_tensor(os.path.join(out_dir, pose_path),
                         r.keypoints.astype(np.float32))
            f.write(_canonical({
                "record_id": r.record_id,
                "identity_id": r.identity_id,
                "variant": r.variant,
                "caption_kind": r.caption_kind,
                "caption": np.asarray(r.caption).tolist(),
                "attributes": r.attributes,
                "split": r.split,
                "image": img_path,
                "pose": pose_path,
            }) + "\n")
    with open(os.path.join(out_dir, "pair_index.json"), "w") as f:
        f.write(_canonical(index.to_json()) + "\n")


def read_corpus(corpus_dir):
    """Load a corpus written by `write_corpus`. Returns (records, index, header)."""
    records = []
    with open(os.path.join(corpus_dir, "manifest.jsonl")) as f:
        header = json.loads(f.readline())
        if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema: {header.get('schema_version')}")
        for line in f:
            d = json.loads(line)
            records.append(CorpusRecord(
                record_id=d["record_id"],
                identity_id=d["identity_id"],
                variant=d["variant"],
                caption_kind=d["caption_kind"],
                caption=np.array(d["caption"], dtype=np.int64),
                keypoints=read_tensor(os.path.join(corpus_dir, d["pose"])).astype(np.float64),
                attributes=d["attributes"],
                image=read_tensor(os.path.join(corpus_dir, d["image"])),
                split=d["split"],
            ))
    with open(os.path.join(corpus_dir, "pair_index.json")) as f:
        index = PairIndex.from_json(json.load(f))
    return records, index, header
