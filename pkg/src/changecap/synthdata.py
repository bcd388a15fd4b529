"""Synthetic bi-temporal scene generator and dataset manifest IO.

Scenes are textured noise backgrounds with rectangular "buildings" and
full-span "roads". Each item carries 5 paraphrase captions describing the
change (or the absence of one). Captions are a deterministic function of
the scene's change attributes, so two items with identical attributes have
verbatim-identical caption sets; the generator injects such duplicates on
purpose to create known false negatives for contrastive training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ManifestError

CHANGE_KINDS = ("none", "add_building", "add_road", "remove_building")

LOCATIONS = (
    "top left",
    "top center",
    "top right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom center",
    "bottom right",
)

PALETTE = {
    "gray": (0.55, 0.55, 0.55),
    "white": (0.92, 0.92, 0.9),
    "red": (0.7, 0.25, 0.2),
    "blue": (0.3, 0.4, 0.65),
    "brown": (0.5, 0.38, 0.25),
    "dark": (0.2, 0.2, 0.22),
}
COLOR_NAMES = tuple(PALETTE)

_COUNT_WORDS = {2: "two", 3: "three"}

# (singular, plural) caption templates per change kind; {c}=color, {l}=location, {n}=count word
_ADD_BUILDING = [
    ("a {c} building appears at the {l}", "{n} {c} buildings appear at the {l}"),
    ("a new {c} building is built at the {l}", "{n} new {c} buildings are built at the {l}"),
    ("a {c} building has been constructed at the {l}", "{n} {c} buildings have been constructed at the {l}"),
    ("there is a new {c} building at the {l}", "there are {n} new {c} buildings at the {l}"),
    ("a {c} building shows up at the {l}", "{n} {c} buildings show up at the {l}"),
]
_ADD_ROAD = [
    ("a {c} road appears at the {l}", "{n} {c} roads appear at the {l}"),
    ("a new {c} road is built across the {l}", "{n} new {c} roads are built across the {l}"),
    ("a {c} road has been constructed at the {l}", "{n} {c} roads have been constructed at the {l}"),
    ("there is a new {c} road at the {l}", "there are {n} new {c} roads at the {l}"),
    ("a {c} road crosses the scene at the {l}", "{n} {c} roads cross the scene at the {l}"),
]
_REMOVE_BUILDING = [
    ("the {c} building at the {l} disappears", "{n} {c} buildings at the {l} disappear"),
    ("the {c} building at the {l} has been removed", "{n} {c} buildings at the {l} have been removed"),
    ("the {c} building at the {l} is demolished", "{n} {c} buildings at the {l} are demolished"),
    ("there is no longer a {c} building at the {l}", "there are no longer {n} {c} buildings at the {l}"),
    ("the {c} building at the {l} is gone", "{n} {c} buildings at the {l} are gone"),
]
NO_CHANGE_CAPTIONS = [
    "the scene remains the same",
    "there is no change in the scene",
    "nothing has changed between the two images",
    "the two scenes look identical",
    "no change has occurred in the area",
]


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    no_change_fraction: float = 0.5
    duplicate_rate: float = 0.1  # fraction of change pairs that clone another pair's captions
    noise_sigma: float = 0.03

    def validate(self):
        if self.image_size < 32:
            raise ConfigurationError(f"image_size must be >= 32, got {self.image_size}")
        if not 0.0 <= self.no_change_fraction <= 1.0:
            raise ConfigurationError("no_change_fraction must be in [0, 1]")
        if not 0.0 <= self.duplicate_rate <= 1.0:
            raise ConfigurationError("duplicate_rate must be in [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    change_kind: str = "none"
    location: int = 4  # index into LOCATIONS
    object_count: int = 1
    color: str = "gray"


@dataclass
class ImagePair:
    before: np.ndarray  # H x W x 3, float in [0, 1]
    after: np.ndarray
    pair_id: int = 0


@dataclass
class CaptionRecord:
    text: str
    token_ids: np.ndarray
    pair_label: int
    sim_embedding: np.ndarray


@dataclass
class DatasetItem:
    pair_id: int
    pair: ImagePair
    captions: list[str]


@dataclass
class ManifestItem:
    pair_id: int
    before: str
    after: str
    captions: list[str]


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    split: str = "train"


def _quantize(img):
    """Snap to the 8-bit grid so in-memory data equals a PNG round-trip."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _cell_bounds(location, size):
    row, col = divmod(location, 3)
    ch = size // 3
    return row * ch, min((row + 1) * ch, size), col * ch, min((col + 1) * ch, size)


def _draw_rect(img, rng, r0, r1, c0, c1, color, min_side=6):
    h = int(rng.integers(min_side, max(min_side + 1, r1 - r0)))
    w = int(rng.integers(min_side, max(min_side + 1, c1 - c0)))
    rr = int(rng.integers(r0, max(r0 + 1, r1 - h)))
    cc = int(rng.integers(c0, max(c0 + 1, c1 - w)))
    img[rr : rr + h, cc : cc + w] = color


def captions_for(spec: SceneSpec) -> list[str]:
    """The 5 paraphrase captions for a scene; depends only on change attributes."""
    if spec.change_kind == "none":
        return list(NO_CHANGE_CAPTIONS)
    templates = {
        "add_building": _ADD_BUILDING,
        "add_road": _ADD_ROAD,
        "remove_building": _REMOVE_BUILDING,
    }[spec.change_kind]
    loc = LOCATIONS[spec.location]
    if spec.object_count == 1:
        return [t[0].format(c=spec.color, l=loc) for t in templates]
    n = _COUNT_WORDS[spec.object_count]
    return [t[1].format(c=spec.color, l=loc, n=n) for t in templates]


def generate_scene(spec: SceneSpec, config: GeneratorConfig, pair_id: int = 0):
    """Render one deterministic bi-temporal scene and its 5 captions."""
    config.validate()
    if spec.seed < 0:
        raise ConfigurationError("spec.seed must be >= 0")
    if spec.change_kind not in CHANGE_KINDS:
        raise ConfigurationError(f"unknown change_kind {spec.change_kind!r}")
    size = config.image_size
    rng = np.random.default_rng(spec.seed)

    base_color = rng.uniform((0.2, 0.3, 0.12), (0.4, 0.5, 0.28))
    canvas = np.broadcast_to(base_color, (size, size, 3)).copy()
    canvas += rng.normal(0.0, config.noise_sigma, (size, size, 3))
    # static clutter shared by both images
    for _ in range(int(rng.integers(2, 6))):
        color = PALETTE[COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]]
        _draw_rect(canvas, rng, 0, size, 0, size, color, min_side=4)

    before = canvas.copy()
    after = canvas.copy()
    if spec.change_kind != "none":
        target = after if spec.change_kind in ("add_building", "add_road") else before
        r0, r1, c0, c1 = _cell_bounds(spec.location, size)
        color = PALETTE[spec.color]
        if spec.change_kind == "add_road":
            for _ in range(spec.object_count):
                width = int(rng.integers(2, 5))
                if rng.random() < 0.5:  # horizontal, full image width
                    rr = int(rng.integers(r0, max(r0 + 1, r1 - width)))
                    target[rr : rr + width, :] = color
                else:
                    cc = int(rng.integers(c0, max(c0 + 1, c1 - width)))
                    target[:, cc : cc + width] = color
        else:
            for _ in range(spec.object_count):
                _draw_rect(target, rng, r0, r1, c0, c1, color)

    pair = ImagePair(_quantize(before), _quantize(after), pair_id=pair_id)
    return pair, captions_for(spec)


def _change_combos():
    combos = []
    for kind in ("add_building", "add_road", "remove_building"):
        for loc in range(len(LOCATIONS)):
            for count in (1, 2, 3):
                for color in COLOR_NAMES:
                    combos.append((kind, loc, count, color))
    return combos


def sample_specs(n_items: int, seed: int, config: GeneratorConfig) -> list[SceneSpec]:
    """Sample scene specs: ~no_change_fraction no-change items, unique change
    attribute combos where possible, then a duplicate_rate fraction of change
    items cloning a donor's attributes (verbatim-duplicate captions)."""
    config.validate()
    rng = np.random.default_rng(seed)
    deck = _change_combos()
    rng.shuffle(deck)
    deck_pos = 0

    specs = []
    change_idx = []
    for i in range(n_items):
        item_seed = int(rng.integers(0, 2**31 - 1))
        if rng.random() < config.no_change_fraction:
            specs.append(SceneSpec(seed=item_seed))
        else:
            if deck_pos >= len(deck):
                rng.shuffle(deck)
                deck_pos = 0
            kind, loc, count, color = deck[deck_pos]
            deck_pos += 1
            change_idx.append(i)
            specs.append(SceneSpec(item_seed, kind, loc, count, color))

    n_dup = int(round(config.duplicate_rate * len(change_idx)))
    if n_dup and len(change_idx) >= 2:
        targets = rng.choice(len(change_idx), size=n_dup, replace=False)
        for t in targets:
            donor = int(rng.integers(len(change_idx) - 1))
            if donor >= t:
                donor += 1
            d = specs[change_idx[donor]]
            i = change_idx[int(t)]
            specs[i] = SceneSpec(specs[i].seed, d.change_kind, d.location, d.object_count, d.color)
    return specs


def generate_dataset(n_items: int, seed: int, config: GeneratorConfig | None = None):
    """Generate items plus the ground-truth ledger of verbatim-duplicate groups.

    Returns (items, duplicate_groups) where duplicate_groups is a list of
    pair_id lists whose 5-caption sets are verbatim identical.
    """
    config = config or GeneratorConfig()
    specs = sample_specs(n_items, seed, config)
    items = []
    for pair_id, spec in enumerate(specs):
        pair, captions = generate_scene(spec, config, pair_id=pair_id)
        items.append(DatasetItem(pair_id, pair, captions))
    return items, duplicate_groups(items)


def duplicate_groups(items) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for it in items:
        groups.setdefault(tuple(it.captions), []).append(it.pair_id)
    return [ids for ids in groups.values() if len(ids) > 1]


# ---------------------------------------------------------------------------
# Manifest IO


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for it in manifest.items:
            rec = {
                "pair_id": it.pair_id,
                "before": it.before,
                "after": it.after,
                "captions": it.captions,
            }
            f.write(json.dumps(rec) + "\n")


def load_manifest(path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    items = []
    seen = set()
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                item = ManifestItem(
                    pair_id=int(rec["pair_id"]),
                    before=str(rec["before"]),
                    after=str(rec["after"]),
                    captions=list(rec["captions"]),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed manifest record: {exc}") from exc
            if len(item.captions) != 5:
                raise ManifestError(
                    f"{path}:{lineno}: pair_id {item.pair_id} has "
                    f"{len(item.captions)} captions, expected 5"
                )
            if item.pair_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate pair_id {item.pair_id}")
            seen.add(item.pair_id)
            items.append(item)
    return DatasetManifest(items=items, split=split or path.stem)


def export_dataset(items: list[DatasetItem], root, split: str) -> DatasetManifest:
    """Write images as 8-bit PNGs plus a JSONL manifest under root."""
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest_items = []
    for it in items:
        before_rel = f"images/{it.pair_id:06d}_before.png"
        after_rel = f"images/{it.pair_id:06d}_after.png"
        for rel, arr in ((before_rel, it.pair.before), (after_rel, it.pair.after)):
            img8 = np.round(arr * 255.0).astype(np.uint8)
            Image.fromarray(img8, mode="RGB").save(root / rel)
        manifest_items.append(ManifestItem(it.pair_id, before_rel, after_rel, it.captions))
    manifest = DatasetManifest(manifest_items, split=split)
    write_manifest(manifest, root / f"{split}.jsonl")
    return manifest


def load_items(root, split: str) -> list[DatasetItem]:
    root = Path(root)
    manifest = load_manifest(root / f"{split}.jsonl", split=split)
    items = []
    for mi in manifest.items:
        before = np.asarray(Image.open(root / mi.before).convert("RGB"), dtype=np.float64) / 255.0
        after = np.asarray(Image.open(root / mi.after).convert("RGB"), dtype=np.float64) / 255.0
        items.append(DatasetItem(mi.pair_id, ImagePair(before, after, mi.pair_id), mi.captions))
    return items


# ---------------------------------------------------------------------------
# Batching


def make_batches(
    items: list[DatasetItem],
    batch_size: int,
    shuffle_seed: int,
    vocab,
    provider,
    max_len: int = 40,
    epoch: int = 0,
    hard_negative_plan: dict[int, list[int]] | None = None,
    fixed_caption_index: int | None = None,
) -> list[list[tuple[ImagePair, CaptionRecord]]]:
    """Partition items into contrastive batches for one epoch.

    Every item appears exactly once. One of the 5 captions is sampled per item
    (seeded by shuffle_seed and epoch). With a hard-negative plan, batches are
    greedily assembled so each anchor's planned negatives co-occur with it when
    they are still unplaced.
    """
    if batch_size < 2:
        raise ConfigurationError("batch_size must be >= 2 for contrastive training")
    rng = np.random.default_rng([shuffle_seed, epoch])
    by_id = {it.pair_id: i for i, it in enumerate(items)}
    if fixed_caption_index is None:
        caption_choice = {it.pair_id: int(rng.integers(5)) for it in items}
    else:
        caption_choice = {it.pair_id: fixed_caption_index for it in items}

    order = np.arange(len(items))
    rng.shuffle(order)

    groups: list[list[int]] = []
    cur: list[int] = []
    placed: set[int] = set()
    for idx in order:
        idx = int(idx)
        if idx in placed:
            continue
        cur.append(idx)
        placed.add(idx)
        if hard_negative_plan is not None:
            for neg_id in hard_negative_plan.get(items[idx].pair_id, []):
                j = by_id.get(neg_id)
                if j is not None and j not in placed and len(cur) < batch_size:
                    cur.append(j)
                    placed.add(j)
        if len(cur) >= batch_size:
            groups.append(cur)
            cur = []
    if cur:
        if len(cur) == 1 and groups:
            groups[-1].extend(cur)
        else:
            groups.append(cur)

    batches = []
    for group in groups:
        batch = []
        for idx in group:
            it = items[idx]
            text = it.captions[caption_choice[it.pair_id]]
            record = CaptionRecord(
                text=text,
                token_ids=vocab.encode(text, max_len),
                pair_label=it.pair_id,
                sim_embedding=provider.embed(text),
            )
            batch.append((it.pair, record))
        batches.append(batch)
    return batches
