"""Dataset IO and generators.

Covers the IDX image/label file format, a seed-deterministic synthetic
handwritten-digit corpus (a desk-scale stand-in when the real scans are
not on disk), the two pixel-level confounded variants (corner-patch decoy
and class-color tinting), concept-matrix generators driven by class-level
generative rules, noisy prototype concept vectors, and learner/critic/test
split management.

All generation is a pure function of (config, seed); sets are immutable
after construction and carry globally unique sample ids so split
invariants can be asserted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import logic, nets


class DataError(ValueError):
    pass


@dataclass
class LabeledSet:
    """Inputs + labels + bookkeeping. Images live in [0,1]."""

    inputs: np.ndarray       # [N,C,H,W] images or [N,O,A] concept matrices
    labels: np.ndarray       # int64 [N]
    kind: str
    n_classes: int
    confounded: bool = False
    seed: int = 0
    sample_ids: np.ndarray = field(default=None)  # int64 [N], unique

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if len(self.inputs) != len(self.labels) or len(self.labels) != len(self.sample_ids):
            raise DataError("inputs/labels/sample_ids lengths differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0,{self.n_classes})")
        if self.inputs.ndim == 4 and len(self.inputs):
            lo, hi = self.inputs.min(), self.inputs.max()
            if lo < -1e-9 or hi > 1 + 1e-9:
                raise DataError(f"image values outside [0,1]: [{lo}, {hi}]")

    def __len__(self):
        return len(self.labels)

    @property
    def n(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "LabeledSet":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx],
                       sample_ids=self.sample_ids[idx])


# ---------------------------------------------------------------------------
# IDX files (big-endian headers, ubyte payloads)

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path, magic_want, ndims):
    with open(path, "rb") as fh:
        head = fh.read(4 * (1 + ndims))
        if len(head) != 4 * (1 + ndims):
            raise DataError(f"{path}: truncated header")
        magic, *dims = struct.unpack(f">{1 + ndims}I", head)
        if magic != magic_want:
            raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{magic_want:08x}")
        count = int(np.prod(dims, dtype=np.int64))
        payload = fh.read(count)
        if len(payload) != count:
            raise DataError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledSet:
    """Parse an IDX image/label file pair into [N,1,H,W] floats in [0,1]."""
    images = _read_idx(images_path, _IDX_IMAGES, 3)
    labels = _read_idx(labels_path, _IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledSet(x, labels.astype(np.int64), kind="idx", n_classes=10)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray):
    """Write an IDX pair; images_u8 is uint8 [N,H,W]."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", _IDX_IMAGES, n, h, w))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", _IDX_LABELS, n))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic digit corpus
#
# Each digit class is a set of stroke polylines on a unit square (y down).
# Per sample the control points get smooth jitter plus a random affine, and
# the result is rasterized by distance-to-segment with a soft edge. The
# jitter/noise knobs set task difficulty.

def _circle(cx, cy, rx, ry, a0, a1, n=14):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _digit_strokes() -> dict[int, list[np.ndarray]]:
    L = lambda *pts: np.array(pts, dtype=np.float64)  # noqa: E731
    return {
        0: [_circle(0.50, 0.50, 0.18, 0.31, -90, 270, 22)],
        1: [L((0.40, 0.28), (0.55, 0.15), (0.55, 0.85))],
        2: [np.concatenate([_circle(0.50, 0.32, 0.17, 0.17, 180, 360, 10),
                            L((0.67, 0.32), (0.33, 0.85), (0.70, 0.85))])],
        3: [np.concatenate([_circle(0.47, 0.32, 0.16, 0.17, 215, 90, 10),
                            _circle(0.47, 0.67, 0.17, 0.18, -90, 145, 10)])],
        4: [L((0.58, 0.15), (0.30, 0.60), (0.74, 0.60)), L((0.62, 0.38), (0.62, 0.85))],
        5: [np.concatenate([L((0.68, 0.15), (0.36, 0.15), (0.35, 0.45)),
                            _circle(0.47, 0.64, 0.19, 0.20, -105, 140, 12)])],
        6: [np.concatenate([L((0.64, 0.16), (0.47, 0.34), (0.37, 0.55)),
                            _circle(0.50, 0.66, 0.15, 0.17, 150, 510, 16)])],
        7: [L((0.30, 0.17), (0.70, 0.17), (0.42, 0.85))],
        8: [_circle(0.50, 0.32, 0.14, 0.16, -90, 270, 18),
            _circle(0.50, 0.66, 0.17, 0.19, -90, 270, 18)],
        9: [_circle(0.52, 0.34, 0.15, 0.17, -90, 270, 18),
            L((0.67, 0.36), (0.64, 0.60), (0.56, 0.85))],
    }


_STROKES = _digit_strokes()


@dataclass
class DigitStyle:
    """Variability knobs; defaults calibrated for high-80s CNN accuracy at 1.2k."""

    rotation_deg: float = 20.0
    shear: float = 0.22
    scale_lo: float = 0.78
    scale_hi: float = 1.12
    translate_px: float = 2.2
    point_jitter: float = 0.035
    thickness_lo: float = 0.9
    thickness_hi: float = 1.9
    intensity_lo: float = 0.65
    intensity_hi: float = 1.0
    noise_sigma: float = 0.12


def _render(strokes: list[np.ndarray], thickness: float, size: int = 28) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(coords, coords, indexing="xy")
    pts = np.stack([px.ravel(), py.ravel()], axis=1)  # [P,2]
    a = np.concatenate([s[:-1] for s in strokes])
    b = np.concatenate([s[1:] for s in strokes])
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.sqrt(((pts[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
    # soft pen: full ink inside `thickness`, ~1.2px falloff (unit square scale)
    ink = np.clip((thickness / size + 1.2 / size - d) / (1.2 / size), 0.0, 1.0)
    return ink.reshape(size, size)


def _sample_digit(digit: int, rng: np.random.Generator, style: DigitStyle, size: int = 28) -> np.ndarray:
    theta = np.radians(rng.uniform(-style.rotation_deg, style.rotation_deg))
    sx = rng.uniform(style.scale_lo, style.scale_hi)
    sy = rng.uniform(style.scale_lo, style.scale_hi)
    shear = rng.uniform(-style.shear, style.shear)
    tx, ty = rng.uniform(-style.translate_px, style.translate_px, 2) / size
    c, s = np.cos(theta), np.sin(theta)
    mat = np.array([[c, -s], [s, c]]) @ np.array([[sx, shear * sx], [0.0, sy]])
    out = []
    for stroke in _STROKES[digit]:
        p = stroke + rng.normal(0.0, style.point_jitter, stroke.shape)
        p = (p - 0.5) @ mat.T + 0.5 + np.array([tx, ty])
        out.append(np.clip(p, 0.02, 0.98))
    img = _render(out, rng.uniform(style.thickness_lo, style.thickness_hi), size)
    img = img * rng.uniform(style.intensity_lo, style.intensity_hi)
    img = img + rng.normal(0.0, style.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_digits(n: int, seed: int, style: DigitStyle | None = None,
                 id_offset: int = 0) -> LabeledSet:
    """Seed-deterministic 28x28 digit corpus shaped like MNIST scans."""
    style = style or DigitStyle()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD161]))
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 1, 28, 28))
    for i in range(n):
        images[i, 0] = _sample_digit(int(labels[i]), rng, style)
    return LabeledSet(images, labels, kind="synth-digits", n_classes=10, seed=seed,
                      sample_ids=np.arange(id_offset, id_offset + n, dtype=np.int64))


# ---------------------------------------------------------------------------
# confounded variants

_CORNERS = ((0, 0), (0, 24), (24, 0), (24, 24))
DECOY_PATCH = 4


def decoy_shade(label: int) -> float:
    """Train-time patch shade for a class: (255 - 25*y) / 255."""
    return (255 - 25 * int(label)) / 255.0


def make_decoy(base: LabeledSet, mode: str, seed: int) -> LabeledSet:
    """Corner-patch decoy: 4x4 patch in a random corner; shade is a class
    code at train time and uniform over {0..255}/255 at test time."""
    if base.inputs.ndim != 4 or base.inputs.shape[1] != 1 or base.inputs.shape[2:] != (28, 28):
        raise DataError("make_decoy: base must be [N,1,28,28]")
    if mode not in ("train", "test"):
        raise DataError(f"make_decoy: bad mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC0]))
    x = base.inputs.copy()
    corners = rng.integers(0, 4, size=len(base))
    shades = (decoy_shade_vector(base.labels) if mode == "train"
              else rng.integers(0, 256, size=len(base)) / 255.0)
    for i in range(len(base)):
        r, c = _CORNERS[corners[i]]
        x[i, 0, r:r + DECOY_PATCH, c:c + DECOY_PATCH] = shades[i]
    return replace(base, inputs=x, kind="decoy-digits", confounded=(mode == "train"), seed=seed)


def decoy_shade_vector(labels: np.ndarray) -> np.ndarray:
    return (255 - 25 * labels.astype(np.float64)) / 255.0


COLOR_PALETTE = np.array([
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (255, 0, 255),
    (0, 255, 255), (255, 128, 0), (128, 0, 255), (128, 255, 0), (0, 128, 255),
], dtype=np.float64) / 255.0


def make_color(base: LabeledSet, mode: str, seed: int) -> LabeledSet:
    """Tint digit pixels with a class color (train) or a random color (test)."""
    if base.inputs.ndim != 4 or base.inputs.shape[1] != 1:
        raise DataError("make_color: base must be [N,1,H,W]")
    if mode not in ("train", "test"):
        raise DataError(f"make_color: bad mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0102]))
    which = base.labels if mode == "train" else rng.integers(0, 10, size=len(base))
    rgb = COLOR_PALETTE[which]                          # [N,3]
    x = base.inputs * rgb[:, :, None, None]             # intensity times palette
    return replace(base, inputs=x, kind="color-digits", confounded=(mode == "train"), seed=seed)


# ---------------------------------------------------------------------------
# concept-matrix data

@dataclass(frozen=True)
class ClassRule:
    """Generative rule: object templates plus an optional train-only confounder."""

    class_id: int
    templates: tuple  # tuple of dicts {group: value}
    confounder: tuple | None = None  # (template index, group, value)

    def to_rule(self) -> logic.Rule:
        return logic.Rule.make(self.class_id, [list(t.items()) for t in self.templates])

    def validate(self, space: logic.ConceptSpace, n_slots: int):
        if not self.templates or len(self.templates) > n_slots:
            raise DataError(f"class {self.class_id}: templates unsatisfiable in {n_slots} slots")
        for t in self.templates:
            for g, v in t.items():
                space.column(g, v)
        if self.confounder is not None:
            idx, g, v = self.confounder
            space.column(g, v)
            if not 0 <= idx < len(self.templates):
                raise DataError(f"class {self.class_id}: confounder template index {idx}")


def default_hans_rules() -> list[ClassRule]:
    """Three-class setup: pairs of object templates, gray-cube style confounder."""
    return [
        ClassRule(0, ({"size": "large", "shape": "cube"},
                      {"size": "large", "shape": "cylinder"}),
                  confounder=(0, "color", "gray")),
        ClassRule(1, ({"size": "small", "shape": "cube", "material": "metal"},
                      {"size": "small", "shape": "sphere"}),
                  confounder=(1, "material", "metal")),
        ClassRule(2, ({"size": "large", "shape": "sphere", "color": "blue"},
                      {"size": "small", "shape": "sphere", "color": "yellow"})),
    ]


def _random_object(rng, space: logic.ConceptSpace, fixed: dict[str, str]) -> np.ndarray:
    row = np.zeros(space.n_attrs)
    for g in space.groups:
        if g.name == space.presence:
            row[space.offset(g.name)] = 1.0
            continue
        v = fixed.get(g.name) or g.values[rng.integers(0, len(g.values))]
        row[space.column(g.name, v)] = 1.0
    return row


def make_concept_hans(rules: list[ClassRule], n_per_class: int, mode: str, seed: int,
                      space: logic.ConceptSpace | None = None, n_slots: int = 10,
                      max_distractors: int = 4, id_offset: int = 0) -> LabeledSet:
    """Rule-generated concept matrices with train-only confounders.

    Each sample holds its class rule's objects (confounder applied iff
    mode="train") in random slots plus 0..max_distractors random objects.
    Distractors are resampled until the sample satisfies no other class's
    rule, keeping the class signal identifiable.
    """
    if mode not in ("train", "test"):
        raise DataError(f"make_concept_hans: bad mode {mode!r}")
    space = space or logic.hans_space()
    for cr in rules:
        cr.validate(space, n_slots)
    hard_rules = {cr.class_id: cr.to_rule() for cr in rules}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4A45, 0 if mode == "train" else 1]))
    n = n_per_class * len(rules)
    z = np.zeros((n, n_slots, space.n_attrs))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for cr in rules:
        for _ in range(n_per_class):
            labels[i] = cr.class_id
            for attempt in range(200):
                sample = np.zeros((n_slots, space.n_attrs))
                n_dis = rng.integers(0, max_distractors + 1)
                slots = rng.permutation(n_slots)[: len(cr.templates) + n_dis]
                for j, template in enumerate(cr.templates):
                    fixed = dict(template)
                    if mode == "train" and cr.confounder is not None and cr.confounder[0] == j:
                        fixed[cr.confounder[1]] = cr.confounder[2]
                    sample[slots[j]] = _random_object(rng, space, fixed)
                for j in range(n_dis):
                    sample[slots[len(cr.templates) + j]] = _random_object(rng, space, {})
                foreign = any(
                    logic.rule_validity(r, sample, space) >= 1.0
                    for k, r in hard_rules.items() if k != cr.class_id
                )
                if not foreign:
                    break
            else:
                raise DataError(f"class {cr.class_id}: could not draw a clean sample in 200 tries")
            z[i] = sample
            i += 1
    order = rng.permutation(n)
    return LabeledSet(z[order], labels[order], kind="concept-hans", n_classes=len(rules),
                      confounded=(mode == "train"), seed=seed,
                      sample_ids=np.arange(id_offset, id_offset + n, dtype=np.int64)[order])


def default_cub_prototypes(seed: int = 7, n_classes: int = 10,
                           space: logic.ConceptSpace | None = None) -> np.ndarray:
    """One-hot-per-group binary prototype vectors, one per class."""
    space = space or logic.cub_space()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0B]))
    protos = np.zeros((n_classes, space.n_attrs))
    for k in range(n_classes):
        for g in space.groups:
            protos[k, space.offset(g.name) + rng.integers(0, len(g.values))] = 1.0
    return protos


CUB_NOISE_THRESHOLD = 0.75


def make_cub_noisy(prototypes: np.ndarray, n_per_class: int, seed: int,
                   id_offset: int = 0) -> LabeledSet:
    """binarize(prototype + U(0,1), 0.75): ones stay, zeros flip on at p=0.25."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if not np.all((prototypes == 0) | (prototypes == 1)):
        raise DataError("make_cub_noisy: prototypes must be binary")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCB10]))
    k, d = prototypes.shape
    n = k * n_per_class
    labels = np.repeat(np.arange(k, dtype=np.int64), n_per_class)
    noise = rng.uniform(0.0, 1.0, size=(n, d))
    z = ((prototypes[labels] + noise) >= CUB_NOISE_THRESHOLD).astype(np.float64)
    order = rng.permutation(n)
    return LabeledSet(z[order][:, None, :], labels[order], kind="cub-noisy", n_classes=k,
                      seed=seed,
                      sample_ids=np.arange(id_offset, id_offset + n, dtype=np.int64)[order])


# ---------------------------------------------------------------------------
# splits

@dataclass
class SplitPolicy:
    learner_size: int
    critic_size: int
    critic_relation: str = "subset"  # subset | disjoint | deconfounded-heldout

    def __post_init__(self):
        if self.critic_relation not in ("subset", "disjoint", "deconfounded-heldout"):
            raise DataError(f"bad critic relation {self.critic_relation!r}")

    def check(self, learner: LabeledSet, critic: LabeledSet):
        inter = np.intersect1d(learner.sample_ids, critic.sample_ids)
        if self.critic_relation == "subset":
            if len(np.setdiff1d(critic.sample_ids, learner.sample_ids)):
                raise DataError("critic set not a subset of learner set")
        elif len(inter):
            raise DataError(f"critic/learner sets overlap in {len(inter)} sample ids")


def make_splits(pool: LabeledSet, policy: SplitPolicy, seed: int,
                deconf_pool: LabeledSet | None = None) -> tuple[LabeledSet, LabeledSet]:
    """Draw (learner set, critic set) from a pool according to the policy."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5b11]))
    order = rng.permutation(len(pool))
    if policy.critic_relation == "subset":
        if policy.learner_size > len(pool):
            raise DataError("learner size exceeds pool")
        learner = pool.take(order[:policy.learner_size])
        pick = rng.permutation(policy.learner_size)[:policy.critic_size]
        critic = learner.take(pick)
    elif policy.critic_relation == "disjoint":
        if policy.learner_size + policy.critic_size > len(pool):
            raise DataError("pool too small for disjoint split")
        learner = pool.take(order[:policy.learner_size])
        critic = pool.take(order[policy.learner_size:policy.learner_size + policy.critic_size])
    else:  # deconfounded-heldout
        if deconf_pool is None:
            raise DataError("deconfounded-heldout needs a deconfounded pool")
        learner = pool.take(order[:policy.learner_size])
        order2 = rng.permutation(len(deconf_pool))
        critic = deconf_pool.take(order2[:policy.critic_size])
    policy.check(learner, critic)
    return learner, critic


# ---------------------------------------------------------------------------
# cached sets: checkpoint payload plus key=value sidecar

def save_set(prefix, data: LabeledSet):
    nets.save_params(str(prefix) + ".ckpt", {
        "inputs": data.inputs,
        "labels": data.labels.astype(np.float64),
        "sample_ids": data.sample_ids.astype(np.float64),
    })
    with open(str(prefix) + ".meta", "w") as fh:
        fh.write(f"kind={data.kind}\nseed={data.seed}\nN={len(data)}\n"
                 f"K={data.n_classes}\nconfounded={int(data.confounded)}\n")


def load_set(prefix) -> LabeledSet:
    payload = nets.load_params(str(prefix) + ".ckpt")
    meta = {}
    with open(str(prefix) + ".meta") as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            if key:
                meta[key] = value
    data = LabeledSet(
        payload["inputs"], payload["labels"].astype(np.int64),
        kind=meta["kind"], n_classes=int(meta["K"]),
        confounded=bool(int(meta["confounded"])), seed=int(meta["seed"]),
        sample_ids=payload["sample_ids"].astype(np.int64),
    )
    if len(data) != int(meta["N"]):
        raise DataError("cached set: N in sidecar disagrees with payload")
    return data
