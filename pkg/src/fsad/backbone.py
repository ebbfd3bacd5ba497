"""Frozen seeded toy transformers standing in for large pretrained encoders.

The visual tower patchifies an image and reports patch tokens at selected
tap layers; the text tower runs a prompt matrix and reports hidden states at
its own taps plus the final-layer class vector. Weights are drawn once from
a seeded Gaussian and never trained; gradients pass through them to
learnable inputs (needed for prompt tuning). A feature-bundle file format
lets externally computed features replace the toy towers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .binio import ByteReader, ByteWriter
from .errors import ConfigError, FormatError, ShapeError
from .numcore import Tensor

CLASSES = ("normal", "abnormal")

BUNDLE_MAGIC = b"HAAF"
BUNDLE_VERSION = 1

_TAG_VISUAL = 11
_TAG_TEXT = 12
_TAG_PATCH = 13
_TAG_POS = 14

WEIGHT_STD = 0.02


@dataclass(frozen=True)
class BackboneSpec:
    """Construction recipe for the frozen encoder pair."""

    d: int = 32
    vision_layers: int = 8
    text_layers: int = 4
    selected_visual: tuple[int, ...] = (2, 4, 6, 8)
    selected_text: tuple[int, ...] = (1, 2, 3, 4)
    patch_grid: tuple[int, int] = (4, 4)
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if len(self.selected_visual) != len(self.selected_text):
            raise ConfigError(
                f"tap lists must pair up: {len(self.selected_visual)} visual "
                f"vs {len(self.selected_text)} text")
        if not self.selected_visual:
            raise ConfigError("need at least one tap layer")
        if max(self.selected_visual) > self.vision_layers or min(self.selected_visual) < 1:
            raise ConfigError(f"visual taps {self.selected_visual} outside "
                              f"1..{self.vision_layers}")
        if max(self.selected_text) > self.text_layers or min(self.selected_text) < 1:
            raise ConfigError(f"text taps {self.selected_text} outside "
                              f"1..{self.text_layers}")
        if self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.patch_grid[0] < 1 or self.patch_grid[1] < 1:
            raise ConfigError(f"bad patch grid {self.patch_grid}")

    @property
    def patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]


class _Block:
    """Pre-norm biasless transformer block: attention then gated FF."""

    def __init__(self, rng, d: int, heads: int):
        def w(rows, cols):
            return Tensor(rng.normal(0.0, WEIGHT_STD, size=(rows, cols)))
        self.wq, self.wk, self.wv, self.wo = w(d, d), w(d, d), w(d, d), w(d, d)
        self.w1, self.w2 = w(d, 2 * d), w(2 * d, d)
        self.heads = heads

    def forward(self, x: Tensor) -> Tensor:
        h = nc.layernorm_rows(x)
        att = nc.attention(nc.matmul(h, self.wq), nc.matmul(h, self.wk),
                           nc.matmul(h, self.wv), self.heads)
        x = nc.add(x, nc.matmul(att, self.wo))
        h = nc.layernorm_rows(x)
        return nc.add(x, nc.matmul(nc.silu(nc.matmul(h, self.w1)), self.w2))

    def weights(self):
        return (self.wq, self.wk, self.wv, self.wo, self.w1, self.w2)


class ToyEncoder:
    """Stack of frozen blocks plus an input embedding scheme.

    The visual tower emits each tap as token-centered: the mean token of the
    image is subtracted, so the rows carry only within-image structure. That
    keeps the shared stream component (identical across patches) out of the
    cosine geometry downstream. Text taps are emitted raw because the class
    row's absolute content is the point of the prompt.
    """

    def __init__(self, spec: BackboneSpec, kind: str):
        self.spec = spec
        self.kind = kind
        tag = _TAG_VISUAL if kind == "visual" else _TAG_TEXT
        n = spec.vision_layers if kind == "visual" else spec.text_layers
        self.taps = spec.selected_visual if kind == "visual" else spec.selected_text
        self.center_taps = kind == "visual"
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, tag)))
        self.blocks = [_Block(rng, spec.d, spec.heads) for _ in range(n)]
        if kind == "visual":
            pos_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, _TAG_POS)))
            self.pos = Tensor(pos_rng.normal(0.0, WEIGHT_STD, size=(spec.patches, spec.d)))
        else:
            self.pos = None
        self._patch_proj: dict[int, Tensor] = {}

    def patch_projection(self, patch_dim: int) -> Tensor:
        """Patchify projection for a given flattened patch size, seeded by it."""
        got = self._patch_proj.get(patch_dim)
        if got is None:
            rng = np.random.default_rng(
                np.random.SeedSequence((self.spec.seed, _TAG_PATCH, patch_dim)))
            got = Tensor(rng.normal(0.0, WEIGHT_STD, size=(patch_dim, self.spec.d)))
            self._patch_proj[patch_dim] = got
        return got

    def run(self, x: Tensor) -> dict[int, Tensor]:
        """Feed embedded tokens through all blocks, recording tap outputs."""
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block.forward(x)
            if i in self.taps:
                taps[i] = self._emit(x)
        self._last = x
        return taps

    def _emit(self, x: Tensor) -> Tensor:
        if not self.center_taps:
            return x
        return nc.sub(x, nc.mean_axis(x, -2, keepdims=True))

    def all_weights(self):
        out = []
        for b in self.blocks:
            out.extend(b.weights())
        if self.pos is not None:
            out.append(self.pos)
        out.extend(self._patch_proj.values())
        return out


def build_backbone(spec: BackboneSpec) -> tuple[ToyEncoder, ToyEncoder]:
    """Deterministic (visual, text) encoder pair for a spec."""
    return ToyEncoder(spec, "visual"), ToyEncoder(spec, "text")


def _patchify(image: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be [H, W, 3], got {image.shape}")
    h, w, _ = image.shape
    rows, cols = grid
    if h % rows or w % cols:
        raise ShapeError(f"image {h}x{w} not divisible by patch grid {grid}")
    ph, pw = h // rows, w // cols
    tiles = image.reshape(rows, ph, cols, pw, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(rows * cols, ph * pw * 3)


def encode_image(enc: ToyEncoder, image: np.ndarray) -> dict[int, Tensor]:
    """Patch tokens [P, d] at each visual tap; never tracked for gradients."""
    return encode_images(enc, [image])[0]


def encode_images(enc: ToyEncoder, images: list[np.ndarray]) -> list[dict[int, Tensor]]:
    """Batched encode: one pass of [B, P, d] through the tower."""
    flat = np.stack([_patchify(np.asarray(img, dtype=np.float64), enc.spec.patch_grid)
                     for img in images])
    with nc.no_grad():
        proj = enc.patch_projection(flat.shape[-1])
        x = nc.add(nc.matmul(Tensor(flat), proj), enc.pos)
        taps = enc.run(x)
    return [{layer: Tensor(t.data[b]) for layer, t in taps.items()}
            for b in range(len(images))]


def sinusoid_positions(rows: int, d: int) -> np.ndarray:
    """Classic fixed sin/cos position table, valid for any row count."""
    pos = np.arange(rows, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return WEIGHT_STD * table


def encode_prompt(enc: ToyEncoder, prompt: Tensor) -> tuple[dict[int, Tensor], Tensor]:
    """Hidden states at each text tap plus the final-layer class vector.

    The class embedding sits in the last prompt row; the class vector is that
    row of the final block's output. Differentiable w.r.t. the prompt.
    """
    if prompt.ndim != 2 or prompt.shape[1] != enc.spec.d:
        raise ShapeError(f"prompt must be [rows, {enc.spec.d}], got {prompt.shape}")
    rows = prompt.shape[0]
    if rows < 1:
        raise ShapeError("prompt needs at least the class row")
    x = nc.add(prompt, Tensor(sinusoid_positions(rows, enc.spec.d)))
    taps = enc.run(x)
    class_vec = nc.reshape(nc.narrow(enc._last, 0, rows - 1, 1), (enc.spec.d,))
    return taps, class_vec


def layer_map(spec: BackboneSpec) -> list[tuple[int, int]]:
    """Positional pairing of visual and text tap layers."""
    return list(zip(spec.selected_visual, spec.selected_text))


def evenly_spaced_map(vision_total: int, text_total: int,
                      stages: int) -> list[tuple[int, int]]:
    """Stage pairing for unequal towers: visual taps at even depth fractions,
    each mapped to the text layer at the same relative depth."""
    if stages < 1 or stages > min(vision_total, text_total):
        raise ConfigError(f"cannot place {stages} stages in towers "
                          f"({vision_total}, {text_total})")
    pairs = []
    for i in range(1, stages + 1):
        v = round(i * vision_total / stages)
        t = round(v * text_total / vision_total)
        pairs.append((v, max(1, t)))
    return pairs


# ---------------------------------------------------------------------------
# feature bundles

@dataclass
class FeatureBundle:
    """Per-layer features for one image plus per-class text features."""

    d: int
    visual: dict[int, np.ndarray] = field(default_factory=dict)
    text: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    class_vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        for layer, arr in self.visual.items():
            if arr.ndim != 2 or arr.shape[1] != self.d:
                raise ShapeError(f"visual layer {layer}: shape {arr.shape} "
                                 f"does not match width {self.d}")
        layer_sets = {cls: tuple(sorted(per)) for cls, per in self.text.items()}
        if len(set(layer_sets.values())) > 1:
            raise ShapeError(f"text layer sets differ across classes: {layer_sets}")
        for cls, per in self.text.items():
            for layer, arr in per.items():
                if arr.ndim != 2 or arr.shape[1] != self.d:
                    raise ShapeError(f"text {cls} layer {layer}: shape {arr.shape} "
                                     f"does not match width {self.d}")
        if set(self.class_vectors) != set(self.text):
            raise ShapeError("class vector set does not match text class set")
        for cls, vec in self.class_vectors.items():
            if vec.shape != (self.d,):
                raise ShapeError(f"class vector {cls}: shape {vec.shape}")

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle) or self.d != other.d:
            return False
        if (self.visual.keys() != other.visual.keys()
                or self.text.keys() != other.text.keys()):
            return False
        if any(not np.array_equal(self.visual[k], other.visual[k]) for k in self.visual):
            return False
        for cls in self.text:
            if self.text[cls].keys() != other.text[cls].keys():
                return False
            if any(not np.array_equal(self.text[cls][m], other.text[cls][m])
                   for m in self.text[cls]):
                return False
        return all(np.array_equal(self.class_vectors[c], other.class_vectors[c])
                   for c in self.class_vectors)


def _class_order(bundle: FeatureBundle) -> list[str]:
    names = list(bundle.text)
    if sorted(names) == sorted(CLASSES[:len(names)]):
        return [c for c in CLASSES if c in names]
    return names


def save_feature_bundle(bundle: FeatureBundle, path: str) -> None:
    bundle.validate()
    w = ByteWriter()
    w.raw(BUNDLE_MAGIC)
    w.u32(BUNDLE_VERSION)
    w.u32(bundle.d)
    w.u32(len(bundle.visual))
    for layer in sorted(bundle.visual):
        arr = bundle.visual[layer]
        w.u32(layer)
        w.u32(arr.shape[0])
        w.f32_array(arr)
    classes = _class_order(bundle)
    layers = sorted(next(iter(bundle.text.values()))) if bundle.text else []
    w.u32(len(classes))
    w.u32(len(layers))
    for cls in classes:
        for layer in layers:
            arr = bundle.text[cls][layer]
            w.u32(layer)
            w.u32(arr.shape[0])
            w.f32_array(arr)
    for cls in classes:
        w.f32_array(bundle.class_vectors[cls])
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def _load_names(count: int) -> list[str]:
    if count == len(CLASSES):
        return list(CLASSES)
    return [f"class{i}" for i in range(count)]


def load_feature_bundle(path: str) -> FeatureBundle:
    with open(path, "rb") as fh:
        r = ByteReader(fh.read(), label=str(path))
    r.magic(BUNDLE_MAGIC)
    pos = r.offset
    version = r.u32("version")
    if version != BUNDLE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=pos)
    d = r.u32("width")
    bundle = FeatureBundle(d=d)
    for _ in range(r.u32("visual layer count")):
        layer = r.u32("visual layer id")
        p = r.u32("patch count")
        bundle.visual[layer] = r.f32_array((p, d), f"visual layer {layer}")
    n_classes = r.u32("class count")
    n_layers = r.u32("text layer count")
    names = _load_names(n_classes)
    for cls in names:
        per = {}
        for _ in range(n_layers):
            layer = r.u32("text layer id")
            rows = r.u32("text row count")
            per[layer] = r.f32_array((rows, d), f"text {cls} layer {layer}")
        bundle.text[cls] = per
    for cls in names:
        bundle.class_vectors[cls] = r.f32_array((d,), f"class vector {cls}")
    r.expect_exhausted()
    bundle.validate()
    return bundle
