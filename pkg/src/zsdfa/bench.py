"""Procedural face benchmark with per-generator forgery fingerprints.

Faces are drawn from simple geometry (head ellipse, eyes, brows, nose,
mouth, hair) so the parsing map is exact.  Each fake generator family owns
a parametric artifact injector and a parsing-degradation strength.  GAN
families degrade parsing less than diffusion families, which mimics how
well each keeps source-face attributes.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DataError

LABELS = ("background", "skin", "brow", "eye", "nose", "mouth", "hair")
N_LABELS = len(LABELS)
MANIPULATION_TYPES = ("EFS", "FS", "AM", "FR", "TF", "REAL")
SUB_TYPES = ("GAN", "Diffusion", "Flow", "None")
PROMPT_TOKENS = 308
VOCAB_SIZE = 64
PAD = 0


@dataclass(frozen=True)
class GeneratorFamily:
    name: str
    manipulation_type: str
    sub_type: str
    injector: str  # one of INJECTORS, "none" for REAL
    params: dict = field(default_factory=dict, hash=False, compare=False)
    parsing_degradation: float = 0.0

    def __post_init__(self):
        if self.manipulation_type not in MANIPULATION_TYPES:
            raise ConfigError(f"unknown manipulation type {self.manipulation_type!r}")
        if self.sub_type not in SUB_TYPES:
            raise ConfigError(f"unknown sub-type {self.sub_type!r}")
        if not 0.0 <= self.parsing_degradation <= 1.0:
            raise ConfigError(f"{self.name}: parsing_degradation outside [0, 1]")

    @property
    def is_real(self) -> bool:
        return self.manipulation_type == "REAL"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorFamily":
        return cls(**d)


# Periodic fingerprints are (cycles/pixel along columns, along rows).  The
# unseen families sit between seen ones in this parameter space.
DEFAULT_FAMILIES: dict[str, GeneratorFamily] = {f.name: f for f in [
    GeneratorFamily("real", "REAL", "None", "none", {}, 0.0),
    GeneratorFamily("stylegan_a", "EFS", "GAN", "periodic",
                    {"freq": [0.4375, 0.4375], "amp": 5.0}, 0.1),
    GeneratorFamily("stylegan_b", "EFS", "GAN", "periodic",
                    {"freq": [0.25, 0.0], "amp": 5.0}, 0.1),
    GeneratorFamily("ddpm_a", "EFS", "Diffusion", "blotch",
                    {"scale": 6.0, "amp": 14.0, "blur": 1.0, "count": 6}, 0.4),
    GeneratorFamily("faceswap_gan", "FS", "GAN", "blend",
                    {"box": 0.45, "feather": 3.0, "freq": [0.0, 0.375], "amp": 4.0}, 0.1),
    GeneratorFamily("attrgan", "AM", "GAN", "hue",
                    {"region": 6, "angle": 70.0, "freq": [0.125, 0.375], "amp": 4.0}, 0.1),
    GeneratorFamily("stylegan_c", "EFS", "GAN", "periodic",
                    {"freq": [0.375, 0.25], "amp": 5.0}, 0.1),
    GeneratorFamily("ldm_b", "EFS", "Diffusion", "blotch",
                    {"scale": 12.0, "amp": 18.0, "blur": 0.6, "count": 3}, 0.4),
    GeneratorFamily("reenact_flow", "FR", "Flow", "warp",
                    {"region": 5, "block": 3, "freq": [0.25, 0.25], "amp": 3.0}, 0.25),
]}
DEFAULT_SEEN = ["stylegan_a", "stylegan_b", "ddpm_a", "faceswap_gan", "attrgan", "real"]
DEFAULT_UNSEEN = ["stylegan_c", "ldm_b", "reenact_flow"]


# -- rendering ----------------------------------------------------------------
def _ellipse(rr, cc, r0, c0, ry, rx, angle=0.0):
    ca, sa = np.cos(angle), np.sin(angle)
    y, x = rr - r0, cc - c0
    u = (x * ca + y * sa) / rx
    v = (-x * sa + y * ca) / ry
    return u * u + v * v <= 1.0


def render_face(seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Render a face image (``size×size×3`` uint8) and its exact parsing map."""
    if size < 32:
        raise ConfigError(f"render_face needs size >= 32, got {size}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5EED])
    s = size / 64.0
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    parsing = np.zeros((size, size), dtype=np.uint8)

    r0 = size / 2 + rng.uniform(-3, 3) * s
    c0 = size / 2 + rng.uniform(-3, 3) * s
    ry = rng.uniform(20, 24) * s
    rx = rng.uniform(15, 18) * s
    tilt = rng.uniform(-0.12, 0.12)

    hair = _ellipse(rr, cc, r0 - 4 * s, c0, ry + rng.uniform(3, 6) * s, rx + rng.uniform(2, 5) * s, tilt)
    hair &= rr < r0 + rng.uniform(-2, 6) * s
    face = _ellipse(rr, cc, r0, c0, ry, rx, tilt)
    parsing[hair] = 6
    parsing[face] = 1
    # hairline: top cap of the head stays hair
    parsing[face & (rr < r0 - ry * rng.uniform(0.55, 0.7))] = 6

    eye_dr = rng.uniform(-0.22, -0.12) * ry
    eye_dc = rng.uniform(0.36, 0.46) * rx
    eye_ry, eye_rx = rng.uniform(1.6, 2.4) * s, rng.uniform(2.8, 3.8) * s
    for side in (-1, 1):
        er, ec = r0 + eye_dr, c0 + side * eye_dc
        brow = _ellipse(rr, cc, er - rng.uniform(4.0, 5.5) * s, ec, 1.0 * s + 0.5, eye_rx * 1.2, tilt)
        parsing[brow & face] = 2
        parsing[_ellipse(rr, cc, er, ec, eye_ry, eye_rx, tilt)] = 3
    nose_r = r0 + rng.uniform(0.08, 0.16) * ry
    parsing[_ellipse(rr, cc, nose_r, c0, rng.uniform(3.5, 5) * s, rng.uniform(1.8, 2.6) * s, tilt)] = 4
    mouth_r = r0 + rng.uniform(0.45, 0.55) * ry
    parsing[_ellipse(rr, cc, mouth_r, c0, rng.uniform(1.5, 2.5) * s, rng.uniform(4.5, 6.5) * s, tilt)] = 5

    palette = np.zeros((N_LABELS, 3))
    bg_a, bg_b = rng.uniform(30, 220, 3), rng.uniform(30, 220, 3)
    skin = np.array([rng.uniform(150, 235), 0, 0])
    skin[1] = skin[0] * rng.uniform(0.7, 0.85)
    skin[2] = skin[0] * rng.uniform(0.55, 0.75)
    palette[1] = skin
    palette[2] = rng.uniform(20, 90, 3)
    palette[3] = rng.uniform(20, 110, 3)
    palette[4] = skin * rng.uniform(0.8, 0.92)
    palette[5] = [rng.uniform(140, 200), rng.uniform(40, 90), rng.uniform(50, 100)]
    palette[6] = rng.uniform(15, 160) * np.array([1.0, rng.uniform(0.6, 0.9), rng.uniform(0.4, 0.8)])

    t = (rr * rng.uniform(0.3, 1.0) + cc * rng.uniform(0.0, 0.7)) / (size * 1.7)
    img = bg_a[None, None] * (1 - t[..., None]) + bg_b[None, None] * t[..., None]
    fg = parsing > 0
    img[fg] = palette[parsing[fg]]
    # soft shading across the face and sensor noise keep textures non-trivial
    shade = 1.0 - 0.15 * ((cc - c0) / (rx + 1)) ** 2
    img[face] *= np.clip(shade[face], 0.7, 1.0)[:, None]
    img += rng.normal(0, 2.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), parsing


# -- artifact injectors --------------------------------------------------------
def _periodic(shape, freq, amp, phase):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return amp * np.cos(2 * np.pi * (freq[0] * cc + freq[1] * rr) + phase)


def _add_periodic(img, params, rng):
    if params.get("amp", 0.0) and "freq" in params:
        pat = _periodic(img.shape[:2], params["freq"], params["amp"], rng.uniform(0, 2 * np.pi))
        img = img + pat[..., None]
    return img


def _hue_rotate(rgb, degrees):
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    k = 1 / 3
    sq = np.sqrt(k)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])
    return rgb @ m.T


def inject_artifact(image: np.ndarray, family: GeneratorFamily, seed: int,
                    parsing: np.ndarray | None = None) -> np.ndarray:
    """Apply ``family``'s fingerprint to ``image`` (uint8 H×W×3)."""
    if family.is_real or family.injector == "none":
        raise ContractError("inject_artifact called with a REAL family")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0xA27])
    p = family.params
    img = image.astype(np.float64)
    h, w = img.shape[:2]
    kind = family.injector
    if kind == "periodic":
        img = _add_periodic(img, p, rng)
    elif kind == "blotch":
        rr, cc = np.mgrid[0:h, 0:w]
        field_ = np.zeros((h, w, 3))
        for _ in range(int(p.get("count", 4))):
            r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
            bump = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * p["scale"] ** 2))
            field_ += bump[..., None] * rng.uniform(-1, 1, 3)
        img = img + p["amp"] * field_
        if p.get("blur", 0.0) > 0:
            img = ndimage.gaussian_filter(img, sigma=(p["blur"], p["blur"], 0), mode="nearest")
    elif kind == "blend":
        donor, _ = render_face(int(rng.integers(0, 2**63 - 1)), h)
        half = p["box"] * h / 2
        rr, cc = np.mgrid[0:h, 0:w]
        dist = np.minimum(half - np.abs(rr - h / 2), half - np.abs(cc - w / 2))
        alpha = np.clip(dist / max(p.get("feather", 1.0), 1e-6), 0, 1)[..., None]
        img = img * (1 - alpha) + donor.astype(np.float64) * alpha
        img = _add_periodic(img, p, rng)
    elif kind == "hue":
        region = parsing == p["region"] if parsing is not None else np.ones((h, w), bool)
        img[region] = _hue_rotate(img[region], p["angle"])
        img = _add_periodic(img, p, rng)
    elif kind == "warp":
        region = parsing == p.get("region", 5) if parsing is not None else np.zeros((h, w), bool)
        k = int(p.get("block", 2))
        small = img[::k, ::k]
        blocky = np.repeat(np.repeat(small, k, 0), k, 1)[:h, :w]
        grown = ndimage.binary_dilation(region, iterations=3)
        img[grown] = blocky[grown]
        img = _add_periodic(img, p, rng)
    else:
        raise ConfigError(f"unknown injector {kind!r}")
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def degrade_parsing(parsing: np.ndarray, delta: float, seed: int) -> np.ndarray:
    """Perturb region boundaries.

    A pixel flips to the label of its nearest differently-labelled pixel when
    it lies within ``1 + 3*delta`` pixels of that region edge and its seeded
    uniform draw falls below ``delta``.  The draw field does not depend on
    ``delta``, so flipped sets are nested as ``delta`` grows.
    """
    if not 0.0 <= delta <= 1.0:
        raise ConfigError(f"parsing degradation {delta} outside [0, 1]")
    out = parsing.copy()
    if delta == 0.0:
        return out
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0xDE9])
    u = rng.random(parsing.shape)
    dist = np.full(parsing.shape, np.inf)
    repl = parsing.copy()
    for lab in np.unique(parsing):
        inside = parsing == lab
        if inside.all():
            continue
        d, (ir, ic) = ndimage.distance_transform_edt(inside, return_indices=True)
        dist[inside] = d[inside]
        repl[inside] = parsing[ir[inside], ic[inside]]
    flip = (u < delta) & (dist <= 1.0 + 3.0 * delta)
    out[flip] = repl[flip]
    return out


# -- prompts -------------------------------------------------------------------
def _words(text: str) -> list[str]:
    return [re.sub(r"[^a-z0-9_]", "", w.lower()) for w in text.split()]


def prompt_text(family: GeneratorFamily) -> str:
    kind = "real" if family.is_real else "fake"
    return (f"a {kind} face image, manipulation {family.manipulation_type}, "
            f"architecture {family.sub_type}, generator {family.name}")


def build_vocab(families, vocab_size: int = VOCAB_SIZE) -> dict[str, int]:
    words = set(_words("a real fake face image, manipulation architecture generator"))
    for fam in families:
        words.update(_words(prompt_text(fam)))
    vocab = {w: i + 1 for i, w in enumerate(sorted(words))}
    if len(vocab) + 1 > vocab_size:
        raise ConfigError(f"vocabulary needs {len(vocab) + 1} ids, exceeds vocab size {vocab_size}")
    return vocab


def make_prompt(family: GeneratorFamily, vocab: dict[str, int], t: int = PROMPT_TOKENS) -> np.ndarray:
    ids = [vocab[w] for w in _words(prompt_text(family))]
    if len(ids) > t:
        raise ConfigError(f"prompt of {len(ids)} tokens exceeds t={t}")
    out = np.full(t, PAD, dtype=np.int64)
    out[:len(ids)] = ids
    return out


# -- protocols -----------------------------------------------------------------
@dataclass
class FaceSample:
    image: np.ndarray
    parsing: np.ndarray
    family: str
    label: int  # index among seen families, -1 for unseen
    prompt_tokens: np.ndarray
    role: str = "train"
    index: int = 0

    @property
    def seen(self) -> bool:
        return self.label >= 0

    def one_hot(self, x: int) -> np.ndarray:
        if self.label < 0:
            raise ContractError(f"{self.family} is unseen and has no one-hot label")
        e = np.zeros(x)
        e[self.label] = 1.0
        return e


@dataclass
class DatasetSplit:
    seen_families: list[str] = field(default_factory=lambda: list(DEFAULT_SEEN))
    unseen_families: list[str] = field(default_factory=lambda: list(DEFAULT_UNSEEN))
    train_count: int = 512
    test_count: int = 128
    include_real: bool = False
    size: int = 64
    families: dict[str, GeneratorFamily] = field(default_factory=lambda: dict(DEFAULT_FAMILIES))

    def validate(self) -> None:
        overlap = set(self.seen_families) & set(self.unseen_families)
        if overlap:
            raise ConfigError(f"seen and unseen families overlap: {sorted(overlap)}")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("per-family counts must be >= 1")
        if len(self.effective_seen()) < 2:
            raise ConfigError("need at least 2 seen families")
        for name in self.effective_seen() + self.unseen_families:
            if name not in self.families:
                raise ConfigError(f"unknown family {name!r}")

    def effective_seen(self) -> list[str]:
        seen = list(self.seen_families)
        if self.include_real and "real" not in seen:
            seen.append("real")
        return seen

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = {k: v.to_dict() for k, v in self.families.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        d = dict(d)
        fams = dict(DEFAULT_FAMILIES)
        fams.update({k: GeneratorFamily.from_dict(v) for k, v in d.pop("families", {}).items()})
        return cls(families=fams, **d)


def sample_seed(split_seed: int, family_idx: int, role: str, index: int) -> int:
    """Per-sample seed; independent of generation order."""
    ss = np.random.SeedSequence([int(split_seed), family_idx, 0 if role == "train" else 1, index])
    return int(ss.generate_state(2, np.uint64)[0])


def make_sample(family: GeneratorFamily, seed: int, size: int, label: int,
                vocab: dict[str, int], role: str, index: int, t: int = PROMPT_TOKENS) -> FaceSample:
    image, parsing = render_face(seed, size)
    if not family.is_real:
        image = inject_artifact(image, family, seed, parsing)
    parsing = degrade_parsing(parsing, family.parsing_degradation, seed)
    return FaceSample(image, parsing, family.name, label, make_prompt(family, vocab, t), role, index)


def build_protocol(split: DatasetSplit, seed: int, t: int = PROMPT_TOKENS,
                   vocab_size: int = VOCAB_SIZE) -> tuple[list[FaceSample], list[FaceSample]]:
    """Materialise the train set (seen only) and test set (seen + unseen)."""
    split.validate()
    seen = split.effective_seen()
    order = seen + split.unseen_families
    vocab = build_vocab([split.families[n] for n in order], vocab_size)
    train, test = [], []
    for fi, name in enumerate(order):
        fam = split.families[name]
        label = seen.index(name) if name in seen else -1
        if label >= 0:
            for i in range(split.train_count):
                s = sample_seed(seed, fi, "train", i)
                train.append(make_sample(fam, s, split.size, label, vocab, "train", i, t))
        for i in range(split.test_count):
            s = sample_seed(seed, fi, "test", i)
            test.append(make_sample(fam, s, split.size, label, vocab, "test", i, t))
    return train, test


# -- on-disk format --------------------------------------------------------------
def write_pnm(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = b"P6" if arr.ndim == 3 else b"P5"
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def read_pnm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported PNM ({magic!r}, maxval {maxval})")
    shape = (h, w, 3) if magic == b"P6" else (h, w)
    data = np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(shape)), offset=pos)
    return data.reshape(shape).copy()


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sample_stem(s: FaceSample) -> str:
    return f"{s.family}/{s.role}_{s.index:05d}"


def write_dataset(root, split: DatasetSplit, seed: int, train, test, meta: dict | None = None) -> dict:
    """Write samples and the split manifest; returns the manifest dict.

    ``meta`` entries are stored at the top level of the manifest.
    """
    root = Path(root)
    entries = []
    for s in list(train) + list(test):
        stem = sample_stem(s)
        (root / s.family).mkdir(parents=True, exist_ok=True)
        write_pnm(root / f"{stem}.ppm", s.image)
        write_pnm(root / f"{stem}.pgm", s.parsing)
        side = {"family": s.family, "label": s.label, "role": s.role, "index": s.index,
                "prompt_tokens": s.prompt_tokens.tolist()}
        (root / f"{stem}.json").write_text(json.dumps(side))
        entries.append({"stem": stem, "family": s.family, "role": s.role,
                        "files": {ext: _sha256(root / f"{stem}.{ext}") for ext in ("ppm", "pgm", "json")}})
    manifest = {"format": "zsdfa-dataset/1", "seed": seed, "split": split.to_dict(),
                "seen": split.effective_seen(), "unseen": split.unseen_families,
                "parsing_degradation": {n: split.families[n].parsing_degradation
                                        for n in split.effective_seen() + split.unseen_families},
                "samples": entries, **(meta or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_dataset(root) -> tuple[dict, list[FaceSample], list[FaceSample]]:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset manifest under {root}") from None
    train, test = [], []
    for e in manifest["samples"]:
        stem = e["stem"]
        side = json.loads((root / f"{stem}.json").read_text())
        s = FaceSample(read_pnm(root / f"{stem}.ppm"), read_pnm(root / f"{stem}.pgm"),
                       side["family"], side["label"], np.asarray(side["prompt_tokens"], dtype=np.int64),
                       side["role"], side["index"])
        (train if s.role == "train" else test).append(s)
    return manifest, train, test


def verify_dataset(root) -> list[str]:
    """Return the stems whose on-disk checksum no longer matches the manifest."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    bad = []
    for e in manifest["samples"]:
        for ext, digest in e["files"].items():
            p = root / f"{e['stem']}.{ext}"
            if not p.exists() or _sha256(p) != digest:
                bad.append(f"{e['stem']}.{ext}")
    return bad
