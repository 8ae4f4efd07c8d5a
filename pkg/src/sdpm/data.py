"""Synthetic low-contrast lesion data, label encoding and dataset files.

A dataset directory holds ``manifest.json`` plus one ``<id>.smp`` file per
sample.  Sample files are: 8 magic bytes, uint16 version, uint32 H,
uint32 W, then image and label as little-endian float32, row-major.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, DigestMismatchError

SAMPLE_MAGIC = b"SDPMSMPL"
SAMPLE_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<8sHII")


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    id: str

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.label = np.ascontiguousarray(self.label, dtype=np.float32)

    def validate(self) -> None:
        if self.image.ndim != 2 or self.image.shape != self.label.shape:
            raise DataError(f"sample {self.id}: image {self.image.shape} / label {self.label.shape} mismatch")
        if not np.all(np.isin(self.label, (-1.0, 1.0))):
            raise DataError(f"sample {self.id}: label is not in {{-1, +1}}")
        if not np.all(np.isfinite(self.image)) or np.abs(self.image).max(initial=0) > 1.0:
            raise DataError(f"sample {self.id}: image outside [-1, 1]")

    @property
    def mask(self) -> np.ndarray:
        """Boolean lesion support."""
        return self.label > 0


@dataclass
class Dataset:
    samples: list[Sample]
    generator: dict | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples[0].image.shape


def encode_label(mask) -> np.ndarray:
    """Binary {0, 1} mask to the {-1, +1} diffusion encoding."""
    m = np.asarray(mask)
    return np.where(m > 0, 1.0, -1.0).astype(np.float32)


def decode_label(arr, tau: float | None = None) -> np.ndarray:
    """Binarize: threshold at 0 for raw label encodings, or at ``tau`` for [0, 1] maps."""
    a = np.asarray(arr)
    return (a >= (0.0 if tau is None else tau)).astype(np.uint8)


def _lesion_mask(shape, rng: np.random.Generator, lesion_scale) -> np.ndarray:
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    lo, hi = lesion_scale
    s = min(H, W)
    a = rng.uniform(lo, hi) * s
    b = a * rng.uniform(0.6, 1.0)
    margin = max(a, 1.0)
    cy = rng.uniform(margin, H - margin) if H > 2 * margin else H / 2
    cx = rng.uniform(margin, W - margin) if W > 2 * margin else W / 2
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    phi = np.arctan2(v, u)
    # low-order angular wobble turns ellipses into blobs
    wobble = 1.0
    for k in (2, 3):
        wobble = wobble + rng.uniform(-0.12, 0.12) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return r <= wobble


def generate_sample(
    shape,
    contrast: float,
    lesion_scale,
    rng: np.random.Generator,
    sample_id: str,
    lesion_free: bool,
    texture: float = 0.12,
    noise: float = 0.04,
    background: float = -0.3,
) -> Sample:
    H, W = shape
    if texture > 0:
        field_ = gaussian_filter(rng.standard_normal((H, W)), sigma=2.5, mode="wrap")
        field_ = field_ / (field_.std() + 1e-12) * texture
    else:
        field_ = np.zeros((H, W))
    mask = np.zeros((H, W), dtype=bool)
    if not lesion_free:
        for _ in range(int(rng.integers(1, 4))):
            mask |= _lesion_mask(shape, rng, lesion_scale)
    img = background + field_ + contrast * mask
    if noise > 0:
        img = img + noise * rng.standard_normal((H, W))
    img = np.clip(img, -1.0, 1.0)
    return Sample(image=img, label=encode_label(mask), id=sample_id)


def generate_synthetic(
    n: int,
    size=(64, 64),
    contrast: float = 0.3,
    lesion_scale=(0.08, 0.2),
    rng: np.random.Generator | int = 0,
    lesion_free_frac: float = 0.2,
    texture: float = 0.12,
    noise: float = 0.04,
    prefix: str = "case",
) -> Dataset:
    """Textured background plus 1-3 brighter blobs; ``lesion_free_frac`` of samples have none."""
    H, W = (int(size), int(size)) if np.ndim(size) == 0 else (int(size[0]), int(size[1]))
    if n < 1:
        raise ValueError("n must be >= 1")
    if H < 4 or W < 4:
        raise ValueError(f"degenerate image size {(H, W)}")
    if not 0 < contrast <= 1:
        raise ValueError("contrast must lie in (0, 1]")
    lo, hi = lesion_scale
    if not 0 < lo <= hi < 0.5:
        raise ValueError("lesion_scale must satisfy 0 < min <= max < 0.5")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    n_free = int(round(lesion_free_frac * n))
    free = np.zeros(n, dtype=bool)
    free[rng.permutation(n)[:n_free]] = True
    samples = [
        generate_sample((H, W), contrast, (lo, hi), rng, f"{prefix}{i:04d}", bool(free[i]), texture, noise)
        for i in range(n)
    ]
    gen = {
        "n": n, "size": [H, W], "contrast": contrast, "lesion_scale": [lo, hi],
        "lesion_free_frac": lesion_free_frac, "texture": texture, "noise": noise, "seed": seed,
    }
    return Dataset(samples=samples, generator=gen)


def split_by_id(dataset: Dataset, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint split keyed on a hash of each sample id."""
    train, test = [], []
    for s in dataset:
        h = int.from_bytes(hashlib.sha256(s.id.encode()).digest()[:8], "big") / 2**64
        (test if h < test_fraction else train).append(s)
    return Dataset(train, dataset.generator), Dataset(test, dataset.generator)


def sample_to_bytes(s: Sample) -> bytes:
    H, W = s.image.shape
    return (
        _HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, H, W)
        + s.image.astype("<f4").tobytes()
        + s.label.astype("<f4").tobytes()
    )


def sample_from_bytes(raw: bytes, sample_id: str, name: str = "") -> Sample:
    if len(raw) < _HEADER.size:
        raise DataError(f"{name}: truncated sample header")
    magic, version, H, W = _HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise DataError(f"{name}: bad magic bytes")
    if version != SAMPLE_VERSION:
        raise DataError(f"{name}: unknown sample version {version}")
    n = H * W * 4
    if len(raw) != _HEADER.size + 2 * n:
        raise DataError(f"{name}: payload size does not match {H}x{W}")
    img = np.frombuffer(raw, dtype="<f4", count=H * W, offset=_HEADER.size).reshape(H, W)
    lab = np.frombuffer(raw, dtype="<f4", count=H * W, offset=_HEADER.size + n).reshape(H, W)
    s = Sample(image=img.astype(np.float32), label=lab.astype(np.float32), id=sample_id)
    s.validate()
    return s


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset: Dataset, path, extra: dict | None = None) -> Path:
    """Write sample files, then the manifest last."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for s in dataset:
        s.validate()
        raw = sample_to_bytes(s)
        name = f"{s.id}.smp"
        _atomic_write(root / name, raw)
        files.append({"id": s.id, "file": name, "sha256": hashlib.sha256(raw).hexdigest()})
    H, W = dataset.shape
    manifest = {
        "version": MANIFEST_VERSION,
        "count": len(files),
        "H": H,
        "W": W,
        "samples": files,
        "generator": dataset.generator,
        **({"extra": {**dataset.extra, **extra}} if extra or dataset.extra else {}),
    }
    _atomic_write(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
    return root


def load_dataset(path) -> Dataset:
    """Load and verify every sample; nothing is returned unless all checks pass."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unknown manifest version {manifest.get('version')!r}")
    entries = manifest.get("samples", [])
    if manifest.get("count") != len(entries):
        raise DataError(f"manifest count {manifest.get('count')} != {len(entries)} listed samples")
    samples = []
    for e in entries:
        fp = root / e["file"]
        if not fp.is_file():
            raise DataError(f"missing sample file {e['file']}")
        raw = fp.read_bytes()
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise DigestMismatchError(f"digest mismatch for {e['file']}")
        s = sample_from_bytes(raw, e["id"], e["file"])
        if s.image.shape != (manifest["H"], manifest["W"]):
            raise DataError(f"{e['file']}: shape {s.image.shape} differs from manifest")
        samples.append(s)
    if not samples:
        raise DataError(f"dataset {root} is empty")
    return Dataset(samples=samples, generator=manifest.get("generator"), extra=manifest.get("extra", {}))


def load_sample_file(path) -> Sample:
    p = Path(path)
    return sample_from_bytes(p.read_bytes(), p.stem, p.name)


def write_pgm(path, mask, comment: str | None = None) -> None:
    """8-bit binary portable graymap (P5); nonzero pixels become 255."""
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    H, W = m.shape
    header = b"P5\n"
    if comment:
        for line in comment.splitlines():
            header += b"# " + line.encode() + b"\n"
    header += f"{W} {H}\n255\n".encode()
    _atomic_write(Path(path), header + m.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a P5 graymap")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(int(raw[pos:end]))
        pos = end
    pos += 1
    W, H, _ = tokens
    return np.frombuffer(raw, dtype=np.uint8, count=H * W, offset=pos).reshape(H, W)
