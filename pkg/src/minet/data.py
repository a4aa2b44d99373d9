"""Synthetic hazy/clean pairs and binary PPM image I/O.

Images are float arrays of shape (H, W, 3) in [0, 1]; depth maps are
(H, W). Haze follows the atmospheric scattering model
``I = t * R + A * (1 - t)`` with transmission ``t = exp(-beta * depth)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEPTH_KINDS = ("ramp", "constant", "radial")


class PPMError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class HazeParams:
    beta: float
    A: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"scattering coefficient must be >= 0, got {self.beta}")
        if not 0.0 <= self.A <= 1.0:
            raise ValueError(f"airlight must lie in [0, 1], got {self.A}")


@dataclass
class HazyPair:
    hazy: np.ndarray
    clean: np.ndarray
    beta: float
    A: float
    depth_kind: str


def transmission(depth: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(-beta * depth)


def synthesize_haze(clean: np.ndarray, depth: np.ndarray, params: HazeParams) -> np.ndarray:
    if clean.ndim != 3 or clean.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {clean.shape}")
    if depth.shape != clean.shape[:2]:
        raise ValueError(f"depth {depth.shape} does not match image {clean.shape[:2]}")
    if params.beta < 0:
        raise ValueError("negative scattering coefficient")
    t = transmission(depth, params.beta)[..., None]
    return np.clip(t * clean + params.A * (1.0 - t), 0.0, 1.0)


def make_depth(kind: str, h: int, w: int, scale: float = 1.0) -> np.ndarray:
    if h < 1 or w < 1:
        raise ValueError("depth map needs positive size")
    if kind == "constant":
        return np.full((h, w), float(scale))
    if kind == "ramp":
        cols = np.linspace(0.0, scale, w) if w > 1 else np.zeros(1)
        return np.broadcast_to(cols, (h, w)).copy()
    if kind == "radial":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        r = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
        rmax = r.max()
        return r * (scale / rmax) if rmax > 0 else np.zeros((h, w))
    raise ValueError(f"unknown depth kind {kind!r}; expected one of {DEPTH_KINDS}")


def procedural_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Colour gradient background with a few flat rectangles and smoothed noise."""
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    c0, c1, c2 = rng.uniform(0.0, 1.0, size=(3, 3))
    img = c0 + (c1 - c0) * xx[..., None] + (c2 - c0) * yy[..., None] * 0.5
    for _ in range(rng.integers(2, 5)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        hh, ww = rng.integers(max(h // 8, 1), max(h // 2, 2)), rng.integers(max(w // 8, 1), max(w // 2, 2))
        img[y0 : y0 + hh, x0 : x0 + ww] = rng.uniform(0.0, 1.0, size=3)
    noise = rng.standard_normal((h, w, 3))
    noise = (noise + np.roll(noise, 1, 0) + np.roll(noise, 1, 1) + np.roll(noise, (1, 1), (0, 1))) / 4.0
    img = img + 0.04 * noise
    return np.clip(img, 0.0, 1.0)


def make_pair(seed: int, index: int, h: int, w: int, beta_range, A_range) -> HazyPair:
    rng = np.random.default_rng([seed, index])
    clean = procedural_image(rng, h, w)
    kind = DEPTH_KINDS[int(rng.integers(0, len(DEPTH_KINDS)))]
    depth = make_depth(kind, h, w, scale=float(rng.uniform(0.5, 1.5)))
    beta = float(rng.uniform(*beta_range))
    A = float(rng.uniform(*A_range))
    hazy = synthesize_haze(clean, depth, HazeParams(beta, A))
    return HazyPair(hazy, clean, beta, A, kind)


def make_dataset(
    seed: int,
    n_pairs: int,
    h: int,
    w: int,
    beta_range=(0.4, 1.6),
    A_range=(0.7, 1.0),
    start: int = 0,
) -> list[HazyPair]:
    """Deterministic toy dataset; pair ``i`` depends only on ``(seed, start + i)``."""
    if beta_range[0] < 0 or beta_range[0] > beta_range[1]:
        raise ValueError(f"invalid beta range {beta_range}")
    if not 0 <= A_range[0] <= A_range[1] <= 1:
        raise ValueError(f"invalid airlight range {A_range}")
    return [make_pair(seed, start + i, h, w, beta_range, A_range) for i in range(n_pairs)]


# -- PPM -----------------------------------------------------------------------


def quantize(img: np.ndarray) -> np.ndarray:
    # Round half away from zero; inputs are non-negative after clipping.
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def save_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise PPMError("malformed PPM header: unexpected end of file")
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        tokens.append(buf[i:j])
        i = j
    if i >= n or not buf[i : i + 1].isspace():
        raise PPMError("malformed PPM header: missing whitespace before payload")
    return tokens, i + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise PPMError(f"unsupported PPM magic {tokens[0]!r}; only binary P6 is read")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PPMError(f"malformed PPM header: {exc}") from None
    if w < 1 or h < 1:
        raise PPMError(f"malformed PPM header: size {w}x{h}")
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}; only 255 is read")
    need = w * h * 3
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise PPMError(f"truncated PPM payload: expected {need} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def load_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# -- manifests -----------------------------------------------------------------


@dataclass
class ManifestRow:
    hazy_path: Path
    clean_path: Path
    beta: float
    A: float
    depth_kind: str


def write_dataset(root, pairs: list[HazyPair], name: str = "manifest.tsv") -> Path:
    """Save pairs as PPM files plus a tab-separated manifest; return its path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / name
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for i, pair in enumerate(pairs):
            hazy, clean = f"hazy_{i:04d}.ppm", f"clean_{i:04d}.ppm"
            save_ppm(root / hazy, pair.hazy)
            save_ppm(root / clean, pair.clean)
            w.writerow([hazy, clean, repr(pair.beta), repr(pair.A), pair.depth_kind])
    return manifest


def read_manifest(path) -> list[ManifestRow]:
    """Parse a manifest; relative image paths resolve against its directory."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            beta, A = float(parts[2]), float(parts[3])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: beta/A are not numbers") from None
        rows.append(ManifestRow(path.parent / parts[0], path.parent / parts[1], beta, A, parts[4]))
    return rows


def load_dataset(manifest) -> list[HazyPair]:
    return [
        HazyPair(load_ppm(r.hazy_path), load_ppm(r.clean_path), r.beta, r.A, r.depth_kind)
        for r in read_manifest(manifest)
    ]


def to_batch(images, dtype=np.float64) -> np.ndarray:
    """Stack (H, W, 3) images into an (N, 3, H, W) array."""
    return np.ascontiguousarray(np.stack(list(images)).transpose(0, 3, 1, 2), dtype=dtype)


def from_batch(batch: np.ndarray) -> list[np.ndarray]:
    return list(np.asarray(batch, dtype=np.float64).transpose(0, 2, 3, 1))
