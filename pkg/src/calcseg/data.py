"""Images, masks, dataset manifests, train/test splitting and the synthetic
mammogram generator."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "#calcseg-manifest"
MANIFEST_VERSION = "v1"
MANIFEST_COLUMNS = (
    "image", "mask", "patient_id", "acquisition_date", "view",
    "pixel_spacing_mm", "width", "height", "dataset",
)
VIEWS = ("CC", "MLO")


# --- Netpbm ---------------------------------------------------------------

def _read_netpbm_header(fh):
    tokens = []
    while len(tokens) < 4:
        line = fh.readline()
        if not line:
            raise DataError("truncated netpbm header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported netpbm type {magic!r} (need binary P5/P6)")
    return magic, width, height, maxval


def read_netpbm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM/PPM. Returns (raw integer array, maxval)."""
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_netpbm_header(fh)
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        channels = 3 if magic == b"P6" else 1
        data = np.frombuffer(fh.read(w * h * channels * dtype.itemsize), dtype=dtype)
    if data.size != w * h * channels:
        raise DataError(f"{path}: pixel payload shorter than header declares")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_netpbm(path, data: np.ndarray, maxval: int | None = None):
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    elif data.ndim == 2:
        magic = b"P5"
    else:
        raise DataError(f"cannot write array of shape {data.shape} as netpbm")
    if maxval is None:
        maxval = 65535 if data.dtype == np.uint16 else 255
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = data.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype=dtype).tobytes())


def image_size(path) -> tuple[int, int]:
    """(height, width) without decoding the pixel payload."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        with open(path, "rb") as fh:
            _, w, h, _ = _read_netpbm_header(fh)
        return h, w
    from PIL import Image

    with Image.open(path) as im:
        return im.height, im.width


def load_image(path, normalization: str = "maxval") -> np.ndarray:
    """Grayscale image as float32 in [0, 1].

    ``maxval`` (the default) divides by the format's full scale (255, 65535
    or the declared maxval) and is lossless for 8- and 16-bit sources;
    ``minmax`` rescales each image to span [0, 1], which brightens images
    without calcifications and makes tissue look like them.
    """
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        raw, maxval = read_netpbm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            raw = np.asarray(im)
        maxval = 65535 if raw.dtype == np.uint16 or raw.max(initial=0) > 255 else 255
    if raw.ndim == 3:
        raw = raw[..., :3].mean(axis=2)
    img = raw.astype(np.float64)
    if normalization == "maxval":
        img = img / maxval
    elif normalization == "minmax":
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    return img.astype(np.float32)


def save_image16(path, image: np.ndarray):
    write_netpbm(path, np.round(np.clip(image, 0, 1) * 65535).astype(np.uint16), 65535)


def save_mask(path, mask: np.ndarray):
    write_netpbm(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8), 255)


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        raw, _ = read_netpbm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            raw = np.asarray(im)
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    return raw > 0


# --- manifests ------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    image: str
    mask: str
    patient_id: str = ""
    acquisition_date: str = ""
    view: str = "CC"
    pixel_spacing_mm: float = 0.1
    width: int = 0
    height: int = 0
    dataset: str = ""

    def to_line(self) -> str:
        return "\t".join(str(getattr(self, c)) for c in MANIFEST_COLUMNS)


@dataclass
class Sample:
    """One mammogram with its pixel-wise mask, loaded on demand."""

    record: ManifestRecord
    _image: Callable[[], np.ndarray] = field(repr=False)
    _mask: Callable[[], np.ndarray] = field(repr=False)

    @classmethod
    def from_arrays(cls, image, mask, record: ManifestRecord | None = None) -> "Sample":
        image = np.asarray(image, dtype=np.float32)
        mask = np.asarray(mask).astype(bool)
        if image.shape != mask.shape:
            raise DataError(f"image {image.shape} and mask {mask.shape} differ")
        if record is None:
            record = ManifestRecord("", "", width=image.shape[1], height=image.shape[0])
        return cls(record, lambda: image, lambda: mask)

    @property
    def id(self) -> str:
        return self.record.image or self.record.patient_id

    @property
    def pixel_spacing_mm(self) -> float:
        return self.record.pixel_spacing_mm

    def image(self) -> np.ndarray:
        return self._image()

    def mask(self) -> np.ndarray:
        return self._mask()


@dataclass
class Dataset(Sequence):
    samples: list[Sample] = field(default_factory=list)
    errors: list[DataError] = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i], [], self.root)
        return self.samples[i]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def tag(self) -> str | None:
        tags = {s.record.dataset for s in self.samples if s.record.dataset}
        return tags.pop() if len(tags) == 1 else None

    def positive_fraction(self) -> float:
        pos = tot = 0
        for s in self.samples:
            m = s.mask()
            pos += int(m.sum())
            tot += m.size
        return pos / tot if tot else 0.0


def write_manifest(path, records: list[ManifestRecord]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MANIFEST_MAGIC}\t{MANIFEST_VERSION}", "\t".join(MANIFEST_COLUMNS)]
    lines += [r.to_line() for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    magic = lines[0].split("\t")
    if magic[0] != MANIFEST_MAGIC:
        raise DataError(f"{path}: missing manifest magic line")
    if len(magic) < 2 or magic[1] != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {magic[1:]}")
    if len(lines) < 2:
        return []
    header = lines[1].split("\t")
    missing = set(MANIFEST_COLUMNS) - set(header)
    if missing:
        raise DataError(f"{path}: manifest header missing columns {sorted(missing)}")
    records = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        values = line.split("\t")
        if len(values) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(values)}",
                            record=f"line {lineno}")
        row = dict(zip(header, values))
        try:
            records.append(ManifestRecord(
                image=row["image"], mask=row["mask"], patient_id=row["patient_id"],
                acquisition_date=row["acquisition_date"], view=row["view"],
                pixel_spacing_mm=float(row["pixel_spacing_mm"]),
                width=int(row["width"]), height=int(row["height"]), dataset=row["dataset"]))
        except ValueError as exc:
            raise DataError(str(exc), record=f"line {lineno}") from None
    return records


def _validate_record(rec: ManifestRecord, root: Path):
    if rec.view not in VIEWS:
        raise DataError(f"unknown view {rec.view!r} (expected CC or MLO)", rec.image)
    if not rec.pixel_spacing_mm > 0:
        raise DataError(f"pixel spacing must be positive, got {rec.pixel_spacing_mm}", rec.image)
    for p in (rec.image, rec.mask):
        if not (root / p).is_file():
            raise DataError(f"missing file {p}", rec.image)
    declared = (rec.height, rec.width)
    for p in (rec.image, rec.mask):
        actual = image_size(root / p)
        if actual != declared:
            raise DataError(f"{p} is {actual[1]}x{actual[0]} but manifest declares "
                            f"{rec.width}x{rec.height}", rec.image)


def load_dataset(manifest_path, strict: bool = True, normalization: str = "maxval") -> Dataset:
    """Validate every record and return lazily-loading samples.

    ``strict`` raises on the first bad record; otherwise bad records are
    skipped and collected in ``Dataset.errors``.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    ds = Dataset(root=root)
    for rec in read_manifest(manifest_path):
        try:
            _validate_record(rec, root)
        except DataError as exc:
            if strict:
                raise
            log.warning("skipping %s", exc)
            ds.errors.append(exc)
            continue
        img_path, mask_path = root / rec.image, root / rec.mask
        ds.samples.append(Sample(
            rec,
            lambda p=img_path: load_image(p, normalization),
            lambda p=mask_path: load_mask(p)))
    return ds


def split(dataset, train_fraction: float = 0.75, seed: int = 0):
    """Seeded shuffle, then the first floor(n * train_fraction) go to train."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(n * train_fraction)
    if n and (n_train == 0 or n_train == n):
        warnings.warn(f"split of {n} samples at {train_fraction} leaves one side empty",
                      stacklevel=2)
    samples = list(dataset)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    root = getattr(dataset, "root", None)
    return Dataset(train, root=root), Dataset(test, root=root)


# --- synthetic generator --------------------------------------------------

@dataclass(frozen=True)
class SyntheticParams:
    height: int = 512
    width: int = 512
    octave_sigmas: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0)
    octave_amplitudes: tuple[float, ...] = (0.25, 0.35, 0.5, 0.7, 0.8)
    background_range: tuple[float, float] = (0.15, 0.65)
    sensor_noise: float = 0.01
    num_isolated: int = 6
    num_clusters: int = 2
    cluster_radius: float = 24.0
    cluster_size: int = 6
    blob_diameter: tuple[float, float] = (3.0, 12.0)
    # diameters follow a power law p(d) ~ d**-exponent on blob_diameter; 0 is uniform
    blob_size_exponent: float = 5.0
    blob_amplitude: tuple[float, float] = (0.12, 0.35)
    pixel_spacing_mm: float = 0.1
    seed: int = 0

    def expected_positive_fraction(self) -> float:
        a, b = self.blob_diameter
        p = self.blob_size_exponent
        if a == b:
            mean_d2 = a * a
        else:
            mean_d2 = _power_moment(a, b, 2 - p) / _power_moment(a, b, -p)
        count = self.num_isolated + self.num_clusters * self.cluster_size
        return count * math.pi / 4 * mean_d2 / (self.height * self.width)


def _power_moment(a, b, e):
    """Integral of d**e over [a, b]."""
    if e == -1:
        return math.log(b / a)
    return (b ** (e + 1) - a ** (e + 1)) / (e + 1)


def _sample_diameter(rng, lo, hi, exponent) -> float:
    """Inverse-CDF draw from p(d) ~ d**-exponent on [lo, hi]."""
    if lo == hi:
        return lo
    u = rng.uniform()
    if exponent == 1:
        return lo * (hi / lo) ** u
    a = 1 - exponent
    return (lo ** a + u * (hi ** a - lo ** a)) ** (1 / a)


def _background(params: SyntheticParams, rng) -> np.ndarray:
    shape = (params.height, params.width)
    bg = np.zeros(shape)
    for sigma, amp in zip(params.octave_sigmas, params.octave_amplitudes):
        # periodic smoothing in the Fourier domain; cost is independent of sigma
        spectrum = np.fft.rfft2(rng.standard_normal(shape))
        spectrum = ndimage.fourier_gaussian(spectrum, sigma, n=shape[1])
        layer = np.fft.irfft2(spectrum, s=shape)
        bg += amp * layer / (layer.std() or 1.0)
    bg = (bg - bg.min()) / (np.ptp(bg) or 1.0)
    lo, hi = params.background_range
    return lo + (hi - lo) * bg


class _BlobCanvas:
    """Renders Gaussian bumps and their half-peak masks, rejecting placements
    whose mask would touch an existing blob (even diagonally)."""

    def __init__(self, shape):
        self.shape = shape
        self.bumps = np.zeros(shape)
        self.mask = np.zeros(shape, bool)
        self.count = 0

    def try_place(self, cy, cx, diameter, amplitude) -> bool:
        h, w = self.shape
        r = diameter / 2
        reach = int(math.ceil(2.5 * r)) + 1
        y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 2)
        x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 2)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        # exp(-d2 / 2s^2) > 1/2  <=>  d2 < r^2 when the FWHM equals the diameter
        disk = d2 < r * r
        if not disk.any():
            return False
        grown = ndimage.binary_dilation(disk, structure=np.ones((3, 3), bool))
        if (grown & self.mask[y0:y1, x0:x1]).any():
            return False
        sigma2 = r * r / (2 * math.log(2))
        self.bumps[y0:y1, x0:x1] += amplitude * np.exp(-d2 / (2 * sigma2))
        self.mask[y0:y1, x0:x1] |= disk
        self.count += 1
        return True


def generate_synthetic(params: SyntheticParams = SyntheticParams(), max_tries: int = 200):
    """Return (image in [0,1] float32, boolean mask, ManifestRecord)."""
    if params.height < 1 or params.width < 1:
        raise ConfigError("synthetic image size must be positive")
    lo_d, hi_d = params.blob_diameter
    if not 0 < lo_d <= hi_d:
        raise ConfigError(f"invalid blob diameter range {params.blob_diameter}")
    frac = params.expected_positive_fraction()
    if frac and not (1 / 5000 <= frac <= 1 / 100):
        warnings.warn(f"expected positive fraction {frac:.2e} is outside [1/5000, 1/100]",
                      stacklevel=2)
    rng = np.random.default_rng(params.seed)
    image = _background(params, rng)
    h, w = params.height, params.width
    canvas = _BlobCanvas((h, w))

    def place(sample_center):
        for _ in range(max_tries):
            d = _sample_diameter(rng, lo_d, hi_d, params.blob_size_exponent)
            amp = rng.uniform(*params.blob_amplitude)
            cy, cx = sample_center(d)
            if canvas.try_place(cy, cx, d, amp):
                return True
        log.warning("could not place blob after %d tries", max_tries)
        return False

    def uniform_center(d):
        m = d / 2 + 1
        return rng.uniform(m, max(m, h - m)), rng.uniform(m, max(m, w - m))

    for _ in range(params.num_isolated):
        place(uniform_center)
    for _ in range(params.num_clusters):
        R = params.cluster_radius
        m = R + hi_d
        ccy, ccx = rng.uniform(m, max(m, h - m)), rng.uniform(m, max(m, w - m))

        def disk_center(d, ccy=ccy, ccx=ccx):
            rho, theta = R * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
            cy = min(max(ccy + rho * math.sin(theta), d / 2 + 1), h - d / 2 - 1)
            cx = min(max(ccx + rho * math.cos(theta), d / 2 + 1), w - d / 2 - 1)
            return cy, cx

        for _ in range(params.cluster_size):
            place(disk_center)

    image = image + canvas.bumps
    if params.sensor_noise:
        image = image + rng.normal(0, params.sensor_noise, size=image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    record = ManifestRecord("", "", width=w, height=h, pixel_spacing_mm=params.pixel_spacing_mm,
                            dataset="synthetic")
    return image, canvas.mask.copy(), record


def synthetic_dataset(n: int, params: SyntheticParams = SyntheticParams(), seed: int = 0) -> Dataset:
    """In-memory dataset of ``n`` generated images with per-image derived seeds."""
    samples = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        p = replace(params, seed=int(child.generate_state(1)[0]))
        image, mask, rec = generate_synthetic(p)
        rec = _synthetic_record(rec, i)
        samples.append(Sample.from_arrays(image, mask, rec))
    return Dataset(samples)


def _synthetic_record(rec: ManifestRecord, i: int) -> ManifestRecord:
    return replace(rec, image=f"images/synth_{i:04d}.pgm", mask=f"masks/synth_{i:04d}.pgm",
                   patient_id=f"P{i // 2:04d}", acquisition_date="2020-01-01",
                   view=VIEWS[i % 2])


def write_synthetic_dataset(out_dir, n: int, params: SyntheticParams = SyntheticParams(),
                            seed: int = 0) -> Path:
    """Write images (16-bit PGM), masks (8-bit PGM) and manifest.tsv; return the manifest path."""
    out_dir = Path(out_dir)
    ds = synthetic_dataset(n, params, seed)
    for s in ds:
        save_image16(out_dir / s.record.image, s.image())
        save_mask(out_dir / s.record.mask, s.mask())
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, [s.record for s in ds])
    return manifest
