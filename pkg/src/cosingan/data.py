"""Phantom corpora and volume ingestion.

Raw volume container
--------------------
A volume is described by a JSON header (``*.json``)::

    {
      "format": "cosingan-volume/1",
      "shape": [Z, H, W],
      "image_file": "scan.img.raw",     # relative to the header
      "image_dtype": "float32",         # little-endian, C order
      "label_file": "scan.lbl.raw",
      "label_dtype": "uint8",
      "intensity_range": [lo, hi],      # optional; defaults to volume min/max
      "label_map": {"0": 0, "1": 1, "2": 1, "3": 2}   # optional
    }

The default label map merges left/right lung (1, 2) into class 1 and maps
infection (3) to class 2.  NIfTI pairs are read when ``nibabel`` is installed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import (INFECTION, LUNG, ConfigError, SamplePair, load_image_png, load_mask_png, resize_image,
                   resize_mask, save_image_png, save_mask_png)
from .evaluation import EvalCorpus

VOLUME_FORMAT = "cosingan-volume/1"
DEFAULT_LABEL_MAP = {0: 0, 1: LUNG, 2: LUNG, 3: INFECTION}


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    slices_per_scan: int = 6
    lung_center_offset: float = 0.2   # horizontal offset of each lung from the midline
    lung_axes: tuple = (0.30, 0.14)   # (vertical, horizontal) semi-axes at mid-volume
    max_blobs: int = 3
    blob_radius: tuple = (0.06, 0.14)
    infection_prob: float = 0.8
    # per modality: (body, lung, infection) mean intensity and texture amplitude
    modality_levels: tuple = ((0.35, -0.75, -0.05), (0.75, -0.25, 0.45))
    modality_texture: tuple = (0.06, 0.12)

    def to_dict(self):
        return asdict(self)


def _ellipse(yy, xx, cy, cx, ay, ax):
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def phantom_slice(spec: PhantomSpec, rng, modality, t, scan_params):
    """One (image, mask) pair; ``t`` in [0, 1] is the axial position."""
    s = spec.size
    yy, xx = (np.mgrid[0:s, 0:s].astype(np.float64) + 0.5) / s
    body = _ellipse(yy, xx, 0.5, 0.5, *scan_params["body_axes"])
    extent = 0.45 + 0.55 * np.sin(np.pi * t)
    ay, ax = (a * extent for a in spec.lung_axes)
    ay *= scan_params["lung_scale"]
    lungs = np.zeros((s, s), dtype=bool)
    for side in (-1, 1):
        cx = 0.5 + side * spec.lung_center_offset * scan_params["spread"]
        lungs |= _ellipse(yy, xx, 0.5 + scan_params["dy"], cx, ay, ax)
    lungs &= body
    infection = np.zeros((s, s), dtype=bool)
    if rng.random() < spec.infection_prob * scan_params["load"]:
        for _ in range(rng.integers(1, spec.max_blobs + 1)):
            ly, lx = np.nonzero(lungs)
            if not len(ly):
                break
            k = rng.integers(len(ly))
            r = rng.uniform(*spec.blob_radius)
            wobble = 1.0 + 0.25 * np.sin(np.arctan2(yy - yy[ly[k], lx[k]], xx - xx[ly[k], lx[k]]) * 3 + rng.uniform(0, 6.3))
            d = np.hypot(yy - yy[ly[k], lx[k]], xx - xx[ly[k], lx[k]])
            infection |= d <= r * wobble
        infection &= lungs
    lv_body, lv_lung, lv_inf = spec.modality_levels[modality]
    amp = spec.modality_texture[modality]
    texture = gaussian_filter(rng.normal(0, 1, (s, s)), 0.8 + modality * 0.7)
    texture /= max(texture.std(), 1e-9)
    img = np.full((s, s), -1.0)
    img[body] = lv_body
    img[lungs] = lv_lung
    img[infection] = lv_inf
    img = gaussian_filter(img, 0.6)
    img += amp * texture * body
    mask = np.zeros((s, s), dtype=np.int64)
    mask[lungs] = LUNG
    mask[infection] = INFECTION
    return np.clip(img, -1.0, 1.0), mask


def make_phantom_corpus(spec: PhantomSpec = PhantomSpec(), n: int = 48, seed: int = 0, split="train",
                        first_scan=0, modalities=(0, 1)) -> EvalCorpus:
    """``n`` slices grouped into scans of ``spec.slices_per_scan``; scans alternate modality."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    per = spec.slices_per_scan
    n_scans = -(-n // per)
    for sc in range(n_scans):
        scan_idx = first_scan + sc
        modality = modalities[scan_idx % len(modalities)]
        params = {
            "body_axes": (rng.uniform(0.38, 0.46), rng.uniform(0.42, 0.48)),
            "lung_scale": rng.uniform(0.85, 1.1),
            "spread": rng.uniform(0.9, 1.1),
            "dy": rng.uniform(-0.04, 0.04),
            "load": rng.uniform(0.25, 1.0),  # per-scan disease burden
        }
        count = min(per, n - len(samples))
        for k, t in enumerate(np.linspace(0.1, 0.9, per)[:count]):
            img, mask = phantom_slice(spec, rng, modality, t, params)
            sid = f"{split}{scan_idx:03d}"
            samples.append(SamplePair(img, mask, modality_tag=modality, scan_id=sid, name=f"{sid}_{k:04d}"))
    return EvalCorpus(samples, split)


def histogram_distance(a, b, bins=32):
    ha, _ = np.histogram(np.ravel(a), bins=bins, range=(-1, 1))
    hb, _ = np.histogram(np.ravel(b), bins=bins, range=(-1, 1))
    return float(np.abs(ha / ha.sum() - hb / hb.sum()).sum())


# ---------------------------------------------------------------------------
# volume ingestion
# ---------------------------------------------------------------------------

def write_raw_volume(header_path, image, labels, intensity_range=None, label_map=None):
    header_path = Path(header_path)
    stem = header_path.name[:-5] if header_path.name.endswith(".json") else header_path.name
    image = np.asarray(image, dtype="<f4")
    labels = np.asarray(labels, dtype=np.uint8)
    if image.shape != labels.shape or image.ndim != 3:
        raise ValueError("image and label volumes must be aligned 3-D arrays")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    (header_path.parent / f"{stem}.img.raw").write_bytes(image.tobytes())
    (header_path.parent / f"{stem}.lbl.raw").write_bytes(labels.tobytes())
    header = {"format": VOLUME_FORMAT, "shape": list(image.shape), "image_file": f"{stem}.img.raw",
              "image_dtype": "float32", "label_file": f"{stem}.lbl.raw", "label_dtype": "uint8"}
    if intensity_range is not None:
        header["intensity_range"] = list(intensity_range)
    if label_map is not None:
        header["label_map"] = {str(k): int(v) for k, v in label_map.items()}
    header_path.write_text(json.dumps(header, indent=2))
    return header_path


def read_volume(path):
    """Return ``(image, labels, header)`` from a raw header or a NIfTI image path."""
    path = Path(path)
    if path.suffix == ".json":
        header = json.loads(path.read_text())
        if header.get("format") != VOLUME_FORMAT:
            raise ConfigError(f"{path}: unknown volume format {header.get('format')!r}")
        shape = tuple(header["shape"])
        img = np.fromfile(path.parent / header["image_file"], dtype=np.dtype(header.get("image_dtype", "float32")).newbyteorder("<"))
        lbl = np.fromfile(path.parent / header["label_file"], dtype=np.dtype(header.get("label_dtype", "uint8")))
        if img.size != np.prod(shape) or lbl.size != np.prod(shape):
            raise ValueError(f"{path}: image/label sizes do not match shape {shape}")
        return img.reshape(shape).astype(np.float64), lbl.reshape(shape).astype(np.int64), header
    try:
        import nibabel as nib
    except ImportError as e:
        raise ConfigError(f"{path}: only raw containers are supported without nibabel") from e
    lbl_path = Path(str(path).replace(".nii", "_label.nii"))
    img = np.asarray(nib.load(str(path)).get_fdata()).transpose(2, 1, 0)
    lbl = np.asarray(nib.load(str(lbl_path)).get_fdata()).transpose(2, 1, 0).astype(np.int64)
    return img, lbl, {}


def remap_labels(labels, label_map=None):
    lut_map = {int(k): int(v) for k, v in (label_map or DEFAULT_LABEL_MAP).items()}
    labels = np.asarray(labels, dtype=np.int64)
    unknown = set(np.unique(labels).tolist()) - set(lut_map)
    if unknown:
        raise ValueError(f"labels {sorted(unknown)} missing from the label map")
    lut = np.zeros(max(lut_map) + 1, dtype=np.int64)
    for k, v in lut_map.items():
        lut[k] = v
    return lut[labels]


def ingest_volume(path, out_dir, size=None, scan=None, modality_tag=0):
    """Slice a volume axially into PNG pairs ``{scan}_{index}_image.png`` / ``_mask.png``."""
    image, labels, header = read_volume(path)
    if image.shape != labels.shape:
        raise ValueError(f"volume {image.shape} and labels {labels.shape} are misaligned")
    lo, hi = header.get("intensity_range", (float(image.min()), float(image.max())))
    scale = (hi - lo) or 1.0
    image = np.clip((image - lo) / scale * 2.0 - 1.0, -1.0, 1.0)
    labels = remap_labels(labels, header.get("label_map"))
    scan = scan or Path(path).name.split(".")[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for k in range(image.shape[0]):
        img, mk = image[k], labels[k]
        if size is not None:
            img = np.clip(resize_image(img, (size, size)), -1, 1)
            mk = resize_mask(mk, (size, size))
        name = f"{scan}_{k:04d}"
        save_image_png(out_dir / f"{name}_image.png", img)
        save_mask_png(out_dir / f"{name}_mask.png", mk)
        samples.append(SamplePair(img, mk, modality_tag=modality_tag, scan_id=scan, name=name))
    return samples


def save_corpus(corpus: EvalCorpus, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for s in corpus:
        save_image_png(out_dir / f"{s.name}_image.png", s.image)
        save_mask_png(out_dir / f"{s.name}_mask.png", s.mask)
        index.append({"name": s.name, "scan_id": s.scan_id, "modality_tag": s.modality_tag})
    (out_dir / "index.json").write_text(json.dumps({"split": corpus.split, "samples": index}, indent=2))
    return out_dir


def load_corpus(in_dir) -> EvalCorpus:
    """Read a directory of ``*_image.png`` / ``*_mask.png`` pairs (``index.json`` optional).

    A synthesized corpus (``images/`` and ``masks/`` subdirectories) is read too.
    """
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise ConfigError(f"corpus directory {in_dir} does not exist")
    if (in_dir / "images").is_dir() and (in_dir / "masks").is_dir():
        samples = [SamplePair(load_image_png(p), load_mask_png(in_dir / "masks" / p.name), name=p.stem,
                              scan_id=p.stem.rsplit("_", 1)[0])
                   for p in sorted((in_dir / "images").glob("*.png"))]
        return EvalCorpus(samples, "train")
    meta = {}
    split = "train"
    if (in_dir / "index.json").exists():
        idx = json.loads((in_dir / "index.json").read_text())
        split = idx.get("split", split)
        meta = {e["name"]: e for e in idx["samples"]}
    samples = []
    for p in sorted(in_dir.glob("*_image.png")):
        name = p.name[: -len("_image.png")]
        m = meta.get(name, {})
        samples.append(SamplePair(load_image_png(p), load_mask_png(in_dir / f"{name}_mask.png"),
                                  modality_tag=m.get("modality_tag", 0),
                                  scan_id=m.get("scan_id", name.rsplit("_", 1)[0]), name=name))
    return EvalCorpus(samples, split)
