"""Synthetic paired-modality phantom corpus, sparsification, persistence.

Each phantom subject is a stack of nested-ellipse slices whose geometry
varies smoothly along the axial position.  Subjects are grouped into
families sharing a geometry template; members differ by small parameter
perturbations plus a subject-specific smooth signature field.  The source
and target modalities are derived from the same geometry field through two
distinct monotone intensity transfer functions, plus a small
modality-specific smooth texture per slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VolumeLoadError

PIXEL_ENCODING = "f32le"


@dataclass
class Slice:
    pixels: np.ndarray  # 2D float32 in [0, 1]
    subject_id: str
    modality: str  # "source" | "target"
    position: int
    spacing: float = 1.0


@dataclass
class Volume:
    subject_id: str
    modality: str
    slices: list[Slice] = field(default_factory=list)
    dense_extent: int = 0

    def __post_init__(self):
        self.slices.sort(key=lambda s: s.position)
        pos = self.positions()
        if len(set(pos)) != len(pos):
            raise ValueError("duplicate slice positions in volume")

    def positions(self) -> list[int]:
        return [s.position for s in self.slices]

    def get(self, position: int) -> Slice:
        for s in self.slices:
            if s.position == position:
                return s
        raise KeyError(f"no slice at position {position}")

    def pixel_stack(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.slices])


@dataclass
class PhantomParams:
    n_subjects: int = 24
    slices_per_subject: int = 40
    image_size: int = 32
    families: int = 6
    intensity_jitter: float = 0.15  # per-subject source scale spread; sets Var(||y - x0||)
    subject_amp: float = 0.05      # RMS amplitude of the subject signature field
    texture_amp: float = 0.05      # amplitude of per-slice modality texture
    texture_band_frac: float = 0.0  # band-limited fraction of the texture
    geom_jitter: float = 1.0       # scale on within-family geometry perturbations
    spacing: float = 1.0

    def validate(self):
        if min(self.n_subjects, self.slices_per_subject, self.image_size,
               self.families) < 1:
            raise ValueError("all phantom counts must be positive")
        if self.intensity_jitter < 0:
            raise ValueError("intensity_jitter must be >= 0")


def _smooth_field(rng: np.random.Generator, size: int, order: int = 3) -> np.ndarray:
    """Random smooth field in [-1, 1] built from low-order 2D cosines."""
    ax = np.linspace(0.0, np.pi, size)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    out = np.zeros((size, size))
    for i in range(order):
        for j in range(order):
            out += rng.normal() * np.cos(i * xx) * np.cos(j * yy)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _band_field(rng: np.random.Generator, size: int, fmin: int = 4,
                fmax: int = 7) -> np.ndarray:
    """Random band-limited field in [-1, 1]: 2D cosines with both axis
    frequencies inside [fmin, fmax], spectrally disjoint from the smooth
    low-order texture fields."""
    ax = np.linspace(0.0, np.pi, size)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    out = np.zeros((size, size))
    for i in range(fmin, fmax + 1):
        for j in range(fmin, fmax + 1):
            out += rng.normal() * np.cos(i * xx + rng.uniform(0, np.pi)) * \
                np.cos(j * yy + rng.uniform(0, np.pi))
    rms = np.sqrt((out ** 2).mean())
    # Unit RMS: every draw carries the same energy, only the pattern differs.
    return out / rms if rms > 0 else out


def _geometry_field(size: int, scale: float, rx: float, ry: float, rot: float,
                    inner_dx: float, inner_frac: float) -> np.ndarray:
    """Nested-ellipse geometry field in [0, 1]."""
    ax = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    c, s = np.cos(rot), np.sin(rot)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    sharp = size / 2.0

    def soft_mask(r2):
        return 1.0 / (1.0 + np.exp(np.clip(sharp * (r2 - 1.0), -60.0, 60.0)))

    outer = soft_mask((u / (rx * scale)) ** 2 + (v / (ry * scale)) ** 2)
    inner = soft_mask(((u - inner_dx * scale) / (rx * scale * inner_frac)) ** 2 +
                      (v / (ry * scale * inner_frac)) ** 2)
    return np.clip(0.65 * outer + 0.35 * inner, 0.0, 1.0)


def _source_transfer(g: np.ndarray) -> np.ndarray:
    return np.clip(np.power(g, 0.6), 0.0, 1.0)


def _target_transfer(g: np.ndarray) -> np.ndarray:
    # Contrast-inverted sigmoid of the same geometry field.
    return 1.0 / (1.0 + np.exp(6.0 * (g - 0.5)))


def generate_corpus(params: PhantomParams, seed: int = 0) -> list[tuple[Volume, Volume]]:
    """Generate paired (source, target) dense volumes for all subjects."""
    params.validate()
    root = np.random.SeedSequence(seed)
    family_ss, *subject_ss = root.spawn(1 + params.n_subjects)
    fam_rng = np.random.default_rng(family_ss)

    fam_templates = []
    for _ in range(params.families):
        fam_templates.append({
            "rx": 0.62 + 0.18 * fam_rng.uniform(),
            "ry": 0.55 + 0.18 * fam_rng.uniform(),
            "rot": fam_rng.uniform(-0.5, 0.5),
            "inner_dx": fam_rng.uniform(-0.18, 0.18),
            "inner_frac": 0.30 + 0.18 * fam_rng.uniform(),
        })

    size = params.image_size
    n_pos = params.slices_per_subject
    pairs = []
    for si in range(params.n_subjects):
        rng = np.random.default_rng(subject_ss[si])
        fam = fam_templates[si % params.families]
        gj = params.geom_jitter
        rx = fam["rx"] * (1.0 + gj * 0.04 * rng.normal())
        ry = fam["ry"] * (1.0 + gj * 0.04 * rng.normal())
        rot = fam["rot"] + gj * 0.06 * rng.normal()
        inner_dx = fam["inner_dx"] + gj * 0.02 * rng.normal()
        inner_frac = np.clip(fam["inner_frac"] * (1.0 + gj * 0.05 * rng.normal()),
                             0.15, 0.6)
        signature = _band_field(rng, size)
        # Darkening-only pair scale: both modalities share it, so the
        # source-target displacement norm scales by exactly this factor and
        # the jitter knob directly controls its spread across subjects.
        # Upscaling instead would saturate at the [0, 1] clip.
        pair_scale = 1.0 - params.intensity_jitter * rng.uniform(0.0, 0.85)
        subject_id = f"s{si:03d}"

        src_slices, tgt_slices = [], []
        for p in range(n_pos):
            # Axial envelope: head widest in the middle, tapering at both ends.
            env = 0.45 + 0.55 * np.sin(np.pi * (p + 1) / (n_pos + 1))
            g = _geometry_field(size, env, rx, ry, rot, inner_dx, inner_frac)
            mask = g > 0.05
            g = np.clip(g + params.subject_amp * signature * mask, 0.0, 1.0)
            src = _source_transfer(g)
            tgt = _target_transfer(g)

            def texture():
                field = (1.0 - params.texture_band_frac) * _smooth_field(rng, size)
                if params.texture_band_frac > 0:
                    field += params.texture_band_frac * _band_field(rng, size)
                return params.texture_amp * field

            src = pair_scale * np.clip(src + texture(), 0.0, 1.0)
            tgt = pair_scale * np.clip(tgt + texture(), 0.0, 1.0)
            src_slices.append(Slice(src.astype(np.float32), subject_id, "source",
                                    p, params.spacing))
            tgt_slices.append(Slice(tgt.astype(np.float32), subject_id, "target",
                                    p, params.spacing))
        pairs.append((
            Volume(subject_id, "source", src_slices, dense_extent=n_pos),
            Volume(subject_id, "target", tgt_slices, dense_extent=n_pos),
        ))
    return pairs


def sparsify(volume: Volume, factor: int) -> Volume:
    """Keep only positions divisible by factor; dense_extent is unchanged."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor > len(volume.slices):
        raise ValueError(
            f"factor {factor} exceeds slice count {len(volume.slices)}")
    kept = [s for s in volume.slices if s.position % factor == 0]
    return Volume(volume.subject_id, volume.modality, kept,
                  dense_extent=volume.dense_extent)


def save_volume(volume: Volume, path) -> None:
    """Write a volume as manifest.json plus one f32le file per slice."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = volume.slices[0].pixels.shape
    manifest = {
        "subject_id": volume.subject_id,
        "modality": volume.modality,
        "dense_extent": volume.dense_extent,
        "positions": volume.positions(),
        "spacing": volume.slices[0].spacing,
        "height": h,
        "width": w,
        "pixel_encoding": PIXEL_ENCODING,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for s in volume.slices:
        data = np.ascontiguousarray(s.pixels, dtype="<f4")
        (path / f"slice_{s.position:04d}.f32").write_bytes(data.tobytes())


def load_volume(path) -> Volume:
    """Load a volume directory, validating the manifest against the files."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise VolumeLoadError(f"missing manifest.json in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeLoadError(f"malformed manifest in {path}: {exc}") from exc
    for key in ("subject_id", "modality", "dense_extent", "positions",
                "spacing", "height", "width", "pixel_encoding"):
        if key not in manifest:
            raise VolumeLoadError(f"manifest missing key {key!r} in {path}")
    if manifest["pixel_encoding"] != PIXEL_ENCODING:
        raise VolumeLoadError(
            f"unsupported pixel encoding {manifest['pixel_encoding']!r}")
    h, w = manifest["height"], manifest["width"]
    slices = []
    for pos in manifest["positions"]:
        spath = path / f"slice_{pos:04d}.f32"
        if not spath.exists():
            raise VolumeLoadError(f"missing slice file for position {pos} in {path}")
        raw = spath.read_bytes()
        if len(raw) != h * w * 4:
            raise VolumeLoadError(
                f"truncated slice file for position {pos} in {path}: "
                f"{len(raw)} bytes, expected {h * w * 4}")
        pixels = np.frombuffer(raw, dtype="<f4").reshape(h, w)
        if not np.isfinite(pixels).all() or pixels.min() < 0 or pixels.max() > 1:
            raise VolumeLoadError(
                f"pixel values outside [0, 1] at position {pos} in {path}")
        slices.append(Slice(pixels.copy(), manifest["subject_id"],
                            manifest["modality"], int(pos),
                            float(manifest["spacing"])))
    return Volume(manifest["subject_id"], manifest["modality"], slices,
                  dense_extent=int(manifest["dense_extent"]))


def save_corpus(pairs: list[tuple[Volume, Volume]], path) -> None:
    path = Path(path)
    for src, tgt in pairs:
        save_volume(src, path / f"{src.subject_id}_source")
        save_volume(tgt, path / f"{tgt.subject_id}_target")


def load_corpus(path) -> list[tuple[Volume, Volume]]:
    path = Path(path)
    sources = sorted(p for p in path.iterdir() if p.name.endswith("_source"))
    pairs = []
    for sp in sources:
        tp = path / sp.name.replace("_source", "_target")
        if not tp.exists():
            raise VolumeLoadError(f"missing paired target volume for {sp.name}")
        pairs.append((load_volume(sp), load_volume(tp)))
    return pairs
