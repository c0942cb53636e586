"""Analytic test scenes with exact subpixel ground truth.

Scenes hold blurred disks (cruciform targets) and blurred rectangular grids
(shutter arrays).  Rendering evaluates the scene model at the inverse
transformed pixel positions, so drifted images carry no resampling error.
"""

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, erfc

from .affine import AffineTransform, apply_point, invert
from .image import RegionSpec, save_pgm

__all__ = [
    "Disk",
    "Grid",
    "SceneSpec",
    "DriftSchedule",
    "ManifestRow",
    "render_scene",
    "render_region",
    "make_sequence",
    "write_manifest",
    "read_manifest",
    "random_scene",
    "desk_scene",
    "desk_regions",
    "campaign_schedule",
]

SQRT2 = np.sqrt(2.0)
# evaluate edge profiles only within this many blur sigmas of an edge
_REACH = 7.0


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    radius: float
    amplitude: float


@dataclass(frozen=True)
class Grid:
    """Rectangular array of ``nx x ny`` bright cells separated by dark bars."""

    origin_x: float
    origin_y: float
    pitch_x: float
    pitch_y: float
    nx: int
    ny: int
    bar_fraction: float
    amplitude: float

    @property
    def extent(self):
        return (self.origin_x, self.origin_y,
                self.origin_x + self.nx * self.pitch_x, self.origin_y + self.ny * self.pitch_y)


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    background: float = 1000.0
    disks: tuple = ()
    grids: tuple = ()
    psf_sigma: float = 1.2
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "disks", tuple(Disk(**d) if isinstance(d, dict) else d for d in self.disks))
        object.__setattr__(self, "grids", tuple(Grid(**g) if isinstance(g, dict) else g for g in self.grids))
        if self.psf_sigma < 0.3:
            raise ValueError(f"psf_sigma must be >= 0.3 px, got {self.psf_sigma}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for d in self.disks:
            if d.amplitude <= 0 or d.radius <= 0:
                raise ValueError(f"disk {d} needs positive radius and amplitude")
            if not (0 <= d.cx - d.radius and d.cx + d.radius <= self.width - 1
                    and 0 <= d.cy - d.radius and d.cy + d.radius <= self.height - 1):
                raise ValueError(f"disk {d} extends outside the {self.width}x{self.height} frame")
        for g in self.grids:
            x0, y0, x1, y1 = g.extent
            if g.amplitude <= 0 or not 0 < g.bar_fraction < 1:
                raise ValueError(f"grid {g} needs positive amplitude and bar_fraction in (0, 1)")
            if x0 < 0 or y0 < 0 or x1 > self.width - 1 or y1 > self.height - 1:
                raise ValueError(f"grid {g} extends outside the {self.width}x{self.height} frame")

    def to_dict(self):
        d = asdict(self)
        d["disks"] = [asdict(x) for x in self.disks]
        d["grids"] = [asdict(x) for x in self.grids]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _smooth_box(x, a, b, sigma):
    s = SQRT2 * sigma
    return 0.5 * (erf((x - a) / s) - erf((x - b) / s))


def _bars(x, origin, pitch, n, half_width, sigma):
    # dark bars centred on the cell boundaries origin + k * pitch, k = 0..n
    k0 = np.clip(np.rint((x - origin) / pitch), 0, n)
    out = np.zeros_like(x)
    for dk in (-1, 0, 1):
        k = k0 + dk
        ok = (k >= 0) & (k <= n)
        centre = origin + k * pitch
        out += np.where(ok, _smooth_box(x, centre - half_width, centre + half_width, sigma), 0.0)
    return out


def _scene_values(spec, u, v):
    """Noise-free scene intensity at scene coordinates ``(u, v)``."""
    out = np.full(u.shape, float(spec.background))
    sigma = spec.psf_sigma
    margin = _REACH * sigma
    for d in spec.disks:
        near = (np.abs(u - d.cx) <= d.radius + margin) & (np.abs(v - d.cy) <= d.radius + margin)
        if not near.any():
            continue
        rho = np.hypot(u[near] - d.cx, v[near] - d.cy)
        out[near] += d.amplitude * 0.5 * erfc((rho - d.radius) / (SQRT2 * sigma))
    for g in spec.grids:
        x0, y0, x1, y1 = g.extent
        near = (u >= x0 - margin) & (u <= x1 + margin) & (v >= y0 - margin) & (v <= y1 + margin)
        if not near.any():
            continue
        uu, vv = u[near], v[near]
        hx = 0.5 * g.bar_fraction * g.pitch_x
        hy = 0.5 * g.bar_fraction * g.pitch_y
        envelope = _smooth_box(uu, x0, x1, sigma) * _smooth_box(vv, y0, y1, sigma)
        cells = (1.0 - _bars(uu, x0, g.pitch_x, g.nx, hx, sigma)) * (1.0 - _bars(vv, y0, g.pitch_y, g.ny, hy, sigma))
        out[near] += g.amplitude * envelope * np.clip(cells, 0.0, 1.0)
    return out


def _noise(spec, shape, key):
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), *map(int, key)]))
    return rng.normal(0.0, spec.noise_sigma, size=shape)


def render_region(spec, T=None, window=None, center=None):
    """Noise-free rendering of ``window`` (frame coordinates) under ``T``.

    Pixel ``p`` receives the scene value at ``T^-1(p)``; ``center`` is the
    rotation pivot in frame coordinates (default: the window centre).
    """
    T = T or AffineTransform.identity()
    if window is None:
        window = RegionSpec("frame", 0, 0, spec.width, spec.height)
    if center is None:
        center = (window.origin_x + (window.width - 1) / 2.0, window.origin_y + (window.height - 1) / 2.0)
    yy, xx = np.mgrid[0:window.height, 0:window.width].astype(np.float64)
    xx += window.origin_x
    yy += window.origin_y
    u, v = apply_point(invert(T), xx, yy, center)
    return _scene_values(spec, u, v)


def render_scene(spec, T=None, center=None, noise_key=(0,)):
    """Render the whole frame under ``T`` and add seeded Gaussian noise.

    Identical ``(spec, T, noise_key)`` give bit-identical images.
    """
    img = render_region(spec, T, None, center)
    if spec.noise_sigma > 0:
        img = img + _noise(spec, img.shape, noise_key)
    return img


@dataclass
class DriftSchedule:
    """Rigid drift per (image index, region name) in microns and degrees.

    The key ``(i, "*")`` sets the drift of frame pixels outside all regions.
    """

    entries: dict = field(default_factory=dict)
    pixel_pitch_um: float = 3.0
    days: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pixel_pitch_um > 0:
            raise ValueError("pixel_pitch_um must be positive")

    @property
    def n_images(self):
        return 1 + max((i for i, _ in self.entries), default=-1)

    def drift_um(self, index, region):
        return self.entries.get((index, region), self.entries.get((index, "*"), (0.0, 0.0, 0.0)))

    def transform_px(self, index, region):
        tx, ty, theta = self.drift_um(index, region)
        return AffineTransform.rigid(tx / self.pixel_pitch_um, ty / self.pixel_pitch_um, np.radians(theta))

    def day(self, index):
        return self.days.get(index, "day1")

    def to_dict(self):
        return {
            "pixel_pitch_um": self.pixel_pitch_um,
            "entries": [
                {"image": i, "region": r, "tx_um": v[0], "ty_um": v[1], "theta_deg": v[2]}
                for (i, r), v in sorted(self.entries.items())
            ],
            "days": {str(i): d for i, d in sorted(self.days.items())},
        }

    @classmethod
    def from_dict(cls, d):
        entries = {(e["image"], e["region"]): (e["tx_um"], e["ty_um"], e["theta_deg"]) for e in d["entries"]}
        days = {int(k): v for k, v in d.get("days", {}).items()}
        return cls(entries, d.get("pixel_pitch_um", 3.0), days)


@dataclass(frozen=True)
class ManifestRow:
    image_id: str
    region: str
    tx_px: float
    ty_px: float
    theta_deg: float
    seed: int


MANIFEST_FIELDS = ["image_id", "region", "tx_px", "ty_px", "theta_deg", "seed"]


def write_manifest(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.image_id, r.region, repr(r.tx_px), repr(r.ty_px), repr(r.theta_deg), r.seed])


def read_manifest(path):
    with open(path, newline="") as fh:
        return [
            ManifestRow(row["image_id"], row["region"], float(row["tx_px"]), float(row["ty_px"]),
                        float(row["theta_deg"]), int(row["seed"]))
            for row in csv.DictReader(fh)
        ]


def image_id(index):
    return f"img_{index:04d}"


def make_sequence(spec, schedule, regions, out_dir, maxval=65535):
    """Render every scheduled image to ``out_dir`` and write ``manifest.csv``.

    Image 0 is the reference and must carry no drift.  Each region window
    is rendered with its own drift about the window centre; the rest of
    the frame uses the ``"*"`` entry.  Returns the manifest rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_disjoint(regions, spec)
    for region in regions:
        if any(schedule.drift_um(0, region.name)) or any(schedule.drift_um(0, "*")):
            raise ValueError("image 0 is the reference and must have zero drift")
    rows = []
    for index in range(schedule.n_images):
        frame = render_region(spec, schedule.transform_px(index, "*"))
        for region in regions:
            T = schedule.transform_px(index, region.name)
            frame[region.slices] = render_region(spec, T, region)
            tx, ty, theta = schedule.drift_um(index, region.name)
            rows.append(ManifestRow(image_id(index), region.name, tx / schedule.pixel_pitch_um,
                                    ty / schedule.pixel_pitch_um, float(theta), int(spec.seed)))
        if spec.noise_sigma > 0:
            frame = frame + _noise(spec, frame.shape, (index,))
        save_pgm(frame, out_dir / f"{image_id(index)}.pgm", maxval)
    write_manifest(rows, out_dir / "manifest.csv")
    return rows


def _check_disjoint(regions, spec):
    for a in regions:
        if not a.fits((spec.height, spec.width)):
            raise ValueError(f"region {a.name!r} does not fit the {spec.width}x{spec.height} frame")
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            if (a.origin_x < b.origin_x + b.width and b.origin_x < a.origin_x + a.width
                    and a.origin_y < b.origin_y + b.height and b.origin_y < a.origin_y + a.height):
                raise ValueError(f"regions {a.name!r} and {b.name!r} overlap")


# ---------------------------------------------------------------------------
# Ready-made scenes


def random_scene(width, height, seed=0, n_disks=None, with_grid=True, psf_sigma=1.2,
                 noise_sigma=0.0, background=2000.0):
    """Cluttered test scene of disks of mixed size plus one grid patch."""
    rng = np.random.default_rng(seed)
    n_disks = n_disks or max(6, int(width * height / 8000))
    disks = []
    for _ in range(n_disks):
        r = float(rng.uniform(3.0, max(4.0, min(width, height) / 16)))
        disks.append(Disk(float(rng.uniform(r + 2, width - r - 3)), float(rng.uniform(r + 2, height - r - 3)),
                          r, float(rng.uniform(3000.0, 12000.0))))
    grids = ()
    if with_grid:
        pitch = float(rng.uniform(10.0, 18.0))
        pitch_y = pitch * 1.3
        nx = max(2, int(width * 0.35 / pitch))
        ny = max(2, int(height * 0.3 / pitch_y))
        ox = float(rng.uniform(2, width - nx * pitch - 3))
        oy = float(rng.uniform(2, height - ny * pitch_y - 3))
        grids = (Grid(ox, oy, pitch, pitch_y, nx, ny, 0.3, 6000.0),)
    return SceneSpec(width, height, background, tuple(disks), grids, psf_sigma, noise_sigma, seed)


def desk_regions(scale=1):
    """Six 256x256 regions of the 1024x1024 desk scene (scaled by ``scale``)."""
    s = scale
    layout = [
        ("crux_left", 0, 512),
        ("crux_right", 768, 512),
        ("quad1_inner", 256, 232),
        ("quad1_outer", 0, 0),
        ("quad2_inner", 512, 232),
        ("quad2_outer", 768, 0),
    ]
    return [RegionSpec(n, x * s, y * s, 256 * s, 256 * s) for n, x, y in layout]


def desk_scene(seed=0, scale=1, psf_sigma=1.2, noise_sigma=0.0, background=1000.0):
    """Scaled replica of a shutter-array image: cruciform disk targets and two grids.

    ``scale=1`` gives a 1024x1024 frame; ``scale=4`` the full 4096 layout.
    """
    rng = np.random.default_rng(seed)
    s = scale
    size = 1024 * s
    # shutter cells of 100 x 200 um at 3 um/px are about 33 x 67 px
    grids = (
        Grid(20 * s, 20 * s, 33.0 * s, 67.0 * s, 14, 6, 0.18, 20000.0),
        Grid(540 * s, 20 * s, 33.0 * s, 67.0 * s, 14, 6, 0.18, 20000.0),
    )
    disks = []
    # laser-etched targets along the horizontal arm of the cruciform
    for x0 in (0, 768):
        for _ in range(14):
            r = float(rng.uniform(4.0, 22.0)) * s
            disks.append(Disk(float(rng.uniform(x0 * s + r + 12, (x0 + 256) * s - r - 12)),
                              float(rng.uniform(540 * s + r, 760 * s - r)), r,
                              float(rng.uniform(8000.0, 25000.0))))
    for _ in range(10):
        r = float(rng.uniform(4.0, 14.0)) * s
        disks.append(Disk(float(rng.uniform(300 * s, 720 * s)), float(rng.uniform(520 * s, 1000 * s)), r,
                          float(rng.uniform(8000.0, 25000.0))))
    return SceneSpec(size, size, background, tuple(disks), grids, psf_sigma, noise_sigma, seed)


def campaign_schedule(region_names, n_days=6, images_per_day=10, pixel_pitch_um=3.0, seed=0,
                      common_um=4.5, jitter_um=0.3, theta_max_deg=0.05, region_offsets_um=None):
    """Daily drift campaign: a common per-day shift plus per-image jitter.

    ``region_offsets_um`` adds a fixed extra shift to named regions from the
    second day on (a relative quad-to-crux drift).  Image 0 is the
    undrifted reference.
    """
    rng = np.random.default_rng(seed)
    offsets = region_offsets_um or {}
    entries = {}
    days = {}
    index = 0
    for day in range(n_days):
        common = rng.uniform(-common_um, common_um, size=2)
        for _ in range(images_per_day):
            days[index] = f"day{day + 1}"
            if index > 0:
                jit = rng.normal(0.0, jitter_um, size=2)
                theta = float(rng.uniform(-theta_max_deg, theta_max_deg))
                for name in region_names:
                    extra = offsets.get(name, (0.0, 0.0)) if day > 0 else (0.0, 0.0)
                    entries[(index, name)] = (float(common[0] + jit[0] + extra[0]),
                                              float(common[1] + jit[1] + extra[1]), theta)
                entries[(index, "*")] = (float(common[0] + jit[0]), float(common[1] + jit[1]), theta)
            else:
                for name in region_names:
                    entries[(index, name)] = (0.0, 0.0, 0.0)
            index += 1
    return DriftSchedule(entries, pixel_pitch_um, days)
