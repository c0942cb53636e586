"""Batch registration campaigns and quad-versus-crux stability reports."""

import csv
import io
import json
import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .image import RegionSpec, extract_region, load_pgm
from .optimize import OptimizationError
from .svg import line_chart
from .tru import RegistrationResult, TruConfig, register_tru
from .xreg import BoxSpec, XregError, register_xreg, select_boxes

__all__ = [
    "SCHEMA_VERSION",
    "BatchConfig",
    "Measurement",
    "DailyMean",
    "RelativeDrift",
    "StabilityReport",
    "run_batch",
    "daily_average",
    "relative_quad_crux",
    "build_report",
    "emit_report",
    "read_measurements",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("tru", "xreg")
MEASUREMENT_FIELDS = ["image_id", "day", "region", "method", "tx_px", "ty_px", "theta_deg", "cost", "converged"]
DAILY_FIELDS = ["day", "region", "method", "mean_tx_px", "mean_ty_px", "n_used", "n_dropped"]
RELATIVE_FIELDS = ["day", "quad", "method", "rel_tx_um", "rel_ty_um", "rel_mag_um"]
_QUAD_RE = re.compile(r"^(?P<quad>.+)_(?P<part>inner|outer)$")


@dataclass
class BatchConfig:
    reference: Path
    inputs: list  # (image_id, path, day)
    regions: list  # RegionSpec
    boxes: dict = field(default_factory=dict)  # region name -> [BoxSpec]
    method: str = "tru"
    pixel_pitch_um: float = 3.0
    tru: TruConfig = field(default_factory=TruConfig)
    xreg: dict = field(default_factory=dict)
    workers: int = 1
    requirement_um: float = 0.4
    crux_regions: list = None
    quads: dict = None

    def __post_init__(self):
        if self.method not in ("tru", "xreg", "both"):
            raise ValueError(f"method must be tru, xreg or both, got {self.method!r}")
        if not self.pixel_pitch_um > 0:
            raise ValueError("pixel_pitch_um must be positive")
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise ValueError("region names must be unique")
        unknown = set(self.boxes) - set(names)
        if unknown:
            raise ValueError(f"boxes given for unknown regions {sorted(unknown)}")

    @property
    def methods(self):
        return METHODS if self.method == "both" else (self.method,)

    @classmethod
    def from_dict(cls, d, base_dir="."):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r}; expected {SCHEMA_VERSION}")
        base = Path(base_dir)
        groups = d.get("groups", {})
        return cls(
            reference=base / d["reference"],
            inputs=[(e["id"], base / e["path"], str(e.get("day", "day1"))) for e in d["inputs"]],
            regions=[RegionSpec.from_dict(r) for r in d["regions"]],
            boxes={k: [BoxSpec.from_dict(b) for b in v] for k, v in d.get("boxes", {}).items()},
            method=d.get("method", "tru"),
            pixel_pitch_um=float(d.get("pixel_pitch_um", 3.0)),
            tru=TruConfig.from_dict(d.get("tru")),
            xreg=dict(d.get("xreg", {})),
            workers=int(d.get("workers", 1)),
            requirement_um=float(d.get("requirement_um", 0.4)),
            crux_regions=groups.get("crux"),
            quads=groups.get("quads"),
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)


@dataclass(frozen=True)
class Measurement:
    image_id: str
    day: str
    region: str
    method: str
    tx_px: float
    ty_px: float
    theta_deg: float
    cost: float
    converged: bool


@dataclass(frozen=True)
class DailyMean:
    day: str
    region: str
    method: str
    mean_tx_px: float
    mean_ty_px: float
    n_used: int
    n_dropped: int


@dataclass(frozen=True)
class RelativeDrift:
    day: str
    quad: str
    method: str
    rel_tx_um: float
    rel_ty_um: float
    rel_mag_um: float


@dataclass
class StabilityReport:
    measurements: list
    daily_means: list
    relative_drift: list
    pixel_pitch_um: float = 3.0
    requirement_um: float = 0.4

    def summary(self):
        """Max and RMS relative drift, per-day maxima and the requirement gate."""
        mags = np.array([r.rel_mag_um for r in self.relative_drift])
        per_day = OrderedDict()
        for r in self.relative_drift:
            key = f"{r.method}:{r.day}"
            per_day[key] = max(per_day.get(key, 0.0), r.rel_mag_um)
        max_um = float(mags.max()) if mags.size else 0.0
        rms_um = float(np.sqrt(np.mean(mags ** 2))) if mags.size else 0.0
        return {
            "n_measurements": len(self.measurements),
            "n_failed": sum(not m.converged for m in self.measurements),
            "max_rel_um": max_um,
            "rms_rel_um": rms_um,
            "per_day_max_um": per_day,
            "requirement_um": self.requirement_um,
            "within_requirement": bool(max_um <= self.requirement_um),
        }


# ---------------------------------------------------------------------------
# Batch execution


def _register_image(image_id, path, day, cfg, ref_windows):
    rows = []
    with threadpool_limits(limits=1):
        try:
            img = load_pgm(path)
        except (OSError, ValueError) as exc:
            logger.warning("cannot read %s: %s", path, exc)
            return [Measurement(image_id, day, region.name, method, math.nan, math.nan, math.nan, math.nan, False)
                    for region in cfg.regions for method in cfg.methods]
        for region in cfg.regions:
            ref = ref_windows[region.name]
            try:
                window = extract_region(img, region)
            except ValueError as exc:
                logger.warning("%s: %s", image_id, exc)
                window = None
            for method in cfg.methods:
                if window is None:
                    rows.append(Measurement(image_id, day, region.name, method,
                                            math.nan, math.nan, math.nan, math.nan, False))
                elif method == "tru":
                    rows.append(_tru_row(image_id, day, region, ref, window, cfg))
                else:
                    rows.append(_xreg_row(image_id, day, region, ref, window, cfg))
    return rows


def _tru_row(image_id, day, region, ref, window, cfg):
    try:
        res = register_tru(ref, window, cfg.tru)
    except (ValueError, OptimizationError) as exc:
        logger.warning("TRU %s/%s failed: %s", image_id, region.name, exc)
        res = RegistrationResult.failure(str(exc))
    return Measurement(image_id, day, region.name, "tru", res.tx_px, res.ty_px, res.theta_deg,
                       res.final_cost, bool(res.converged))


def _xreg_row(image_id, day, region, ref, window, cfg):
    opts = cfg.xreg
    try:
        res = register_xreg(ref, window, cfg.boxes[region.name], r=opts.get("radius", 2),
                            normalized=opts.get("normalized", True), fit_size=opts.get("fit_size", 3),
                            auto_match=opts.get("auto_match", True), max_radius=opts.get("max_radius", 8),
                            symmetric=opts.get("symmetric", True))
    except (ValueError, XregError) as exc:
        logger.warning("XREG %s/%s failed: %s", image_id, region.name, exc)
        return Measurement(image_id, day, region.name, "xreg", math.nan, math.nan, math.nan, math.nan, False)
    return Measurement(image_id, day, region.name, "xreg", res.tx_px, res.ty_px, math.nan, math.nan, True)


def run_batch(cfg, workers=None):
    """Register every region of every input against the reference windows."""
    reference = load_pgm(cfg.reference)
    ref_windows = OrderedDict((r.name, extract_region(reference, r)) for r in cfg.regions)
    if "xreg" in cfg.methods:
        boxes = dict(cfg.boxes)
        for region in cfg.regions:
            if region.name not in boxes:
                boxes[region.name] = select_boxes(ref_windows[region.name], prefix=f"{region.name}_box")
        cfg = replace(cfg, boxes=boxes)
    workers = cfg.workers if workers is None else workers
    jobs = [(image_id, path, day) for image_id, path, day in cfg.inputs]
    if workers == 1:
        chunks = [_register_image(*job, cfg, ref_windows) for job in jobs]
    else:
        chunks = Parallel(n_jobs=workers)(delayed(_register_image)(*job, cfg, ref_windows) for job in jobs)
    measurements = [m for chunk in chunks for m in chunk]
    return build_report(measurements, cfg.pixel_pitch_um, cfg.requirement_um, cfg.crux_regions, cfg.quads)


# ---------------------------------------------------------------------------
# Aggregation


def daily_average(measurements):
    """Mean shift per (day, region, method) over converged measurements."""
    groups = OrderedDict()
    for m in measurements:
        groups.setdefault((m.day, m.region, m.method), []).append(m)
    out = []
    for (day, region, method), rows in groups.items():
        used = [m for m in rows if m.converged and math.isfinite(m.tx_px) and math.isfinite(m.ty_px)]
        if not used:
            raise ValueError(f"no converged measurements for day {day!r}, region {region!r}, method {method!r}")
        out.append(DailyMean(day, region, method,
                             math.fsum(m.tx_px for m in used) / len(used),
                             math.fsum(m.ty_px for m in used) / len(used),
                             len(used), len(rows) - len(used)))
    return out


def _default_groups(region_names):
    crux = [n for n in region_names if n.startswith("crux")]
    quads = OrderedDict()
    for n in region_names:
        match = _QUAD_RE.match(n)
        if match and not n.startswith("crux"):
            quads.setdefault(match["quad"], [None, None])
            quads[match["quad"]][0 if match["part"] == "inner" else 1] = n
    return crux, quads


def relative_quad_crux(daily_means, pixel_pitch_um=3.0, crux_regions=None, quads=None):
    """Per-day quad shift (mean of inner and outer) minus mean crux shift, in microns."""
    if not pixel_pitch_um > 0:
        raise ValueError("pixel_pitch_um must be positive")
    names = list(OrderedDict.fromkeys(d.region for d in daily_means))
    default_crux, default_quads = _default_groups(names)
    crux_regions = default_crux if crux_regions is None else list(crux_regions)
    quads = default_quads if quads is None else OrderedDict((k, list(v)) for k, v in quads.items())
    for quad, (inner, outer) in quads.items():
        if inner is None or outer is None:
            raise ValueError(f"quad {quad!r} lacks its {'inner' if inner is None else 'outer'} region")
    table = {(d.day, d.region, d.method): d for d in daily_means}
    keys = list(OrderedDict.fromkeys((d.day, d.method) for d in daily_means))
    out = []
    for day, method in keys:
        crux = [table[(day, c, method)] for c in crux_regions if (day, c, method) in table]
        if not quads:
            continue
        if not crux:
            raise ValueError(f"day {day!r} ({method}) has no crux measurements")
        cx = math.fsum(c.mean_tx_px for c in crux) / len(crux)
        cy = math.fsum(c.mean_ty_px for c in crux) / len(crux)
        for quad, (inner, outer) in quads.items():
            try:
                a, b = table[(day, inner, method)], table[(day, outer, method)]
            except KeyError:
                raise ValueError(f"day {day!r} ({method}) is missing {inner!r} or {outer!r}") from None
            qx = 0.5 * (a.mean_tx_px + b.mean_tx_px)
            qy = 0.5 * (a.mean_ty_px + b.mean_ty_px)
            rx = (qx - cx) * pixel_pitch_um
            ry = (qy - cy) * pixel_pitch_um
            out.append(RelativeDrift(day, quad, method, rx, ry, math.hypot(rx, ry)))
    return out


def build_report(measurements, pixel_pitch_um=3.0, requirement_um=0.4, crux_regions=None, quads=None):
    daily = daily_average(measurements)
    relative = relative_quad_crux(daily, pixel_pitch_um, crux_regions, quads)
    return StabilityReport(list(measurements), daily, relative, pixel_pitch_um, requirement_um)


# ---------------------------------------------------------------------------
# Output


def _num(v):
    return repr(float(v))


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _figure_crux(report):
    days = list(OrderedDict.fromkeys(d.day for d in report.daily_means))
    method = "tru" if any(d.method == "tru" for d in report.daily_means) else "xreg"
    table = {(d.day, d.region): d for d in report.daily_means if d.method == method}
    crux = [r for r in OrderedDict.fromkeys(d.region for d in report.daily_means) if r.startswith("crux")]
    regions = crux or list(OrderedDict.fromkeys(d.region for d in report.daily_means))
    series = []
    for region in regions:
        for axis in ("tx", "ty"):
            vals = [getattr(table[(day, region)], f"mean_{axis}_px") * report.pixel_pitch_um
                    if (day, region) in table else None for day in days]
            series.append({"label": f"{region} {axis}", "values": vals})
    return line_chart(series, days, title=f"Average daily crux movement ({method.upper()})",
                      y_label="shift (um)")


def _figure_methods(report):
    days = list(OrderedDict.fromkeys(d.day for d in report.daily_means))
    table = {(d.day, d.region, d.method): d for d in report.daily_means}
    regions = [r for r in OrderedDict.fromkeys(d.region for d in report.daily_means)
               if any(k[1] == r and k[2] == "xreg" for k in table)]
    series = []
    for region in regions:
        for axis in ("tx", "ty"):
            for method in METHODS:
                vals = [getattr(table[(day, region, method)], f"mean_{axis}_px") * report.pixel_pitch_um
                        if (day, region, method) in table else None for day in days]
                series.append({"label": f"{region} {axis} {method.upper()}", "values": vals,
                               "style": "solid" if method == "tru" else "dashed"})
    return line_chart(series, days, title="TRU vs XREG daily mean shifts", y_label="shift (um)",
                      height=max(440, 90 + 18 * len(series)))


def render_report(report):
    """All output files as ``{filename: text}``, computed before anything is written."""
    if not report.measurements or not report.daily_means:
        raise ValueError("cannot emit an empty report")
    days = set(m.day for m in report.measurements)
    covered = set(d.day for d in report.daily_means)
    if days != covered:
        raise ValueError(f"days without usable measurements: {sorted(days - covered)}")
    files = OrderedDict()
    files["measurements.csv"] = _csv_text(MEASUREMENT_FIELDS, [
        [m.image_id, m.day, m.region, m.method, _num(m.tx_px), _num(m.ty_px), _num(m.theta_deg),
         _num(m.cost), int(m.converged)] for m in report.measurements])
    files["daily_means.csv"] = _csv_text(DAILY_FIELDS, [
        [d.day, d.region, d.method, _num(d.mean_tx_px), _num(d.mean_ty_px), d.n_used, d.n_dropped]
        for d in report.daily_means])
    files["relative_drift.csv"] = _csv_text(RELATIVE_FIELDS, [
        [r.day, r.quad, r.method, _num(r.rel_tx_um), _num(r.rel_ty_um), _num(r.rel_mag_um)]
        for r in report.relative_drift])
    files["summary.json"] = json.dumps(report.summary(), indent=2) + "\n"
    files["crux_daily.svg"] = _figure_crux(report)
    methods = set(d.method for d in report.daily_means)
    if methods == set(METHODS):
        files["tru_vs_xreg.svg"] = _figure_methods(report)
    return files


def emit_report(report, out_dir):
    """Write the CSV tables, summary and SVG figures; returns the paths."""
    files = render_report(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in files.items():
        path = out_dir / name
        path.write_text(text)
        paths.append(path)
    return paths


def read_measurements(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MEASUREMENT_FIELDS:
            raise ValueError(f"{path}: expected columns {MEASUREMENT_FIELDS}, got {reader.fieldnames}")
        return [
            Measurement(row["image_id"], row["day"], row["region"], row["method"], float(row["tx_px"]),
                        float(row["ty_px"]), float(row["theta_deg"]), float(row["cost"]),
                        row["converged"] == "1")
            for row in reader
        ]
