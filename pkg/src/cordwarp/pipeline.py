"""End-to-end workflow orchestration.

Stages: write a synthetic fixture set, estimate displacement fields from
the reversed-polarity b=0 pair and correct the series, evaluate geometry
and similarity metrics per vertebral level, render blinded rating
montages, and summarize collected rankings. Every stage is a plain
function over a PipelineConfig so the CLI is a thin wrapper.
"""

from __future__ import annotations

import csv
import json
import shutil
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .centerline import fit_centerline, level_report, slice_barycenters
from .correct import (
    VariationalOptions,
    apply_to_series,
    estimate_field_line_align,
    estimate_field_variational,
)
from .errors import InvalidSpec, MissingMethodOutput, NoRecords
from .niftiio import load_labels, load_mask, load_volume, save_volume
from .simulate import DisplacementField, PhantomSpec, make_phantom, warp_ped
from .stats import (
    PairedSamples,
    RankingRecord,
    cross_correlation,
    mutual_information,
    paired_tukey,
    pairwise_rank_logistic,
)
from .tensor import eigen_decompose, fit_dti
from .volume import AcquisitionScheme, Volume

__all__ = [
    "PipelineConfig",
    "read_bvals",
    "read_bvecs",
    "write_scheme",
    "write_phantom_fixture",
    "run_correction",
    "run_evaluation",
    "render_montages",
    "rank_stats_csv",
    "INTERNAL_METHODS",
    "DEFAULT_RATERS",
]

INTERNAL_METHODS = ("variational", "line-align")
DEFAULT_RATERS = ("rater1", "rater2", "rater3")
FIELD_INTENT = "ped-displacement"


# --- FSL-style text gradient tables ---

def read_bvals(path: str) -> np.ndarray:
    """One whitespace-separated row of b-values."""
    return np.loadtxt(path, ndmin=1, dtype=np.float64)


def read_bvecs(path: str) -> np.ndarray:
    """Three rows (x, y, z); returned as (nvol, 3)."""
    v = np.loadtxt(path, ndmin=2, dtype=np.float64)
    if v.shape[0] != 3:
        raise InvalidSpec(f"{path}: expected 3 rows, got {v.shape[0]}")
    return v.T


def write_scheme(scheme_bvals: np.ndarray, scheme_bvecs: np.ndarray,
                 bval_path: str, bvec_path: str) -> None:
    with open(bval_path, "w") as fh:
        fh.write(" ".join(repr(float(b)) for b in scheme_bvals) + "\n")
    with open(bvec_path, "w") as fh:
        for axis in range(3):
            fh.write(" ".join(repr(float(v)) for v in scheme_bvecs[:, axis]) + "\n")


def load_scheme(bval_path: str, bvec_path: str) -> AcquisitionScheme:
    return AcquisitionScheme(bvalues=read_bvals(bval_path),
                             directions=read_bvecs(bvec_path))


# --- configuration ---

@dataclass
class PipelineConfig:
    """Paths and options driving the correction/evaluation workflow."""

    dwi: str
    bval: str
    bvec: str
    b0_forward: str
    b0_backward: str
    mask: str
    levels: str
    out_dir: str
    reference: str | None = None
    external: dict = dc_field(default_factory=dict)  # method name -> corrected series
    methods: tuple[str, ...] = INTERNAL_METHODS
    seed: int = 0
    raters: tuple[str, ...] = DEFAULT_RATERS
    alpha: float = 50.0
    pyramid_levels: int = 3
    sigma_smooth_mm: float = 2.0
    bins: int = 32
    spline_smoothing: float = 1.0
    grid_step: float | None = None

    @classmethod
    def from_json(cls, path: str) -> "PipelineConfig":
        with open(path) as fh:
            raw = json.load(fh)
        base = Path(path).parent

        def resolve(p):
            return str((base / p)) if p and not Path(p).is_absolute() else p

        kwargs = dict(raw)
        for key in ("dwi", "bval", "bvec", "b0_forward", "b0_backward",
                    "mask", "levels", "out_dir", "reference"):
            if kwargs.get(key):
                kwargs[key] = resolve(kwargs[key])
        kwargs["external"] = {k: resolve(v)
                              for k, v in (raw.get("external") or {}).items()}
        if "methods" in kwargs:
            kwargs["methods"] = tuple(kwargs["methods"])
        if "raters" in kwargs:
            kwargs["raters"] = tuple(kwargs["raters"])
        return cls(**kwargs)

    def validate(self) -> None:
        names = list(self.methods) + list(self.external)
        if len(set(names)) != len(names):
            raise InvalidSpec("method names must be unique")
        for m in self.methods:
            if m not in INTERNAL_METHODS:
                raise InvalidSpec(f"unknown method {m!r}; available: {INTERNAL_METHODS}")
        required = [self.dwi, self.bval, self.bvec, self.b0_forward,
                    self.b0_backward, self.mask, self.levels]
        required += list(self.external.values())
        if self.reference:
            required.append(self.reference)
        for p in required:
            if not Path(p).is_file():
                raise InvalidSpec(f"input file missing: {p}")

    @property
    def all_methods(self) -> tuple[str, ...]:
        return tuple(self.methods) + tuple(sorted(self.external))

    def variational_options(self) -> VariationalOptions:
        return VariationalOptions(alpha=self.alpha, levels=self.pyramid_levels)


# --- fixture generation ---

def write_phantom_fixture(spec: PhantomSpec, out_dir: str) -> dict:
    """Write the synthetic acquisition: distorted series, reversed-polarity
    b=0 pair, ground-truth field/mask/levels/centerline, and a ready-to-run
    config.json. Deterministic per spec seed (bit-identical files)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = make_phantom(spec)

    fwd_series = warp_ped(truth.clean_dwi, truth.field, sign=-1, modulate=True)
    fwd_series = fwd_series.with_data_sign(+1)
    b0 = truth.clean_dwi.volume_at(0)
    b0_fwd = fwd_series.volume_at(0)
    b0_bwd = warp_ped(b0, truth.field, sign=+1, modulate=True).with_data_sign(-1)

    paths = {
        "dwi": out / "dwi.nii.gz",
        "bval": out / "dwi.bval",
        "bvec": out / "dwi.bvec",
        "field_true": out / "field_true.nii.gz",
        "mask": out / "mask.nii.gz",
        "levels": out / "levels.nii.gz",
        "centerline_true": out / "centerline_true.csv",
        "b0_forward": out / "b0_forward.nii.gz",
        "b0_backward": out / "b0_backward.nii.gz",
        "clean_b0": out / "clean_b0.nii.gz",
    }
    save_volume(fwd_series, str(paths["dwi"]))
    write_scheme(truth.bvalues, truth.directions,
                 str(paths["bval"]), str(paths["bvec"]))
    field_vol = Volume(data=truth.field.data, spacing=truth.field.spacing,
                       affine=truth.field.affine)
    save_volume(field_vol, str(paths["field_true"]), intent_name=FIELD_INTENT)
    save_volume(Volume(data=truth.mask.data.astype(np.float64),
                       spacing=truth.mask.spacing, affine=truth.mask.affine),
                str(paths["mask"]))
    save_volume(Volume(data=truth.levels.data.astype(np.float64),
                       spacing=truth.levels.spacing, affine=truth.levels.affine),
                str(paths["levels"]))
    save_volume(b0_fwd, str(paths["b0_forward"]))
    save_volume(b0_bwd, str(paths["b0_backward"]))
    save_volume(truth.clean, str(paths["clean_b0"]))
    with open(paths["centerline_true"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["z_index", "x_mm", "y_mm", "z_mm"])
        for row in truth.true_centerline:
            writer.writerow([repr(float(v)) for v in row])

    config = {
        "dwi": "dwi.nii.gz", "bval": "dwi.bval", "bvec": "dwi.bvec",
        "b0_forward": "b0_forward.nii.gz", "b0_backward": "b0_backward.nii.gz",
        "mask": "mask.nii.gz", "levels": "levels.nii.gz",
        "reference": "clean_b0.nii.gz", "out_dir": "out",
        "methods": list(INTERNAL_METHODS), "seed": spec.seed,
    }
    config_path = out / "config.json"
    with open(config_path, "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["config"] = config_path
    return {k: str(v) for k, v in paths.items()}


# --- correction stage ---

def _write_trace(trace, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "level", "value", "step"])
        for it, level, value, step in trace:
            writer.writerow([it, level, repr(float(value)), repr(float(step))])


def run_correction(cfg: PipelineConfig) -> dict:
    """Estimate a field per method from the b=0 pair and unwarp the series."""
    cfg.validate()
    i_f = load_volume(cfg.b0_forward, ped_sign=+1)
    i_b = load_volume(cfg.b0_backward, ped_sign=-1)
    dwi = load_volume(cfg.dwi, ped_sign=+1)
    outputs = {}
    for method in cfg.methods:
        mdir = Path(cfg.out_dir) / method
        mdir.mkdir(parents=True, exist_ok=True)
        if method == "variational":
            result = estimate_field_variational(i_f, i_b, cfg.variational_options())
        else:
            result = estimate_field_line_align(i_f, i_b,
                                               sigma_smooth_mm=cfg.sigma_smooth_mm)
        field_vol = Volume(data=result.field.data, spacing=result.field.spacing,
                           affine=result.field.affine)
        save_volume(field_vol, str(mdir / "field.nii.gz"), intent_name=FIELD_INTENT)
        save_volume(result.corrected, str(mdir / "corrected_b0.nii.gz"))
        corrected = apply_to_series(dwi, result.field)
        save_volume(corrected, str(mdir / "dwi_corrected.nii.gz"))
        _write_trace(result.trace, mdir / "trace.csv")
        outputs[method] = {"field": str(mdir / "field.nii.gz"),
                           "series": str(mdir / "dwi_corrected.nii.gz"),
                           "converged": result.converged}
    for method, src in sorted(cfg.external.items()):
        mdir = Path(cfg.out_dir) / method
        mdir.mkdir(parents=True, exist_ok=True)
        dst = mdir / "dwi_corrected.nii.gz"
        shutil.copyfile(src, dst)
        outputs[method] = {"series": str(dst), "converged": True}
    return outputs


# --- evaluation stage ---

def _series_path(cfg: PipelineConfig, condition: str) -> str:
    if condition == "uncorrected":
        return cfg.dwi
    return str(Path(cfg.out_dir) / condition / "dwi_corrected.nii.gz")


def _mean_b0(series: Volume, scheme: AcquisitionScheme) -> Volume:
    sel = series.data[..., scheme.is_b0]
    return series.with_data(sel.mean(axis=-1))


def run_evaluation(cfg: PipelineConfig) -> dict:
    """Per-condition tensor fit, alignment report, similarity metrics, and
    across-condition Tukey comparisons; everything lands under out_dir."""
    cfg.validate()
    scheme = load_scheme(cfg.bval, cfg.bvec)
    mask = load_mask(cfg.mask)
    labels = load_labels(cfg.levels)
    reference = load_volume(cfg.reference) if cfg.reference else None
    centerline = fit_centerline(slice_barycenters(mask), lam=cfg.spline_smoothing)

    conditions = ("uncorrected",) + cfg.all_methods
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    alignment: dict[str, list] = {}
    similarity: dict[str, dict] = {}
    for condition in conditions:
        series = load_volume(_series_path(cfg, condition), ped_sign=+1)
        tensors = fit_dti(series, scheme, mask)
        eigen = eigen_decompose(tensors)
        cdir = out / condition
        cdir.mkdir(parents=True, exist_ok=True)
        save_volume(series.with_data(eigen.md), str(cdir / "md.nii.gz"))
        report = level_report(eigen, mask, labels, centerline)
        rows = []
        with open(cdir / "alignment.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["level", "label", "mad_deg", "acd", "voxels", "volume_mm3"])
            for r in report.rows:
                writer.writerow([r.name, r.label,
                                 "" if r.mad_deg is None else repr(r.mad_deg),
                                 "" if r.acd is None else repr(r.acd),
                                 r.voxels, repr(r.volume_mm3)])
                rows.append({"level": r.name, "label": r.label,
                             "mad_deg": r.mad_deg, "acd": r.acd,
                             "voxels": r.voxels, "volume_mm3": r.volume_mm3})
        alignment[condition] = rows
        if reference is not None:
            b0 = _mean_b0(series, scheme)
            similarity[condition] = {
                "cc": cross_correlation(b0, reference, mask),
                "mi": mutual_information(b0, reference, mask, bins=cfg.bins),
            }

    if similarity:
        with open(out / "similarity.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["condition", "cc", "mi"])
            for condition in conditions:
                s = similarity[condition]
                writer.writerow([condition, repr(s["cc"]), repr(s["mi"])])

    tukey_rows = _tukey_by_level(alignment, conditions)
    with open(out / "tukey.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "condition", "baseline", "mean_diff", "q",
                         "p_adjusted", "t_paired", "p_paired_t"])
        for row in tukey_rows:
            writer.writerow(row)

    summary = {
        "conditions": list(conditions),
        "alignment": alignment,
        "similarity": similarity,
        "files": {
            "tukey": "tukey.csv",
            "similarity": "similarity.csv" if similarity else None,
            "alignment": {c: f"{c}/alignment.csv" for c in conditions},
            "md": {c: f"{c}/md.nii.gz" for c in conditions},
        },
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _tukey_by_level(alignment: dict, conditions: tuple[str, ...]) -> list:
    """Tukey comparisons vs 'uncorrected' treating levels as paired units."""
    rows = []
    for metric in ("mad_deg", "acd"):
        table = []
        for condition in conditions:
            col = [r[metric] for r in alignment[condition]]
            if any(v is None for v in col):
                return rows
            table.append(col)
        values = np.array(table).T  # levels x conditions
        if values.shape[0] < 2:
            return rows
        try:
            samples = PairedSamples(values=values, conditions=conditions)
            for cmp in paired_tukey(samples, "uncorrected"):
                rows.append([metric, cmp.condition, cmp.baseline,
                             repr(cmp.mean_diff), repr(cmp.q),
                             repr(cmp.p_adjusted), repr(cmp.t_paired),
                             repr(cmp.p_paired_t)])
        except InvalidSpec:
            return rows
    return rows


# --- montage rendering ---

def _panel_image(md: np.ndarray, window_mask: np.ndarray, caption: str,
                 scale: int = 4) -> Image.Image:
    """Mid-sagittal MD slice rendered to 8-bit grayscale with the caption
    burned in; intensity window from the masked voxels of this panel."""
    x_mid = md.shape[0] // 2
    sl = md[x_mid]              # (ny, nz)
    wm = window_mask[x_mid]
    vals = sl[wm] if wm.any() else sl.ravel()
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        hi = lo + 1.0
    img = np.clip((sl - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    img = img.T[::-1]           # z up, y across
    pil = Image.fromarray(img, mode="L").resize(
        (img.shape[1] * scale, img.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(pil)
    draw.text((3, 3), caption, fill=255)
    return pil


def _tile(panels: list[Image.Image]) -> Image.Image:
    """Horizontal strip with 1-px separators: width = n*pw + (n-1)."""
    pw, ph = panels[0].size
    strip = Image.new("L", (pw * len(panels) + len(panels) - 1, ph), color=255)
    for i, p in enumerate(panels):
        strip.paste(p, (i * (pw + 1), 0))
    return strip


def render_montages(cfg: PipelineConfig, case_id: str = "phantom") -> dict:
    """Render blinded per-method panels plus the uncorrected reference.

    Method panels are shuffled per (seed, case) and labeled Method A, B, ...;
    the label->method map goes to a server-side JSON only.
    """
    methods = cfg.all_methods
    out = Path(cfg.out_dir)
    md_maps = {}
    for condition in ("uncorrected",) + methods:
        path = out / condition / "md.nii.gz"
        if not path.is_file():
            raise MissingMethodOutput(f"missing MD map for {condition!r}: run evaluation first")
        md_maps[condition] = load_volume(str(path)).data

    mask = load_mask(cfg.mask)
    window_mask = ndimage.binary_dilation(mask.data, iterations=2)

    rng = np.random.default_rng([cfg.seed, zlib.crc32(case_id.encode())])
    order = list(methods)
    rng.shuffle(order)
    labels = [f"Method {chr(ord('A') + i)}" for i in range(len(order))]

    case_dir = out / "rating" / "cases" / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    panels = []
    panel_files = []
    for label, method in zip(labels, order):
        panel = _panel_image(md_maps[method], window_mask, label)
        fname = f"panel_{label.split()[-1]}.png"
        panel.save(case_dir / fname)
        panels.append(panel)
        panel_files.append({"label": label, "image": fname})
    reference = _panel_image(md_maps["uncorrected"], window_mask, "Uncorrected")
    reference.save(case_dir / "reference.png")
    _tile(panels + [reference]).save(case_dir / "montage.png")

    rating_dir = out / "rating"
    hidden_path = rating_dir / "hidden_map.json"
    hidden = {}
    if hidden_path.is_file():
        hidden = json.loads(hidden_path.read_text())
    hidden[case_id] = {label: method for label, method in zip(labels, order)}
    hidden_path.write_text(json.dumps(hidden, indent=2, sort_keys=True) + "\n")

    session_path = rating_dir / "session.json"
    session = {"cases": {}, "raters": list(cfg.raters)}
    if session_path.is_file():
        session = json.loads(session_path.read_text())
    session["raters"] = list(cfg.raters)
    session.setdefault("cases", {})[case_id] = {"panels": panel_files,
                                                "reference": "reference.png"}
    session_path.write_text(json.dumps(session, indent=2, sort_keys=True) + "\n")
    return {"case": case_id, "dir": str(case_dir), "labels": labels}


# --- ranking statistics ---

def load_ranking_records(rankings_csv: str) -> list[RankingRecord]:
    """Read rater,subject,method,rank rows into per-(rater,subject) records."""
    grouped: dict[tuple[str, str], list[tuple[int, str]]] = {}
    with open(rankings_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["rater"], row["subject"])
            grouped.setdefault(key, []).append((int(row["rank"]), row["method"]))
    if not grouped:
        raise NoRecords(f"no ranking rows in {rankings_csv}")
    records = []
    for (rater, subject), pairs in sorted(grouped.items()):
        ranking = tuple(m for _, m in sorted(pairs))
        records.append(RankingRecord(rater=rater, subject=subject, ranking=ranking))
    return records


def rank_stats_csv(rankings_csv: str, out_csv: str) -> list:
    """Pairwise win counts and logistic p-values from a rankings CSV."""
    summaries = pairwise_rank_logistic(load_ranking_records(rankings_csv))
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method1", "method2", "wins1", "wins2",
                         "log_odds", "p_value", "fallback_flag"])
        for s in summaries:
            writer.writerow([s.method1, s.method2, s.wins1, s.wins2,
                             repr(s.log_odds), repr(s.p_value), int(s.fallback)])
    return summaries
