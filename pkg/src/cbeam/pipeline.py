"""End-to-end experiment: simulate, beamform both ways, recover, render, report."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig, scatterer_table
from .estimators import CompressedBeamformer, ReferenceBeamformer, SparseLineRecovery
from .geometry import AcquisitionWindow, ScanGeometry
from .imaging import PolarImage, RenderParams, log_compress, scan_convert, write_image
from .phantom import Phantom, generate_raw_data, noise_sigma_for_snr
from .pulse import PulseSpec
from .recovery import SparseVector
from .reference import downsample_line, envelope

log = logging.getLogger(__name__)

# per-line sample counts of the reference cardiac acquisition (acquired raw
# samples include acquisition overhead beyond floor(T*fs))
ACQUIRED_RAW_SAMPLES = 10389
REFERENCE_LINE_SAMPLES = 1662


@dataclass(frozen=True)
class Setup:
    geometry: ScanGeometry
    window: AcquisitionWindow
    pulse: PulseSpec
    beams: np.ndarray
    phantom: Phantom
    targets: np.ndarray
    profile_sigma: float


def build_setup(cfg):
    g = cfg.geometry
    geom = ScanGeometry.uniform(g.elements, g.pitch, g.sound_speed)
    window = AcquisitionWindow(cfg.acquisition.duration, cfg.acquisition.sample_rate)
    p = cfg.pulse
    pulse = PulseSpec.from_bandwidth(p.center_frequency, p.bandwidth, p.amplitude)
    beams = cfg.beam_angles()
    if cfg.scan.profile_sigma_deg is not None:
        profile = math.radians(cfg.scan.profile_sigma_deg)
    else:
        spacing = np.diff(beams).min() if beams.size > 1 else math.radians(cfg.scan.sector_deg)
        profile = spacing / 2
    targets = scatterer_table(cfg)
    ph = cfg.phantom
    if ph.noise_sigma is not None:
        noise = ph.noise_sigma
    else:
        peak = np.abs(targets[:, 2]).max() if targets.size else 1.0
        noise = noise_sigma_for_snr(ph.snr_db, peak * abs(p.amplitude))
    phantom = Phantom(targets, ph.speckle_density, ph.speckle_sigma, noise, ph.spreading)
    return Setup(geom, window, pulse, beams, phantom, targets, profile)


@dataclass
class RateReport:
    """Samples needed per image line by each path."""

    raw_real_samples: int
    reference_real_samples: int
    exact_complex_samples: int
    approx_mean_complex_samples: float | None = None
    approx_max_complex_samples: int | None = None

    @property
    def exact_reduction(self):
        return self.reference_real_samples / (2 * self.exact_complex_samples)

    @property
    def approx_reduction(self):
        if self.approx_mean_complex_samples is None:
            return None
        return self.reference_real_samples / (2 * self.approx_mean_complex_samples)

    def items(self):
        out = {
            "rate.raw_real_samples": self.raw_real_samples,
            "rate.reference_real_samples": self.reference_real_samples,
            "rate.acquired_raw_real_samples": ACQUIRED_RAW_SAMPLES,
            "rate.exact.complex_samples": self.exact_complex_samples,
            "rate.exact.reduction": self.exact_reduction,
        }
        if self.approx_mean_complex_samples is not None:
            out["rate.approx.mean_complex_samples"] = self.approx_mean_complex_samples
            out["rate.approx.max_complex_samples"] = self.approx_max_complex_samples
            out["rate.approx.reduction"] = self.approx_reduction
        return out


def nominal_rate_accounting(duration=210e-6, sample_rate=16e6, passband=4e6):
    """Real samples per line at ``sample_rate`` and after band-limited down-sampling."""
    raw = duration * sample_rate
    return {"raw_real_samples": int(round(raw)), "downsampled_real_samples": int(round(2 * passband * duration))}


def compare_images(a, b, mask=None, targets=None, search=(3, 20)):
    """Differences between image ``b`` and reference image ``a``.

    Both images are first scaled to unit peak (an all-zero image stays
    zero).  Returns ``nrmse`` (``||a - b|| / ||a||`` over ``mask``),
    ``psnr_db`` (unit peak over the RMS difference) and, if ``targets`` gives
    ``(beam, cell)`` pairs for a polar image, the per-target localization
    error ``(d_cell, d_beam)`` of the brightest pixel of ``b`` near each
    target.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ValueError(f"mask shape {m.shape} differs from image shape {a.shape}")
    an, bn = _unit_peak(a[m]), _unit_peak(b[m])
    diff = an - bn
    ref_norm = np.linalg.norm(an)
    if ref_norm > 0:
        nrmse = np.linalg.norm(diff) / ref_norm
    else:
        nrmse = 0.0 if not np.any(diff) else np.inf
    rmse = np.sqrt(np.mean(diff**2)) if diff.size else 0.0
    psnr = np.inf if rmse == 0 else -20 * np.log10(rmse)
    out = {"nrmse": float(nrmse), "psnr_db": float(psnr)}
    if targets is not None:
        out["localization"] = [locate_target(b, bt, qt, *search) for bt, qt in targets]
    return out


def _unit_peak(v):
    peak = np.abs(v).max() if v.size else 0.0
    return v / peak if peak > 0 else v


def locate_target(polar, beam, cell, beam_radius=3, cell_radius=20):
    """Offset ``(d_cell, d_beam)`` of the brightest pixel near ``(beam, cell)``."""
    B, N = polar.shape
    b0, b1 = max(beam - beam_radius, 0), min(beam + beam_radius + 1, B)
    q0, q1 = max(cell - cell_radius, 0), min(cell + cell_radius + 1, N)
    patch = polar[b0:b1, q0:q1]
    ib, iq = np.unravel_index(np.argmax(patch), patch.shape)
    return (int(q0 + iq - cell), int(b0 + ib - beam))


def target_positions(setup, grid_step):
    """Nearest ``(beam, cell)`` of every point target."""
    out = []
    for r, ang, _ in setup.targets:
        beam = int(np.argmin(np.abs(setup.beams - ang)))
        cell = int(round(2 * r / setup.geometry.sound_speed / grid_step))
        out.append((beam, cell))
    return out


@dataclass
class PathResult:
    mode: str
    lines: np.ndarray
    coefficients: np.ndarray | None = None
    vectors: list = field(default_factory=list)
    channel_set_sizes: np.ndarray | None = None
    polar: PolarImage | None = None
    rendered_polar: PolarImage | None = None
    image: object = None


@dataclass
class PipelineResult:
    config: PipelineConfig
    setup: Setup
    raw: object
    paths: dict
    rate: RateReport
    metrics: dict
    files: dict = field(default_factory=dict)

    def report_items(self):
        items = dict(self.rate.items())
        nominal = nominal_rate_accounting()
        items["rate.nominal.raw_real_samples"] = nominal["raw_real_samples"]
        items["rate.nominal.downsampled_real_samples"] = nominal["downsampled_real_samples"]
        for key, value in sorted(self.metrics.items()):
            items[key] = value
        return items


def simulate(cfg, setup=None):
    setup = setup or build_setup(cfg)
    return generate_raw_data(
        setup.phantom,
        setup.geometry,
        setup.beams,
        setup.window,
        setup.pulse,
        seed=cfg.run.seed,
        profile_sigma=setup.profile_sigma,
        threads=cfg.run.threads,
    )


def reference_path(cfg, setup, raw):
    est = ReferenceBeamformer(setup.geometry, setup.beams, setup.window, setup.pulse, cfg.grid.size, cfg.run.threads)
    rf = est.fit().beamformed_lines(raw)
    ts = np.arange(cfg.grid.size) * setup.window.duration / cfg.grid.size
    lines = np.stack([np.interp(ts, setup.window.times, envelope(line)) for line in rf])
    down = np.stack(
        [downsample_line(line, setup.window, setup.pulse.center_frequency, REFERENCE_LINE_SAMPLES) for line in rf]
    )
    return PathResult("reference", lines), rf, down


def compressed_beamformer(cfg, setup, mode, precompute=False):
    t = cfg.truncation
    return CompressedBeamformer(
        setup.geometry,
        setup.beams,
        setup.window,
        setup.pulse,
        n_fourier=cfg.sparsity.n_fourier,
        mode=mode,
        rho=t.rho,
        n_max=t.n_max,
        oversample=t.oversample,
        precompute=precompute,
        n_jobs=cfg.run.threads,
    )


def sparse_recovery(cfg, setup, noise_level=None):
    rc = cfg.recovery
    return SparseLineRecovery(
        setup.pulse,
        setup.window.duration,
        n_fourier=cfg.sparsity.n_fourier,
        n_grid=cfg.grid.size,
        n_nonzero=cfg.sparsity.L,
        residual_tol=rc.residual_tol,
        real_amplitudes=rc.real_amplitudes,
        smooth=rc.smooth,
        noise_level=noise_level,
        refine_radius=rc.refine_radius,
        n_jobs=cfg.run.threads,
    )


def stopping_level(cfg, setup, noise_gain):
    """Absolute OMP residual bound: ``discrepancy`` times the expected noise norm."""
    if cfg.recovery.discrepancy is None:
        return None
    return cfg.recovery.discrepancy * setup.phantom.noise_sigma * np.asarray(noise_gain)


@dataclass
class CoefficientSet:
    """Beamformed Fourier coefficients of one compressed path."""

    mode: str
    kappa: np.ndarray
    coefficients: np.ndarray
    noise_gain: np.ndarray
    channel_set_sizes: np.ndarray | None = None

    def save(self, path):
        extra = {} if self.channel_set_sizes is None else {"channel_set_sizes": self.channel_set_sizes}
        np.savez(
            path,
            mode=np.array(self.mode),
            kappa=self.kappa,
            coefficients=self.coefficients,
            noise_gain=self.noise_gain,
            **extra,
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            sizes = z["channel_set_sizes"] if "channel_set_sizes" in z else None
            return cls(str(z["mode"]), z["kappa"], z["coefficients"], z["noise_gain"], sizes)


def compressed_coefficients(cfg, setup, raw, mode, operators=None):
    """Run a compressed beamformer; ``operators`` reuses cached approx operators."""
    cb = compressed_beamformer(cfg, setup, mode).fit()
    if operators is not None:
        cb.operators_ = operators
    C = cb.transform(raw)
    sizes = cb.channel_set_sizes_ if mode == "approx" else None
    return CoefficientSet(mode, cb.kappa_.indices, C, cb.noise_gain_, sizes)


def recover_path(cfg, setup, coeffs):
    rec = sparse_recovery(cfg, setup, stopping_level(cfg, setup, coeffs.noise_gain)).fit()
    vectors = rec.recover(coeffs.coefficients)
    lines = rec.transform(coeffs.coefficients)
    return PathResult(coeffs.mode, lines, coeffs.coefficients, vectors, coeffs.channel_set_sizes)


def compressed_path(cfg, setup, raw, mode):
    return recover_path(cfg, setup, compressed_coefficients(cfg, setup, raw, mode))


def render(cfg, setup, path):
    params = RenderParams(cfg.render.dynamic_range_db, cfg.render.width, cfg.render.height)
    step = cfg.grid_step() * setup.geometry.sound_speed / 2
    path.polar = PolarImage(path.lines, setup.beams, step)
    if path.polar.lines.max() > 0:
        path.rendered_polar = log_compress(path.polar, params.dynamic_range_db)
    else:
        path.rendered_polar = path.polar
    path.image = scan_convert(path.rendered_polar, params)
    return path


def run_pipeline(cfg, modes=None, out_dir=None, write=True):
    """Run the reference path plus the compressed path(s) and collect metrics.

    ``modes`` defaults to ``[cfg.run.mode]``; the reference path always runs.
    """
    cfg.validate()
    modes = list(modes) if modes is not None else [cfg.run.mode]
    modes = [m for m in modes if m != "reference"]
    setup = build_setup(cfg)
    log.info("simulating %d beams x %d elements", setup.beams.size, setup.geometry.n_elements)
    raw = simulate(cfg, setup)
    ref, _, down = reference_path(cfg, setup, raw)
    paths = {"reference": render(cfg, setup, ref)}
    for mode in modes:
        log.info("compressed path: %s", mode)
        paths[mode] = render(cfg, setup, compressed_path(cfg, setup, raw, mode))

    result = assemble_result(cfg, setup, paths, raw, down.shape[1])
    if write:
        write_outputs(result, Path(out_dir or cfg.run.out))
    return result


def assemble_result(cfg, setup, paths, raw=None, reference_samples=REFERENCE_LINE_SAMPLES):
    """Rate report and comparison metrics for already computed paths."""
    rate = RateReport(
        raw_real_samples=setup.window.n_samples,
        reference_real_samples=int(reference_samples),
        exact_complex_samples=cfg.sparsity.n_fourier,
    )
    sizes = paths["approx"].channel_set_sizes if "approx" in paths else None
    if sizes is not None:
        rate.approx_mean_complex_samples = float(sizes.mean())
        rate.approx_max_complex_samples = int(sizes.max())
    metrics = collect_metrics(setup, paths, cfg.grid_step())
    return PipelineResult(cfg, setup, raw, paths, rate, metrics)


def collect_metrics(setup, paths, grid_step):
    targets = target_positions(setup, grid_step) if setup.targets.size else None
    metrics = {}

    def record(prefix, a, b, with_targets):
        # compared on the displayed (log-compressed) polar and Cartesian images
        res = compare_images(a.rendered_polar.lines, b.rendered_polar.lines, targets=targets if with_targets else None)
        metrics[f"{prefix}.nrmse"] = res["nrmse"]
        metrics[f"{prefix}.psnr_db"] = res["psnr_db"]
        cart = compare_images(a.image.pixels, b.image.pixels, mask=a.image.mask)
        metrics[f"{prefix}.image_nrmse"] = cart["nrmse"]
        for i, (dq, db) in enumerate(res.get("localization", [])):
            metrics[f"{prefix}.target{i}.cell_error"] = dq
            metrics[f"{prefix}.target{i}.beam_error"] = db

    ref = paths["reference"]
    if targets is not None:
        polar = ref.rendered_polar.lines
        for i, (bt, qt) in enumerate(targets):
            dq, db = locate_target(polar, bt, qt)
            metrics[f"metrics.reference.target{i}.cell_error"] = dq
            metrics[f"metrics.reference.target{i}.beam_error"] = db
    for mode in ("exact", "approx"):
        if mode in paths:
            record(f"metrics.{mode}_vs_reference", ref, paths[mode], True)
    if "exact" in paths and "approx" in paths:
        record("metrics.approx_vs_exact", paths["exact"], paths["approx"], False)
    return metrics


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if not np.isfinite(v) else f"{float(v):.10g}"
    return str(v)


def format_report(items):
    """Flat ``key=value`` report, one entry per line in key order."""
    return "".join(f"{k}={format_value(v)}\n" for k, v in sorted(items.items()))


def format_summary(result):
    r = result.rate
    lines = [
        f"beams: {result.setup.beams.size}, elements: {result.setup.geometry.n_elements}, "
        f"samples/trace: {r.raw_real_samples}",
        f"reference line: {r.reference_real_samples} real samples",
        f"exact kernels: {r.exact_complex_samples} complex samples/line, "
        f"{r.exact_reduction:.2f}x fewer than reference",
    ]
    if r.approx_mean_complex_samples is not None:
        lines.append(
            f"approx kernels: mean {r.approx_mean_complex_samples:.1f}, max {r.approx_max_complex_samples} "
            f"complex samples/element/line, {r.approx_reduction:.2f}x fewer than reference"
        )
    for key in sorted(result.metrics):
        if key.endswith(".nrmse") and ".self." not in key:
            lines.append(f"{key[len('metrics.'):-len('.nrmse')]}: NRMSE {result.metrics[key]:.4f}")
    return "\n".join(lines) + "\n"


def write_outputs(result, out):
    out.mkdir(parents=True, exist_ok=True)
    fmt = result.config.render.format
    for mode, path in result.paths.items():
        f = out / f"{mode}.{fmt}"
        write_image(path.image, f, fmt)
        result.files[f"image.{mode}"] = f
        save_lines(out / f"lines_{mode}.npz", path)
    rep = out / "report.txt"
    rep.write_text(format_report(result.report_items()))
    (out / "summary.txt").write_text(format_summary(result))
    result.files["report"] = rep


def save_lines(path, pr):
    supports = [v.support for v in pr.vectors]
    values = [v.values for v in pr.vectors]
    offsets = np.cumsum([0] + [s.size for s in supports])
    np.savez(
        path,
        mode=np.array(pr.mode),
        lines=pr.lines,
        support=np.concatenate(supports) if supports else np.zeros(0, np.int64),
        values=np.concatenate(values) if values else np.zeros(0, complex),
        offsets=offsets,
        **({} if pr.channel_set_sizes is None else {"channel_set_sizes": pr.channel_set_sizes}),
    )


def load_lines(path):
    with np.load(path) as z:
        mode = str(z["mode"])
        lines = z["lines"]
        off = z["offsets"]
        vectors = [
            SparseVector(z["support"][a:b], z["values"][a:b], lines.shape[1]) for a, b in zip(off[:-1], off[1:])
        ]
        sizes = z["channel_set_sizes"] if "channel_set_sizes" in z else None
    return PathResult(mode, lines, vectors=vectors, channel_set_sizes=sizes)
