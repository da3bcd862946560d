"""Pipeline stages: simulate, lowres, embed, spectral solve, eval, reconstruct.

Every stage reads its inputs from and writes its outputs to one results
directory, so running the stages one by one gives the same tree as
:func:`run_pipeline`.

Layout::

    config.json
    dataset/manifest.json, dataset/images.f32
    lowres/mean.svol, lowres/eigvol_NNN.svol, lowres/model.json, lowres/betas.csv
    basis/basis.csv, basis/basis.json, basis/embedding.json
    spectral/rRR/alpha_NNN.svol, spectral/rRR/alpha.json, spectral/cg.json
    eval/fsc_rRR.csv, eval/fsc.svg, eval/summary.json
    recon/x_SSSSS.svol
"""
from __future__ import annotations

import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import core, evaluate, graph, io, lowres, simulate, solver
from .cg import CgOptions
from .config import PipelineConfig, config_dict
from .errors import MissingArtifacts, SpecvolError

log = logging.getLogger(__name__)

STAGES = ("simulate", "lowres", "embed", "reconstruct-spectral", "eval")


class StageFailed(SpecvolError):
    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"stage {stage} failed: {error}")
        self.stage = stage
        self.error = error


class Timer:
    """Wall-clock seconds per named step."""

    def __init__(self):
        self.seconds: dict = {}

    @contextmanager
    def __call__(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifacts(f"{path} not found; run the earlier stages first")
    return path


# ---------------------------------------------------------------------------
# stages


def stage_simulate(cfg: PipelineConfig, out: Path, timer: Timer) -> simulate.Dataset:
    with timer("simulate"):
        ds = simulate.sample_dataset(cfg.dataset)
        simulate.write_manifest(ds, out / "dataset")
    log.info("simulated n=%d N=%d sigma2=%.6g", ds.n_images, ds.size, ds.sigma2)
    return ds


def load_dataset(out: Path) -> simulate.Dataset:
    return simulate.read_manifest(_need(out / "dataset"))


def stage_lowres(cfg: PipelineConfig, out: Path, timer: Timer):
    ds = load_dataset(out)
    lc = cfg.lowres
    opts = CgOptions(tol=lc.cg_tol, maxiter=lc.cg_maxiter)
    lds = lowres.downsample(ds, lc.size)
    prob = lowres.reduce(lds)
    with timer("mu"):
        mean = lowres.estimate_mean(prob, opts)
    with timer("Sigma"):
        cov = lowres.estimate_covariance(prob, mean, opts)
    with timer("V_q"):
        vecs, vals, clamped = lowres.top_eigenvolumes(cov, lc.q)
        model = lowres.CovarianceModel(
            mean, lowres.covariance_voxels(prob, cov), prob.to_voxels(vecs), vals, clamped
        )
    with timer("beta"):
        betas = lowres.pca_coordinates(prob, model)
    d = out / "lowres"
    d.mkdir(parents=True, exist_ok=True)
    io.write_svol(d / "mean.svol", mean)
    for i in range(model.q):
        io.write_svol(d / f"eigvol_{i:03d}.svol", model.eigvolume(i))
    io.write_matrix_csv(d / "betas.csv", betas, header=[f"beta_{i + 1}" for i in range(model.q)])
    io.write_json(d / "model.json", {
        "eigenvalues": [float(v) for v in model.eigvals],
        "size": lc.size,
        "q": model.q,
        "clamped": clamped,
    })
    return model, betas


def stage_embed(cfg: PipelineConfig, out: Path, timer: Timer) -> graph.SpectralBasis:
    _, betas = io.read_matrix_csv(_need(out / "lowres" / "betas.csv"))
    gc = cfg.graph
    with timer("phi"):
        basis = graph.embed(betas, cfg.specvols.r, gc.kind, gc.k, gc.sigma_w, gc.alpha)
    d = out / "basis"
    d.mkdir(parents=True, exist_ok=True)
    basis.save(d / "basis.csv", d / "basis.json")
    ds_man = out / "dataset" / "manifest.json"
    if basis.r >= 3 and ds_man.exists():
        ds = load_dataset(out)
        if ds.conformations:
            rep = evaluate.embedding_diagnostics(basis.eigvecs, ds.conformations)
            io.write_json(d / "embedding.json", rep.to_dict())
    return basis


def load_basis(out: Path) -> graph.SpectralBasis:
    return graph.SpectralBasis.load(_need(out / "basis" / "basis.csv"), out / "basis" / "basis.json")


def stage_spectral(cfg: PipelineConfig, out: Path, timer: Timer) -> dict:
    ds = load_dataset(out)
    basis = load_basis(out)
    sc = cfg.specvols
    opts = CgOptions(tol=sc.cg_tol, maxiter=sc.cg_maxiter)
    r_values = sc.solve_for
    phi = basis.eigvecs[:, : max(r_values)]
    with timer("K"):
        if not ds.use_projections:
            kernels = solver.identity_kernels(ds, phi, sc.diagonal)
        elif sc.diagonal:
            kernels = solver.diagonal_approximation(ds)
        else:
            kernels = solver.build_kernels(ds, phi)
    with timer("b"):
        b = solver.build_backprojections(ds, phi)
    results = {}
    report = {}
    with timer("alpha"):
        for r in r_values:
            if not ds.use_projections and not sc.diagonal:
                sv = solver.SpectralVolumes(b[:r].copy())
            else:
                k = kernels.prefix(r) if kernels.r is not None else kernels
                sv = solver.solve_spectral_volumes(k, b[:r], opts, sc.tau, sc.precondition,
                                                   sc.band_limit)
            results[r] = sv
            sv.save(out / "spectral" / f"r{r:02d}")
            report[str(r)] = {
                "iterations": sv.info.iterations,
                "residual": sv.info.residual,
                "converged": sv.info.converged,
                "history": [float(h) for h in sv.info.history],
            }
    io.write_json(out / "spectral" / "cg.json", report)
    return results


def load_spectral(out: Path, r: Optional[int] = None):
    d = _need(out / "spectral")
    avail = sorted(int(p.name[1:]) for p in d.glob("r[0-9]*") if p.is_dir())
    if not avail:
        raise MissingArtifacts(f"no spectral volumes under {d}")
    r = avail[-1] if r is None else r
    if r not in avail:
        raise MissingArtifacts(f"spectral volumes for r={r} not found")
    return r, solver.SpectralVolumes.load(d / f"r{r:02d}")


def stage_eval(cfg: PipelineConfig, out: Path, timer: Timer) -> dict:
    ds = load_dataset(out)
    basis = load_basis(out)
    d = _need(out / "spectral")
    rs = sorted(int(p.name[1:]) for p in d.glob("r[0-9]*") if p.is_dir())
    alphas = {r: solver.SpectralVolumes.load(d / f"r{r:02d}").volumes for r in rs}
    with timer("eval"):
        n = ds.n_images
        truth = ds.clean_volume
        mean = np.mean([truth(s) for s in range(n)], axis=0)
        m = cfg.eval.n_fsc if cfg.eval.n_fsc > 0 else n
        idx = evaluate.subsample_indices(n, m)
        curves = evaluate.mean_subtracted_fsc(truth, alphas, basis.eigvecs, mean, idx)
    e = out / "eval"
    e.mkdir(parents=True, exist_ok=True)
    for r, c in curves.items():
        c.to_csv(e / f"fsc_r{r:02d}.csv")
    if cfg.eval.svg:
        evaluate.write_fsc_svg(e / "fsc.svg", curves)
    io.write_json(e / "summary.json", {
        "images": len(idx),
        "band_mean_quarter": {str(r): c.band_mean(0.25) for r, c in curves.items()},
    })
    if cfg.eval.reconstruct:
        reconstruct_images(out, cfg.eval.reconstruct)
    return curves


def reconstruct_images(out: Path, indices: Sequence[int], r: Optional[int] = None) -> list:
    """Write ``x_s`` for every requested index; duplicates are written once."""
    basis = load_basis(out)
    r, sv = load_spectral(out, r)
    phi = basis.eigvecs[:, :r]
    vols = [(s, solver.reconstruct(sv, phi, int(s))) for s in sorted(set(int(i) for i in indices))]
    written = []
    if vols:
        (out / "recon").mkdir(parents=True, exist_ok=True)
    for s, v in vols:
        p = out / "recon" / f"x_{s:05d}.svol"
        io.write_svol(p, v)
        written.append(p)
    return written


# ---------------------------------------------------------------------------
# orchestration


_STAGE_FUNCS = {
    "simulate": stage_simulate,
    "lowres": stage_lowres,
    "embed": stage_embed,
    "reconstruct-spectral": stage_spectral,
    "eval": stage_eval,
}


def run_stage(name: str, cfg: PipelineConfig, out: Path, timer: Optional[Timer] = None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timer = timer or Timer()
    try:
        return _STAGE_FUNCS[name](cfg, out, timer)
    except Exception as exc:
        (out / "FAILED").write_text(f"{name}: {type(exc).__name__}: {exc}\n")
        raise StageFailed(name, exc) from exc


def run_pipeline(cfg: PipelineConfig, out, deterministic: bool = False) -> Timer:
    """Run every stage in order.

    Timings go to ``timing.json``; deterministic runs print them to stderr
    instead so that the output tree is reproducible byte for byte.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    if deterministic:
        core.set_threads(1)
    io.write_json(out / "config.json", config_dict(cfg))
    timer = Timer()
    for name in STAGES:
        run_stage(name, cfg, out, timer)
    timing = {k: round(v, 3) for k, v in timer.seconds.items()}
    if deterministic:
        print("timing " + " ".join(f"{k}={v:.2f}s" for k, v in timing.items()), file=sys.stderr)
    else:
        io.write_json(out / "timing.json", timing)
    return timer


def dataset_summary(ds: simulate.Dataset) -> dict:
    return {"n": ds.n_images, "N": ds.size, "sigma2": ds.sigma2,
            "noise_ratio": ds.config.noise_ratio, "config": asdict(ds.config)}
