"""Resumable end-to-end pipeline: raw repeats to denoised volumes and a report.

Each stage writes into its own directory under the output root together
with ``manifest.json``, which records content hashes of the stage inputs and
outputs, the stage parameters and the full configuration.  A stage whose
recorded inputs, parameters and outputs all still match is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import config_to_dict
from .io import read_volume, write_volume
from .n2n import DenoiserNet, build_pairs, center_crop, denoise_volume, load_model, save_model, train, write_loss_csv
from .phantom import deformed_copies, generate_clean, make_repeats
from .prefilter import prefilter_volume
from .quality import evaluate_methods, write_report_csv
from .registration import AffineTransform, DiffeoResult
from .template import SubjectTemplate, _transport_one, estimate_template, transport_warps
from .views import export_views
from .volume import FieldKind, VectorField3D, Volume3D

log = logging.getLogger(__name__)

__all__ = ["STAGES", "StageError", "PipelineLockedError", "derive_seed", "run_pipeline", "file_hash"]

STAGES = ("phantom", "prefilter", "template", "transport", "pair", "train", "denoise", "baselines", "evaluate", "export")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class PipelineLockedError(RuntimeError):
    pass


def derive_seed(seed, *keys):
    """Independent 32-bit seed for a named sub-stream of the global seed."""
    words = [int(seed)] + [int(hashlib.sha256(str(k).encode()).hexdigest()[:8], 16) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _volume_files(mhd):
    mhd = Path(mhd)
    return [mhd, mhd.with_suffix(".raw")]


# ---------------------------------------------------------------------------
# run context


@dataclass
class _Context:
    cfg: object
    root: Path
    raw_config: dict

    @property
    def n_subjects(self):
        return self.cfg.phantom.subjects if self.cfg.phantom is not None else len(self.cfg.inputs)

    def n_repeats(self, s):
        return self.cfg.phantom.repeats if self.cfg.phantom is not None else len(self.cfg.inputs[s])

    def sub(self, stage, s):
        return self.root / stage / f"subject{s:02d}"

    def raw_path(self, s, r):
        if self.cfg.phantom is not None:
            return self.sub("phantom", s) / f"repeat{r:02d}.mhd"
        return Path(self.cfg.inputs[s][r])

    def raw(self, s):
        return [read_volume(self.raw_path(s, r)) for r in range(self.n_repeats(s))]

    def stage_path(self, stage, s, r, name="repeat"):
        return self.sub(stage, s) / f"{name}{r:02d}.mhd"

    def load_template(self, s):
        d = self.sub("template", s)
        info = json.loads((d / "info.json").read_text())
        affines, diffeos = [], []
        for r in range(self.n_repeats(s)):
            affines.append(AffineTransform.from_dict(json.loads((d / f"affine{r:02d}.json").read_text())))
            vel = read_volume(d / f"velocity{r:02d}.mhd")
            diffeos.append(
                DiffeoResult(
                    velocity=VectorField3D(vel.data, vel.spacing, FieldKind.VELOCITY),
                    forward_disp=read_volume(d / f"forward{r:02d}.mhd"),
                    inverse_disp=read_volume(d / f"inverse{r:02d}.mhd"),
                    final_similarity=info["final_similarity"][r],
                    min_jacobian=info["min_jacobian"][r],
                    level_history=[],
                )
            )
        return SubjectTemplate(read_volume(d / "template.mhd"), affines, diffeos, info["iterations_run"], info["sharpness_history"])


# ---------------------------------------------------------------------------
# stages; each returns (inputs, params) for hashing and a runner producing outputs


def _phantom_inputs(ctx):
    return [], {"phantom": config_to_dict(ctx.cfg.phantom), "seed": ctx.cfg.seed}


def _phantom_run(ctx):
    ph = ctx.cfg.phantom
    if ph is None:
        return []
    out, meta = [], {"subjects": []}
    for s in range(ph.subjects):
        seeds = [derive_seed(ctx.cfg.seed, "phantom", s, k) for k in ("anatomy", "motion", "noise")]
        pspec, mspec, nspec = ph.specs(seeds)
        clean = generate_clean(pspec)
        repeats, truth = make_repeats(clean, ph.repeats, mspec, nspec)
        moved, _ = deformed_copies(clean, ph.repeats, mspec)
        d = ctx.sub("phantom", s)
        d.mkdir(parents=True, exist_ok=True)
        out += _volume_files(write_volume(clean, d / "clean.mhd"))
        for r in range(ph.repeats):
            out += _volume_files(write_volume(repeats[r], d / f"repeat{r:02d}.mhd"))
            out += _volume_files(write_volume(moved[r], d / f"moved{r:02d}.mhd"))
            out += _volume_files(write_volume(truth[r], d / f"truth{r:02d}.mhd"))
        meta["subjects"].append(
            {"subject": s, "phantom_seed": seeds[0], "motion_seed": seeds[1], "noise_seed": seeds[2],
             "phantom_spec": config_to_dict(pspec), "motion_spec": config_to_dict(mspec), "noise_spec": config_to_dict(nspec)}
        )
    p = ctx.root / "phantom" / "phantom.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out + [p]


def _raw_inputs(ctx):
    return [f for s in range(ctx.n_subjects) for r in range(ctx.n_repeats(s)) for f in _volume_files(ctx.raw_path(s, r))]


def _prefilter_inputs(ctx):
    return _raw_inputs(ctx), config_to_dict(ctx.cfg.prefilter)


def _prefilter_run(ctx):
    out = []
    for s in range(ctx.n_subjects):
        ctx.sub("prefilter", s).mkdir(parents=True, exist_ok=True)
        for r, v in enumerate(ctx.raw(s)):
            out += _volume_files(write_volume(prefilter_volume(v, ctx.cfg.prefilter), ctx.stage_path("prefilter", s, r)))
    return out


def _prefiltered_files(ctx):
    return [f for s in range(ctx.n_subjects) for r in range(ctx.n_repeats(s)) for f in _volume_files(ctx.stage_path("prefilter", s, r))]


def _template_inputs(ctx):
    return _prefiltered_files(ctx), {"registration": config_to_dict(ctx.cfg.registration), "template": config_to_dict(ctx.cfg.template)}


def _template_run(ctx):
    out = []
    for s in range(ctx.n_subjects):
        vols = [read_volume(ctx.stage_path("prefilter", s, r)) for r in range(ctx.n_repeats(s))]
        st = estimate_template(vols, ctx.cfg.registration, ctx.cfg.template.outer_iters, ctx.cfg.threads)
        d = ctx.sub("template", s)
        d.mkdir(parents=True, exist_ok=True)
        out += _volume_files(write_volume(st.template, d / "template.mhd"))
        for r, (a, df) in enumerate(zip(st.affines, st.diffeos)):
            p = d / f"affine{r:02d}.json"
            p.write_text(json.dumps(a.to_dict(), indent=2, sort_keys=True))
            out.append(p)
            out += _volume_files(write_volume(df.velocity, d / f"velocity{r:02d}.mhd"))
            out += _volume_files(write_volume(df.forward_disp, d / f"forward{r:02d}.mhd"))
            out += _volume_files(write_volume(df.inverse_disp, d / f"inverse{r:02d}.mhd"))
        info = {
            "iterations_run": st.iterations_run,
            "sharpness_history": st.sharpness_history,
            "final_similarity": [d_.final_similarity for d_ in st.diffeos],
            "min_jacobian": [d_.min_jacobian for d_ in st.diffeos],
        }
        p = d / "info.json"
        p.write_text(json.dumps(info, indent=2, sort_keys=True))
        out.append(p)
    return out


def _template_files(ctx):
    files = []
    for s in range(ctx.n_subjects):
        d = ctx.sub("template", s)
        files += _volume_files(d / "template.mhd") + [d / "info.json"]
        for r in range(ctx.n_repeats(s)):
            files.append(d / f"affine{r:02d}.json")
            for name in ("velocity", "forward", "inverse"):
                files += _volume_files(d / f"{name}{r:02d}.mhd")
    return files


def _transport_inputs(ctx):
    return _raw_inputs(ctx) + _template_files(ctx), {}


def _transport_run(ctx):
    out = []
    for s in range(ctx.n_subjects):
        warped = transport_warps(ctx.raw(s), ctx.load_template(s))
        ctx.sub("warped", s).mkdir(parents=True, exist_ok=True)
        for r, v in enumerate(warped):
            out += _volume_files(write_volume(v, ctx.stage_path("warped", s, r)))
    return out


def _warped_files(ctx):
    return [f for s in range(ctx.n_subjects) for r in range(ctx.n_repeats(s)) for f in _volume_files(ctx.stage_path("warped", s, r))]


def _pair_inputs(ctx):
    return _warped_files(ctx), {"crop": ctx.cfg.pairs.crop, "depth": ctx.cfg.network.depth, "seed": ctx.cfg.seed}


def _pair_index(dataset):
    return [[a.subject, a.z, a.repeat, b.repeat] for a, b in dataset.pairs]


def _effective_crop(ctx, dims):
    """Configured crop, reduced to fit the slices and the network's size multiple."""
    mult = 2 ** ctx.cfg.network.depth
    crop = min(ctx.cfg.pairs.crop, dims[0], dims[1])
    crop -= crop % mult
    if crop < mult:
        raise StageError("pair", f"slices {dims[:2]} are too small for a depth-{ctx.cfg.network.depth} network")
    if crop != ctx.cfg.pairs.crop:
        log.warning("crop %d does not fit slices %s; using %d", ctx.cfg.pairs.crop, tuple(dims[:2]), crop)
    return crop


def _pair_run(ctx):
    subjects = [[read_volume(ctx.stage_path("warped", s, r)) for r in range(ctx.n_repeats(s))] for s in range(ctx.n_subjects)]
    ds = build_pairs(subjects, _effective_crop(ctx, subjects[0][0].dims), derive_seed(ctx.cfg.seed, "pairs"))
    d = ctx.root / "pairs"
    d.mkdir(parents=True, exist_ok=True)
    p = d / "pairs.json"
    p.write_text(json.dumps({"crop": ds.crop, "count": len(ds), "pairs": _pair_index(ds)}))
    return [p]


def _arrays_from_index(volumes, index, crop):
    """Stack (input, target) crops following a ``[subject, z, a, b]`` index."""
    x = np.stack([center_crop(volumes[s][a].data[:, :, z], crop) for s, z, a, _ in index]).astype(np.float64)
    t = np.stack([center_crop(volumes[s][b].data[:, :, z], crop) for s, z, _, b in index]).astype(np.float64)
    return x, t


def _train_net(ctx, volumes, index, model_dir):
    cfg = ctx.cfg
    net = DenoiserNet(cfg.network.descriptor(), seed=derive_seed(cfg.seed, "net"), init=cfg.network.init)
    x, t = _arrays_from_index(volumes, index, _effective_crop(ctx, volumes[0][0].dims))
    net, history = train(net, None, cfg.train.train_config(derive_seed(cfg.seed, "train")), inputs=x, targets=t)
    model_dir.mkdir(parents=True, exist_ok=True)
    save_model(net, model_dir / "model", extra={"pairs": len(index)})
    write_loss_csv(history, model_dir / "loss.csv")
    return [model_dir / "model.json", model_dir / "model.bin", model_dir / "loss.csv"]


def _train_inputs(ctx):
    return _warped_files(ctx) + [ctx.root / "pairs" / "pairs.json"], {
        "network": config_to_dict(ctx.cfg.network), "train": config_to_dict(ctx.cfg.train), "seed": ctx.cfg.seed,
    }


def _train_run(ctx):
    volumes = [[read_volume(ctx.stage_path("warped", s, r)) for r in range(ctx.n_repeats(s))] for s in range(ctx.n_subjects)]
    index = json.loads((ctx.root / "pairs" / "pairs.json").read_text())["pairs"]
    return _train_net(ctx, volumes, index, ctx.root / "model")


def _model_files(d):
    return [d / "model.json", d / "model.bin"]


def _denoise_inputs(ctx):
    return _raw_inputs(ctx) + _model_files(ctx.root / "model"), {}


def _denoise_run(ctx):
    net = load_model(ctx.root / "model" / "model")
    out = []
    for s in range(ctx.n_subjects):
        ctx.sub("denoised", s).mkdir(parents=True, exist_ok=True)
        for r, v in enumerate(ctx.raw(s)):
            out += _volume_files(write_volume(denoise_volume(net, v), ctx.stage_path("denoised", s, r)))
    return out


def _baseline_inputs(ctx):
    return _raw_inputs(ctx) + _template_files(ctx), {
        "baselines": list(ctx.cfg.baselines), "network": config_to_dict(ctx.cfg.network),
        "train": config_to_dict(ctx.cfg.train), "crop": ctx.cfg.pairs.crop, "seed": ctx.cfg.seed,
    }


def _baseline_run(ctx):
    out = []
    base = ctx.root / "baselines"
    base.mkdir(parents=True, exist_ok=True)
    aligned = []
    for s in range(ctx.n_subjects):
        st = ctx.load_template(s)
        aligned.append([_transport_one(v, a, None) for v, a in zip(ctx.raw(s), st.affines)])
    if "affine_average" in ctx.cfg.baselines:
        d = base / "affine_average"
        d.mkdir(exist_ok=True)
        for s, vols in enumerate(aligned):
            mean = np.mean([np.asarray(v.data, np.float64) for v in vols], axis=0).astype(np.float32)
            avg = Volume3D(mean, vols[0].spacing)
            out += _volume_files(write_volume(avg, d / f"subject{s:02d}.mhd"))
    if "affine_n2n" in ctx.cfg.baselines:
        d = base / "affine_n2n"
        ds = build_pairs(aligned, _effective_crop(ctx, aligned[0][0].dims), derive_seed(ctx.cfg.seed, "pairs"))
        out += _train_net(ctx, aligned, _pair_index(ds), d)
        net = load_model(d / "model")
        for s in range(ctx.n_subjects):
            raw0 = read_volume(ctx.raw_path(s, 0))
            out += _volume_files(write_volume(denoise_volume(net, raw0), d / f"subject{s:02d}.mhd"))
    return out


def _method_volumes(ctx):
    """Reference-repeat outputs per method; every method is scored on repeat 0."""
    n = ctx.n_subjects
    methods = {
        "noisy": [ctx.raw_path(s, 0) for s in range(n)],
        "ours": [ctx.stage_path("denoised", s, 0) for s in range(n)],
    }
    if "affine_average" in ctx.cfg.baselines:
        methods["affine_average"] = [ctx.root / "baselines" / "affine_average" / f"subject{s:02d}.mhd" for s in range(n)]
    if "nlm" in ctx.cfg.baselines:
        methods["nlm"] = [ctx.stage_path("prefilter", s, 0) for s in range(n)]
    if "affine_n2n" in ctx.cfg.baselines:
        methods["affine_n2n"] = [ctx.root / "baselines" / "affine_n2n" / f"subject{s:02d}.mhd" for s in range(n)]
    return methods


def _clean_refs(ctx):
    if ctx.cfg.phantom is None:
        return None
    return [ctx.sub("phantom", s) / "moved00.mhd" for s in range(ctx.n_subjects)]


def _evaluate_inputs(ctx):
    files = [f for paths in _method_volumes(ctx).values() for p in paths for f in _volume_files(p)]
    refs = _clean_refs(ctx) or []
    return files + [f for p in refs for f in _volume_files(p)], config_to_dict(ctx.cfg.metrics)


def _evaluate_run(ctx):
    m = ctx.cfg.metrics
    methods = {k: [read_volume(p) for p in v] for k, v in _method_volumes(ctx).items()}
    refs = _clean_refs(ctx)
    clean = [read_volume(p) for p in refs] if refs else None
    reports = evaluate_methods(methods, methods["noisy"], clean, m.patch, m.tau, m.window, m.peak)
    csv_path = ctx.root / "report.csv"
    write_report_csv(reports, csv_path)
    summary = {
        r.method: {"mean_Q": r.mean_q, "mean_AD": r.mean_ad, "mean_PSNR": r.mean_psnr, "mean_SSIM": r.mean_ssim, "n_images": len(r.rows)}
        for r in reports
    }
    d = ctx.root / "evaluate"
    d.mkdir(exist_ok=True)
    p = d / "summary.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return [csv_path, p]


def _export_inputs(ctx):
    files, _ = _evaluate_inputs(ctx)
    return files + _volume_files(ctx.sub("template", 0) / "template.mhd"), {}


def _export_run(ctx):
    out = []
    d = ctx.root / "views"
    vols = {k: v[0] for k, v in _method_volumes(ctx).items()}
    vols["template"] = ctx.sub("template", 0) / "template.mhd"
    for name, path in vols.items():
        out += list(export_views(read_volume(path), d, prefix=f"{name}_subject00_").values())
    return out + [p.with_suffix(".json") for p in out]


_STAGE_FUNCS = {
    "phantom": (_phantom_inputs, _phantom_run),
    "prefilter": (_prefilter_inputs, _prefilter_run),
    "template": (_template_inputs, _template_run),
    "transport": (_transport_inputs, _transport_run),
    "pair": (_pair_inputs, _pair_run),
    "train": (_train_inputs, _train_run),
    "denoise": (_denoise_inputs, _denoise_run),
    "baselines": (_baseline_inputs, _baseline_run),
    "evaluate": (_evaluate_inputs, _evaluate_run),
    "export": (_export_inputs, _export_run),
}


# ---------------------------------------------------------------------------
# manifests, locking, driver


def _rel(ctx, p):
    p = Path(p)
    try:
        return str(p.resolve().relative_to(ctx.root.resolve()))
    except ValueError:
        return str(p.resolve())


def _hashes(ctx, files):
    return {_rel(ctx, f): file_hash(f) for f in files}


def _up_to_date(ctx, stage, in_hashes, params):
    mpath = ctx.root / stage / "manifest.json"
    if not mpath.exists():
        return False
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        return False
    if man.get("inputs") != in_hashes or man.get("params") != json.loads(json.dumps(params)):
        return False
    for rel, h in man.get("outputs", {}).items():
        p = Path(rel) if os.path.isabs(rel) else ctx.root / rel
        if not p.exists() or file_hash(p) != h:
            return False
    return True


def _acquire_lock(root):
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        try:
            pid = int(lock.read_text().strip() or "0")
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError):
            log.warning("removing stale lock %s", lock)
            lock.unlink(missing_ok=True)
            return _acquire_lock(root)
        except PermissionError:
            pass
        raise PipelineLockedError(f"output directory {root} is locked by another run ({lock})")
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    return lock


def run_pipeline(cfg, raw_config=None, until=None, stages=None):
    """Run the stages in order (resuming where manifests match).

    ``until`` stops after the named stage.  Returns ``{stage: "ran" | "skipped"}``.
    Raises :class:`StageError` naming the failing stage; outputs of earlier
    stages are kept.
    """
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, root, raw_config if raw_config is not None else config_to_dict(cfg))
    order = list(STAGES if stages is None else stages)
    if until is not None:
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        order = [s for s in order if STAGES.index(s) <= STAGES.index(until)]
    if cfg.phantom is None and "phantom" in order:
        order.remove("phantom")
    status = {}
    lock = _acquire_lock(root)
    try:
        for stage in order:
            in_fn, run_fn = _STAGE_FUNCS[stage]
            try:
                inputs, params = in_fn(ctx)
                in_hashes = _hashes(ctx, inputs)
            except Exception as exc:  # missing upstream outputs
                raise StageError(stage, f"inputs unavailable: {exc}") from exc
            if _up_to_date(ctx, stage, in_hashes, params):
                log.info("stage %s: up to date, skipped", stage)
                status[stage] = "skipped"
                continue
            log.info("stage %s: running", stage)
            t0 = time.perf_counter()
            try:
                (root / stage).mkdir(parents=True, exist_ok=True)
                outputs = run_fn(ctx)
            except Exception as exc:
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
            manifest = {
                "stage": stage,
                "params": params,
                "inputs": in_hashes,
                "outputs": _hashes(ctx, outputs),
                "wall_time_s": time.perf_counter() - t0,
                "config": ctx.raw_config,
                "resolved_config": config_to_dict(cfg),
            }
            (root / stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
            status[stage] = "ran"
    finally:
        lock.unlink(missing_ok=True)
    return status
