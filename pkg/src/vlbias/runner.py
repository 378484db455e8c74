"""Experiment dispatch, report files and run manifests.

Every experiment writes fixed-name files into the output directory plus
``manifest.json``. Floats are written with ``repr`` so that files round-trip
exactly and identical configs give byte-identical results.

Report columns:

* ``bias.csv``: split, bias_vl, std, trials, images
* ``fpr_by_object.csv``: object, fpr_male, fpr_female, diff (sorted by diff)
* ``split_trials.csv``: gender, trial, bias_vl
* ``metrics.json``: AP, per-object AP and bias details
* ``cma.csv``: intervention, mediator, n_heads, y_O, y_E, y_D, y_I, E, DE, IE,
  pct_E, pct_DE, pct_IE, clamp_IE, fingerprint
* ``sweep_<module>.csv``: module, depth, intervention, n_heads, y_O, y_E, y_D,
  y_I, E, DE, IE, pct_IE
* ``combined.csv``: fraction, label, intervention, n_heads, y_O, y_E, y_D, y_I,
  E, DE, IE, pct_IE
* ``mitigation.csv``: method, ap, bias, bias_mitigated_pct
* ``detections.json``, ``annotations.json``, ``genders.tsv``: COCO-style
  export of the evaluated scores, readable by :func:`ingest_external`
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .cma import (
    EffectReport,
    Intervention,
    MediatorSet,
    clamp_oracle,
    combined_sweep,
    effects,
    layer_sweep,
)
from .config import ExperimentConfig, parse_head
from .evaluate import dataset_scores, truth_matrix
from .metrics import average_precision, bias_vl, fpr_table, per_object_report, split_baseline, write_fpr_report
from .mitigation import FairTarget, MitigationConfig, evaluate_mitigation
from .model import ToyVLM
from .scenes import FEMALE, MALE, LabeledSample, generate, ingest_external, samples_to_external, write_external

GENDERS = (MALE, FEMALE)
EFFECT_COLUMNS = ("y_O", "y_E", "y_D", "y_I", "E", "DE", "IE")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _effect_values(r: EffectReport) -> list:
    return [r.y_O.value, r.y_E.value, r.y_D.value, r.y_I.value, r.E, r.DE, r.IE]


@dataclass
class RunResult:
    out_dir: Path
    files: list[Path]
    manifest: dict
    summary: str


class _Context:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path, threads: int):
        self.cfg = cfg
        self.out = out_dir
        self.threads = threads
        self.files: list[Path] = []
        self.params = cfg.typed_params()
        self._model: Optional[ToyVLM] = None
        self._samples: Optional[list[LabeledSample]] = None

    @property
    def model(self) -> ToyVLM:
        if self._model is None:
            self._model = ToyVLM(self.cfg.model_config_obj(), self.cfg.injection_list())
        return self._model

    @property
    def samples(self) -> list[LabeledSample]:
        if self._samples is None:
            self._samples = generate(self.cfg.gen_config_obj())
        return self._samples

    def add(self, path: Path) -> Path:
        self.files.append(path)
        return path

    def path(self, name: str) -> Path:
        return self.out / name


# ----------------------------------------------------------- bias reporting


def _bias_reports(ctx: _Context, scores, truth, genders, objects, tau) -> tuple[dict, str]:
    genders = list(genders)
    table = fpr_table(scores, truth, genders, objects, tau)
    bias = bias_vl(table)
    rows = [("gendered", bias.value, None, 1, len(genders))]
    trial_rows = []
    baselines = {}
    g_arr = np.asarray(genders)
    for g in GENDERS:
        m = g_arr == g
        if m.sum() < 2:
            continue
        sb = split_baseline(scores[m], truth[m], objects, tau, ctx.params.baseline_seed, ctx.params.n_trials)
        baselines[g] = sb
        rows.append((f"{g}-split", sb.mean, sb.std, ctx.params.n_trials, int(m.sum())))
        trial_rows += [(g, t, v) for t, v in enumerate(sb.values)]
    ctx.add(write_csv(ctx.path("bias.csv"), ("split", "bias_vl", "std", "trials", "images"), rows))
    ctx.add(write_csv(ctx.path("split_trials.csv"), ("gender", "trial", "bias_vl"), trial_rows))
    ctx.add(write_fpr_report(per_object_report(table), ctx.path("fpr_by_object.csv")))
    info = {
        "bias_vl": bias.value,
        "bias_per_object": bias.per_object,
        "skipped_objects": list(bias.skipped),
        "n_gendered_images": len(genders),
    }
    parts = [f"Bias_VL={bias.value:.4f}"]
    for g, sb in baselines.items():
        z = (bias.value - sb.mean) / sb.std if sb.std > 0 else float("inf")
        info[f"{g}_split_z"] = z
        parts.append(f"{g}-split {sb.mean:.4f}+-{sb.std:.4f}")
    return info, ", ".join(parts)


def run_eval(ctx: _Context) -> str:
    model, samples = ctx.model, ctx.samples
    cats = model.config.categories
    scores = dataset_scores(model, samples, threads=ctx.threads)
    truth = truth_matrix(samples, cats)
    ap = average_precision(scores, truth, cats)
    mask = np.array([s.gender in GENDERS for s in samples])
    genders = [s.gender for s in samples if s.gender in GENDERS]
    info, summary = _bias_reports(ctx, scores[mask], truth[mask], genders, cats, model.config.tau)
    info.update(ap=ap.value, ap_per_object=ap.per_object, ap_excluded=list(ap.excluded), n_images=len(samples))
    ctx.add(write_json(ctx.path("metrics.json"), info))
    if ctx.params.export_detections:
        for p in write_external(samples_to_external(samples, scores, cats), ctx.out).values():
            ctx.add(p)
    return f"{summary}, AP={ap.value:.4f}"


def _external(ctx: _Context):
    ext = ctx.cfg.data.external
    return ingest_external(ext.results, ext.annotations, ext.genders, ext.captions)


def run_ingest(ctx: _Context) -> str:
    det = _external(ctx)
    scores, truth, genders = det.arrays()
    if not genders:
        raise ValueError("no gendered images left after ingestion")
    info, summary = _bias_reports(ctx, scores, truth, genders, det.categories, ctx.cfg.model.tau)
    ap = average_precision(scores, truth, det.categories)
    info.update(ap=ap.value, ap_per_object=ap.per_object, ap_excluded=list(ap.excluded),
                n_dropped=len(det.dropped), dropped_ids=det.dropped)
    ctx.add(write_json(ctx.path("metrics.json"), info))
    if ctx.params.export_detections:
        for p in write_external(det, ctx.out).values():
            ctx.add(p)
    return f"{summary}, dropped {len(det.dropped)} images"


def run_split_baseline(ctx: _Context) -> str:
    if ctx.cfg.data.external is not None:
        det = _external(ctx)
        scores, truth, genders = det.arrays()
        objects, tau = det.categories, ctx.cfg.model.tau
    else:
        model, samples = ctx.model, ctx.samples
        objects, tau = model.config.categories, model.config.tau
        keep = [s for s in samples if s.gender in GENDERS]
        scores = dataset_scores(model, keep, threads=ctx.threads)
        truth = truth_matrix(keep, objects)
        genders = [s.gender for s in keep]
    g_arr = np.asarray(genders)
    rows, trial_rows, parts = [], [], []
    for g in ctx.params.genders:
        m = g_arr == g
        if m.sum() < 2:
            raise ValueError(f"split baseline for {g} needs at least two images, found {int(m.sum())}")
        sb = split_baseline(scores[m], truth[m], objects, tau, ctx.params.baseline_seed, ctx.params.n_trials)
        rows.append((f"{g}-split", sb.mean, sb.std, ctx.params.n_trials, int(m.sum())))
        trial_rows += [(g, t, v) for t, v in enumerate(sb.values)]
        parts.append(f"{g}-split {sb.mean:.4f}+-{sb.std:.4f}")
    ctx.add(write_csv(ctx.path("bias.csv"), ("split", "bias_vl", "std", "trials", "images"), rows))
    ctx.add(write_csv(ctx.path("split_trials.csv"), ("gender", "trial", "bias_vl"), trial_rows))
    return ", ".join(parts)


# --------------------------------------------------------------- mediation


def resolve_mediator(model: ToyVLM, spec) -> tuple[MediatorSet, str]:
    cfg = model.config
    if spec.preset == "none":
        return MediatorSet(), "none"
    if spec.preset == "injection-heads":
        return MediatorSet(i.at for i in model.injections if i.alpha != 0), "injection-heads"
    if spec.preset == "all-heads":
        return MediatorSet.all_heads(cfg), "all-heads"
    if spec.module is not None:
        return MediatorSet.layers_up_to(cfg, spec.module, spec.depth), f"{spec.module}<=L{spec.depth}"
    heads = MediatorSet(parse_head(h) for h in spec.heads)
    heads.validate(cfg)
    return heads, "+".join(str(h) for h in sorted(heads))


def run_cma(ctx: _Context) -> str:
    model, samples = ctx.model, ctx.samples
    mediator, label = resolve_mediator(model, ctx.params.mediator)
    rows, parts = [], []
    for i in ctx.params.interventions:
        r = effects(model, samples, i, mediator, ctx.threads)
        clamp = None
        if ctx.params.clamp_check:
            clamp = clamp_oracle(model, samples, i, mediator, ctx.threads).value - r.y_O.value
        rows.append((Intervention(i).value, label, len(mediator), *_effect_values(r),
                     r.pct_E, r.pct_DE, r.pct_IE, clamp, r.fingerprint))
        parts.append(f"{Intervention(i).value}: IE={r.IE:.4f}")
    cols = ("intervention", "mediator", "n_heads", *EFFECT_COLUMNS, "pct_E", "pct_DE", "pct_IE", "clamp_IE", "fingerprint")
    ctx.add(write_csv(ctx.path("cma.csv"), cols, rows))
    return "; ".join(parts)


def run_sweep(ctx: _Context) -> str:
    model, samples = ctx.model, ctx.samples
    cols = ("module", "depth", "intervention", "n_heads", *EFFECT_COLUMNS, "pct_IE")
    parts = []
    for module in ctx.params.modules:
        reports = layer_sweep(model, samples, module, ctx.params.intervention, ctx.params.depths, ctx.threads)
        rows = [(module, r.depth, r.intervention.value, r.n_heads, *_effect_values(r), r.pct_IE) for r in reports]
        ctx.add(write_csv(ctx.path(f"sweep_{module}.csv"), cols, rows))
        parts.append(f"{module}: IE " + " ".join(f"{r.IE:.4f}" for r in reports))
    return "; ".join(parts)


def run_combined(ctx: _Context) -> str:
    model, samples = ctx.model, ctx.samples
    rows, parts = [], []
    for f in ctx.params.fractions:
        res = combined_sweep(model, samples, f, ctx.threads)
        for label, r in res.items():
            rows.append((f, label, r.intervention.value, r.n_heads, *_effect_values(r), r.pct_IE))
        parts.append(f"f={f}: " + " ".join(f"{k}={v.IE:.4f}" for k, v in res.items()))
    cols = ("fraction", "label", "intervention", "n_heads", *EFFECT_COLUMNS, "pct_IE")
    ctx.add(write_csv(ctx.path("combined.csv"), cols, rows))
    return "; ".join(parts)


def run_mitigate(ctx: _Context) -> str:
    model, samples = ctx.model, ctx.samples
    before = dataset_scores(model, samples, threads=ctx.threads)
    rows, parts = [], []
    for method in ctx.params.methods:
        mcfg = MitigationConfig(FairTarget(method), ctx.params.templates)
        rep = evaluate_mitigation(model, samples, mcfg, ctx.threads, before_scores=before)
        rows.append((rep.target.value, rep.ap_after, rep.bias_after.value, rep.pct_mitigated))
        pct = "n/a" if rep.pct_mitigated is None else f"{rep.pct_mitigated:.2f}%"
        parts.append(f"{rep.target.value}: {pct}")
    ctx.add(write_csv(ctx.path("mitigation.csv"), ("method", "ap", "bias", "bias_mitigated_pct"), rows))
    return ", ".join(parts)


DISPATCH = {
    "eval": run_eval,
    "ingest": run_ingest,
    "split-baseline": run_split_baseline,
    "cma": run_cma,
    "sweep": run_sweep,
    "combined": run_combined,
    "mitigate": run_mitigate,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: Optional[int] = None) -> RunResult:
    """Run ``cfg`` and write its reports and ``manifest.json`` into ``out_dir`` (default ``cfg.output``)."""
    out = Path(out_dir) if out_dir is not None else cfg.output
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out, threads or cfg.threads)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    summary = DISPATCH[cfg.experiment](ctx)
    elapsed = time.perf_counter() - t0
    manifest = {
        "artifact_version": __version__,
        "experiment": cfg.experiment,
        "config_fingerprint": cfg.fingerprint(),
        "config": cfg.canonical(),
        "seeds": cfg.seeds(),
        "outputs": [{"file": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size} for p in ctx.files],
        "summary": summary,
        "started_at": started.isoformat(timespec="seconds"),
        "wall_clock_seconds": round(elapsed, 3),
    }
    mpath = write_json(out / "manifest.json", manifest)
    return RunResult(out, ctx.files + [mpath], manifest, summary)
