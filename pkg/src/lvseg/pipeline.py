"""Training, segmentation and evaluation workflows.

``train_system`` runs every offline training stage in order and returns a
``TrainedSystem``; ``segment_study`` applies it slice by slice (detect,
infer shape, evolve, then align the stack); ``evaluate_dirs`` compares
segmentation outputs against reference studies.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import alignment, evaluation
from .data import (AugmentConfig, LoadError, Sample, StudyRecord, augment_dataset, load_studies, samples_from,
                   save_study, select_network, split_contour_groups)
from .detector import (INPUT_SIDE, OUT_SIDE, POOL, ROI_SIDE, DetectorParams, detector_forward, finetune_detector,
                       init_output_layer, make_roi_label, mask_center, prepare_input, pretrain_output_layer)
from .imaging import Contour, NoContourError, crop, map_coords, polygon_centroid, rasterize_ring, resample
from .io import load_params, read_contour_csv, read_keyvalue, save_params, write_contour_csv, write_keyvalue, write_pgm
from .level_set import EnergyWeights, EvolutionConfig, segment
from .optim import OptimConfig, TrainingError, param_arrays
from .phantoms import PhantomConfig, generate_phantoms
from .shape_net import (SIDE, ShapeConfig, ShapeInferenceError, StackedAEParams, fallback_disk, infer_shape,
                        ring_label, train_shape_net)
from .sparse_ae import SparsityConfig, export_filters, sample_patches, train_ae

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; the message starts with the stage name."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"{stage}: {msg}")
        self.stage = stage


@dataclass
class TrainConfig:
    """Plain key=value training configuration.

    Either ``data_dir`` (study directories) or the ``phantom_*`` keys define
    the training set. Iteration caps apply per optimization stage.
    """

    seed: int = 0
    data_dir: str = ""
    phantom_count: int = 200
    phantom_seed: int = 1
    phantom_papillary_prob: float = 0.5
    # sparse autoencoder / filters
    n_patches: int = 10000
    patch_size: int = 11
    n_filters: int = 100
    rho: float = 0.1
    beta: float = 3.0
    ae_lambda: float = 1e-4
    ae_iters: int = 400
    # detector
    pool: int = POOL
    roi_side: int = ROI_SIDE
    detector_lambda: float = 1e-4
    detector_output_iters: int = 200
    detector_output_images: int = 512
    detector_finetune_iters: int = 20
    detector_finetune_images: int = 256
    # shape networks
    shape_pretrain_lambda: float = 3e-3
    shape_lambda: float = 1e-4
    shape_pretrain_iters: int = 400
    shape_output_iters: int = 400
    shape_finetune_iters: int = 400
    # augmentation
    augment_factor: int = 10
    max_translate_px: float = 10.0
    max_rotate_deg: float = 15.0
    pca_intensity_scale: float = 0.1
    # level set
    alpha1: float = 1.0
    alpha2: float = 0.5
    alpha3: float = 0.25
    optimizer: str = "lbfgs"

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            conv = {"int": int, "float": float, "str": str}[kinds[key]]
            try:
                out[key] = conv(raw)
            except ValueError:
                raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kinds[key]}") from None
        return cls(**out)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(read_keyvalue(path))

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in dataclasses.asdict(self).items()}

    def optim(self, iters: int, memory: int = 10) -> OptimConfig:
        return OptimConfig(method=self.optimizer, max_iter=iters, memory=memory)

    @property
    def weights(self) -> EnergyWeights:
        return EnergyWeights(self.alpha1, self.alpha2, self.alpha3)


@dataclass
class TrainedSystem:
    detector: DetectorParams
    shape_large: StackedAEParams
    shape_small: StackedAEParams
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    config: dict = field(default_factory=dict)
    area_threshold: float = 0.0
    roi_side: int = ROI_SIDE
    pool: int = POOL

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"roi_side": self.roi_side, "pool": self.pool}
        save_params(d / "detector", "detector", param_arrays(self.detector), meta)
        save_params(d / "shape_large", "shape_net", param_arrays(self.shape_large))
        save_params(d / "shape_small", "shape_net", param_arrays(self.shape_small))
        write_keyvalue(d / "system.txt", {
            "alpha1": repr(self.weights.alpha1), "alpha2": repr(self.weights.alpha2),
            "alpha3": repr(self.weights.alpha3), "area_threshold": repr(self.area_threshold),
            "roi_side": self.roi_side, "pool": self.pool,
        })
        write_keyvalue(d / "config.txt", self.config)
        return d

    @classmethod
    def load(cls, directory) -> "TrainedSystem":
        d = Path(directory)
        try:
            det, _ = load_params(d / "detector", "detector")
            large, _ = load_params(d / "shape_large", "shape_net")
            small, _ = load_params(d / "shape_small", "shape_net")
            sysmeta = read_keyvalue(d / "system.txt")
        except (OSError, KeyError, ValueError) as exc:
            raise LoadError(f"{d}: cannot load trained system ({exc})") from None
        cfg = read_keyvalue(d / "config.txt") if (d / "config.txt").exists() else {}
        return cls(DetectorParams(**det), StackedAEParams(**large), StackedAEParams(**small),
                   EnergyWeights(float(sysmeta["alpha1"]), float(sysmeta["alpha2"]), float(sysmeta["alpha3"])),
                   cfg, float(sysmeta["area_threshold"]), int(sysmeta["roi_side"]), int(sysmeta["pool"]))


def bundle_digest(directory) -> str:
    """SHA-256 over every file of a saved bundle, in name order."""
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# training


def training_records(cfg: TrainConfig) -> list[StudyRecord]:
    if cfg.data_dir:
        return load_studies(cfg.data_dir)
    return generate_phantoms(PhantomConfig(count=cfg.phantom_count, seed=cfg.phantom_seed,
                                           papillary_prob=cfg.phantom_papillary_prob))


def roi_sample(image, contour_points, center, roi_side: int = ROI_SIDE, side: int = SIDE):
    """ROI around ``center`` resized to ``side``; the contour is mapped along.

    Returns ``(input_vector, ring_label_vector)``.
    """
    c = crop(image, center, roi_side)
    sub = resample(c.image, side, side, "bilinear")
    pts = map_coords(c.from_source(contour_points), (roi_side, roi_side), (side, side))
    return sub.ravel(), ring_label(pts, side).ravel().astype(np.float64)


def _log_stage(rows: list, stage: str, history) -> None:
    rows.extend((stage, i, float(c)) for i, c in enumerate(history))


def train_system(records, cfg: TrainConfig, log_rows: list | None = None) -> TrainedSystem:
    """Run all offline training stages; any failure raises ``StageError``."""
    rows = log_rows if log_rows is not None else []
    samples = samples_from(records)
    if not samples:
        raise StageError("data", "no annotated slices in the training set")
    rng = np.random.default_rng(cfg.seed)

    def stage(name, fn, *args, **kw):
        log.info("stage %s", name)
        try:
            return fn(*args, **kw)
        except (TrainingError, ValueError, ArithmeticError) as exc:
            raise StageError(name, str(exc)) from exc

    inputs = np.stack([prepare_input(s.image) for s in samples])
    centers = [polygon_centroid(s.contour.points) for s in samples]
    labels = np.stack([make_roi_label(c, cfg.roi_side, OUT_SIDE, s.image.shape[0]).vector
                       for c, s in zip(centers, samples)])

    patches = stage("patches", sample_patches, inputs, cfg.n_patches, cfg.patch_size, seed=cfg.seed)
    hist: list = []
    ae = stage("sparse_ae", train_ae, patches, SparsityConfig(cfg.rho, cfg.beta, cfg.ae_lambda, cfg.optim(cfg.ae_iters)),
               n_hidden=cfg.n_filters, seed=cfg.seed, history=hist)
    _log_stage(rows, "sparse_ae", hist)
    filters, b0 = export_filters(ae, cfg.patch_size)

    m = (INPUT_SIDE - cfg.patch_size + 1) // cfg.pool
    det = init_output_layer(filters, b0, cfg.n_filters * m * m, OUT_SIDE * OUT_SIDE, rng)
    # the 1024-wide output layer dominates training cost, so both detector stages see subsets
    sub = _subset(rng, len(samples), cfg.detector_output_images)
    hist = []
    # 8.3M weights: a short L-BFGS history keeps the optimizer workspace under 1 GB
    det = stage("detector_output", pretrain_output_layer, det, inputs[sub], labels[sub], cfg.detector_lambda,
                cfg.optim(cfg.detector_output_iters, memory=5), cfg.pool, history=hist)
    _log_stage(rows, "detector_output", hist)
    if cfg.detector_finetune_iters > 0:
        idx = _subset(rng, len(samples), cfg.detector_finetune_images)
        hist = []
        det = stage("detector_finetune", finetune_detector, det, inputs[idx], labels[idx], cfg.detector_lambda,
                    cfg.optim(cfg.detector_finetune_iters, memory=5), cfg.pool, history=hist)
        _log_stage(rows, "detector_finetune", hist)

    groups = stage("split", split_contour_groups, records)
    shape_cfg = ShapeConfig(pretrain=SparsityConfig(cfg.rho, cfg.beta, cfg.shape_pretrain_lambda,
                                                    cfg.optim(cfg.shape_pretrain_iters)),
                            lam=cfg.shape_lambda, output_optim=cfg.optim(cfg.shape_output_iters),
                            finetune_optim=cfg.optim(cfg.shape_finetune_iters))
    aug = AugmentConfig(factor=cfg.augment_factor, max_translate_px=cfg.max_translate_px,
                        max_rotate_deg=cfg.max_rotate_deg, pca_intensity_scale=cfg.pca_intensity_scale,
                        seed=cfg.seed)
    nets = {}
    for g, name in enumerate(("large", "small")):
        group = getattr(groups, name)
        if not group:
            raise StageError(f"shape_{name}", "empty contour group")
        group = stage(f"augment_{name}", augment_dataset, group, aug)
        X, L = shape_training_set(det, group, cfg.roi_side, cfg.pool)
        h: dict = {}
        nets[name] = stage(f"shape_{name}", train_shape_net, X, L, shape_cfg, seed=cfg.seed + 10 * (g + 1), history=h)
        for part in ("pretrain", "output", "finetune"):
            _log_stage(rows, f"shape_{name}_{part}", h.get(part, []))
    return TrainedSystem(det, nets["large"], nets["small"], cfg.weights, cfg.to_dict(), groups.threshold,
                         cfg.roi_side, cfg.pool)


def _subset(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    if k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def shape_training_set(det: DetectorParams, samples: list[Sample], roi_side: int = ROI_SIDE, pool: int = POOL):
    """Shape-network inputs and ring labels.

    ROIs are cut around the trained detector's own center estimates so the
    network sees the same framing it will meet at inference.
    """
    inputs = np.stack([prepare_input(s.image) for s in samples])
    y = detector_forward(det, inputs, pool)
    X, L = [], []
    for s, yc in zip(samples, y):
        center = mask_center(yc, s.image.shape)
        x, lab = roi_sample(s.image, s.contour.points, center, roi_side)
        X.append(x)
        L.append(lab)
    return np.stack(X), np.stack(L)


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iteration", "cost"])
        for stage, it, cost in rows:
            w.writerow([stage, it, repr(cost)])


def cmd_train(config_path, out_dir, seed: int | None = None) -> TrainedSystem:
    cfg = TrainConfig.from_file(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    records = training_records(cfg)
    rows: list = []
    system = train_system(records, cfg, rows)
    out = system.save(out_dir)
    write_training_log(out / "training_log.csv", rows)
    return system


# --------------------------------------------------------------------------
# segmentation


@dataclass
class SliceResult:
    index: int
    contour: Contour | None = None
    network: str = ""
    fallback: bool = False
    error: str = ""
    trace: list = field(default_factory=list)


def choose_network(system: TrainedSystem, image, crop_image, index: int, n: int, rule: str = "position") -> str:
    if rule == "position":
        return select_network(index, n)
    if rule == "area":
        # run the large network; switch when its region is smaller than the split threshold
        try:
            inf = infer_shape(system.shape_large, crop_image)
        except ShapeInferenceError:
            return "large"
        scale = (system.roi_side / SIDE) ** 2
        return "small" if inf.filled.sum() * scale < system.area_threshold else "large"
    raise ValueError(f"unknown network rule {rule!r}")


def segment_slice(system: TrainedSystem, image, index: int, n: int, spacing_mm: float = 1.0,
                  rule: str = "position", evolution: EvolutionConfig | None = None,
                  trace: bool = False) -> SliceResult:
    res = SliceResult(index)
    evolution = evolution or EvolutionConfig()
    y = detector_forward(system.detector, prepare_input(image), system.pool)
    center = mask_center(y, np.shape(image))
    c = crop(image, center, system.roi_side)
    res.network = choose_network(system, image, c.image, index, n, rule)
    params = system.shape_large if res.network == "large" else system.shape_small
    try:
        prior = infer_shape(params, c.image).filled
    except ShapeInferenceError as exc:
        log.warning("slice %d: %s; using fallback disk", index, exc)
        prior, res.fallback = fallback_disk(), True
    rows = [] if trace else None
    try:
        contour, _ = segment(c.image, prior, system.weights, evolution, spacing_mm, trace=rows)
    except (NoContourError, ValueError, FloatingPointError) as exc:
        res.error = f"level set: {exc}"
        return res
    res.contour = Contour(c.to_source(contour.points), spacing_mm)
    res.trace = rows or []
    return res


def _threads(n):
    return max(int(n or 1), 1)


def segment_study(system: TrainedSystem, record: StudyRecord, out_dir, rule: str = "position",
                  threads: int = 1, debug_trace: bool = False) -> list[SliceResult]:
    """Segment every slice, align the stack and write all outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(record)

    def work(i):
        try:
            return segment_slice(system, record.slices[i - 1].image, i, n, record.spacing_mm, rule,
                                 trace=debug_trace)
        except Exception as exc:  # recorded per slice, never fatal alone
            return SliceResult(i, error=f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        results = list(pool.map(work, range(1, n + 1)))
    ok = [r for r in results if r.contour is not None]
    if not ok:
        raise StageError("segment", f"study {record.id}: every slice failed")
    write_keyvalue(out / "metadata.txt", {
        "id": record.id, "patient": record.patient, "spacing_mm": repr(record.spacing_mm),
        "thickness_mm": repr(record.thickness_mm), "phase": record.phase, "pathology": record.pathology,
    })
    for r in ok:
        write_contour_csv(out / f"contour_{r.index}.csv", r.contour)
        img = np.array(record.slices[r.index - 1].image, dtype=np.float64)
        img[rasterize_ring(r.contour.points, img.shape, closed=True, thickness=0)] = 1.0
        write_pgm(out / f"overlay_{r.index}.pgm", img)
        if debug_trace:
            with open(out / f"trace_{r.index}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iteration", "energy", "length"])
                w.writerows((k, repr(e), repr(length)) for k, e, length in r.trace)
    aligned = alignment.align_stack([r.contour for r in ok])
    for r, c in zip(ok, aligned.contours):
        write_contour_csv(out / f"aligned_{r.index}.csv", c)
    alignment.write_alignment_report(out / "alignment.csv", aligned)
    with open(out / "slices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "status", "network", "fallback", "error"])
        for r in results:
            w.writerow([r.index, "ok" if r.contour is not None else "failed", r.network, int(r.fallback), r.error])
    return results


def cmd_segment(model_dir, study_dir, out_dir, rule: str = "position", threads: int = 1,
                debug_trace: bool = False) -> dict[str, list[SliceResult]]:
    system = TrainedSystem.load(model_dir)
    records = load_studies(study_dir)
    out = Path(out_dir)
    single = (Path(study_dir) / "metadata.txt").exists()
    done = {}
    for rec in records:
        target = out if single else out / Path(_safe(rec.id))
        done[rec.id] = segment_study(system, rec, target, rule, threads, debug_trace)
    return done


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


# --------------------------------------------------------------------------
# evaluation


def _auto_studies(root) -> dict[str, Path]:
    root = Path(root)
    dirs = [root] if (root / "metadata.txt").exists() else sorted(p for p in root.iterdir()
                                                                   if (p / "metadata.txt").exists())
    if not dirs:
        raise LoadError(f"{root}: no segmentation outputs found")
    return {read_keyvalue(d / "metadata.txt").get("id", d.name): d for d in dirs}


def evaluate_study(auto_dir, ref: StudyRecord, prefix: str = "contour", symmetric_apd: bool = False):
    """Per-slice metrics for every slice that has both contours; returns ``(indices, metrics, auto)``."""
    auto_dir = Path(auto_dir)
    idx, metrics, autos = [], [], {}
    for i, s in enumerate(ref.slices, 1):
        path = auto_dir / f"{prefix}_{i}.csv"
        if path.exists():
            autos[i] = read_contour_csv(path, ref.spacing_mm)
        if s.contour is None or i not in autos:
            continue
        idx.append(i)
        metrics.append(evaluation.slice_metrics(autos[i], s.contour, s.image.shape, symmetric_apd))
    return idx, metrics, autos


def evaluate_dirs(auto_root, ref_root, out_dir, prefix: str = "contour", symmetric_apd: bool = False,
                  threads: int = 1) -> dict:
    autos = _auto_studies(auto_root)
    refs = {r.id: r for r in load_studies(ref_root)}
    missing = sorted(set(refs) - set(autos))
    extra = sorted(set(autos) - set(refs))
    if missing or extra:
        raise LoadError(f"study ids do not match (missing outputs {missing}, unknown outputs {extra})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(refs)
    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        results = list(pool.map(lambda k: evaluate_study(autos[k], refs[k], prefix, symmetric_apd), ids))
    all_metrics, summary = [], {}
    for sid, (idx, metrics, _) in zip(ids, results):
        if metrics:
            evaluation.write_metrics_json(out / f"{_safe(sid)}_metrics.json", metrics, idx)
            evaluation.write_metrics_csv(out / f"{_safe(sid)}_metrics.csv", metrics, idx)
            summary[sid] = dataclasses.asdict(evaluation.study_metrics(metrics))
        all_metrics.extend(metrics)
    report = {"studies": summary,
              "overall": dataclasses.asdict(evaluation.study_metrics(all_metrics)) if all_metrics else None}
    report["clinical"] = _clinical(refs, dict(zip(ids, results)), out)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def _clinical(refs, results, out: Path) -> dict:
    """EDV/ESV/EF for patients with both phases, plus agreement across patients."""
    by_patient: dict[str, dict[str, str]] = {}
    for sid, rec in refs.items():
        by_patient.setdefault(rec.patient, {})[rec.phase.upper()] = sid
    rows = []
    for pid, phases in sorted(by_patient.items()):
        if not {"ED", "ES"} <= set(phases):
            continue
        ed, es = refs[phases["ED"]], refs[phases["ES"]]
        try:
            man = evaluation.clinical_indices([s.contour for s in ed.slices if s.contour is not None],
                                              [s.contour for s in es.slices if s.contour is not None],
                                              ed.thickness_mm, ed.spacing_mm)
            auto = evaluation.clinical_indices(list(results[phases["ED"]][2].values()),
                                               list(results[phases["ES"]][2].values()),
                                               ed.thickness_mm, ed.spacing_mm)
        except ValueError as exc:
            log.warning("patient %s: no clinical indices (%s)", pid, exc)
            continue
        rows.append((pid, auto, man))
    if not rows:
        return {}
    with open(out / "clinical.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient", "edv_auto", "esv_auto", "ef_auto", "edv_manual", "esv_manual", "ef_manual"])
        for pid, a, m in rows:
            w.writerow([pid, *(f"{v:.4f}" for v in (a.edv_ml, a.esv_ml, a.ef_pct, m.edv_ml, m.esv_ml, m.ef_pct))])
    res = {"patients": {pid: {"auto": dataclasses.asdict(a), "manual": dataclasses.asdict(m)} for pid, a, m in rows}}
    if len(rows) >= 3:
        for key in ("edv_ml", "esv_ml", "ef_pct"):
            av = [getattr(a, key) for _, a, _ in rows]
            mv = [getattr(m, key) for _, _, m in rows]
            try:
                res[key] = dataclasses.asdict(evaluation.agreement(av, mv))
            except evaluation.UndefinedMetricError as exc:
                log.warning("%s agreement undefined: %s", key, exc)
                continue
            evaluation.write_agreement_csv(out / f"agreement_{key}.csv", av, mv, [p for p, _, _ in rows])
    return res


def cmd_evaluate(auto_dir, ref_dir, out_dir, prefix: str = "contour", symmetric_apd: bool = False,
                 threads: int = 1) -> dict:
    return evaluate_dirs(auto_dir, ref_dir, out_dir, prefix, symmetric_apd, threads)


# --------------------------------------------------------------------------
# phantoms


def phantom_config(values: dict[str, str]) -> PhantomConfig:
    kinds = {f.name: f.type for f in dataclasses.fields(PhantomConfig)}
    out = {}
    for key, raw in values.items():
        if key not in kinds:
            raise ValueError(f"unknown phantom key {key!r}")
        kind = kinds[key]
        if kind.startswith("tuple"):
            parts = [p for p in raw.replace(",", " ").split() if p]
            conv = int if "int" in kind else float
            out[key] = tuple(conv(p) for p in parts)
        elif kind == "bool":
            out[key] = raw.strip().lower() in ("1", "true", "yes")
        else:
            out[key] = {"int": int, "float": float}[kind](raw)
    return PhantomConfig(**out)


def cmd_phantom(config_path, out_dir, seed: int | None = None) -> list[StudyRecord]:
    values = read_keyvalue(config_path) if config_path else {}
    cfg = phantom_config(values)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    records = generate_phantoms(cfg)
    out = Path(out_dir)
    for rec in records:
        save_study(rec, out / _safe(rec.id))
    return records

