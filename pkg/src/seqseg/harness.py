"""Experiment pipeline: generate -> propagate -> train (unet, full) -> evaluate / sweep.

Every step reads and writes artifacts below ``config.out_dir``::

    data/manifest.json, data/subject_XXX/{images.aosq,annotations.aolb,truth.aolb}
    propagated/subject_XXX.aolb, propagated/quality.csv
    checkpoints/unet.aock, checkpoints/full.aock, logs/train_<stage>.csv
    eval/<name>/metrics.csv, eval/<name>/area_series.csv,
    eval/comparison.csv, eval/paired_tests.csv, eval/plots/*.svg
    sweep/sweep.csv
    run_manifest.json
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from . import tensor as tc
from .clstm import SequenceModel, build_sequence_model, predict_sequence, predict_windowed, sequence_logits
from .errors import ConfigError, SeqSegError, ShapeError
from .labelprop import (PropagatedLabels, SparseAnnotations, WeightConfig, extract_window,
                        frame_distance, nearest_annotation, propagate, weighted_sequence_loss)
from .metrics import dice, evaluate_method
from .phantom import STRUCTURES, AugmentRanges, PhantomConfig, augment, generate_dataset
from .registration import RegConfig
from .tensor import Graph, Tensor
from .unet import Schedule, UNetConfig, UNetParams, build_unet, predict_frames, train_unet_static

logger = logging.getLogger(__name__)

DEFAULT_T_GRID = (5, 9, 13, 17, 21)
DEFAULT_R_GRID = (0.0, 0.1, 1.0, 10.0, 100.0)


class MissingArtifactError(SeqSegError, FileNotFoundError):
    """A pipeline step needs the output of an earlier command."""


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    n_subjects: int = 100
    train_fraction: float = 0.8
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    hidden: int = 16
    kernel: int = 3
    weights: WeightConfig = field(default_factory=WeightConfig)
    registration: RegConfig = field(default_factory=RegConfig)
    stage1: Schedule = field(default_factory=lambda: Schedule(iterations=500, batch_size=4))
    stage2: Schedule = field(default_factory=lambda: Schedule(iterations=500, batch_size=1))
    augment: bool = True
    augment_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    cyclic: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {
            "phantom": PhantomConfig.from_dict,
            "unet": lambda x: UNetConfig(**x),
            "weights": lambda x: WeightConfig(**x),
            "registration": lambda x: RegConfig(**x),
            "stage1": lambda x: Schedule(**x),
            "stage2": lambda x: Schedule(**x),
            "augment_ranges": lambda x: AugmentRanges(**{k: tuple(v) if isinstance(v, list) else v
                                                         for k, v in x.items()}),
        }
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, build in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = build(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(io.read_json(path))

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def hash(self) -> str:
        return io.config_hash(self.to_dict())


# ---------------------------------------------------------------- data access

@dataclass
class Subject:
    id: str
    split: str
    images: np.ndarray
    spacing: tuple[float, float]
    annotations: SparseAnnotations
    truth: np.ndarray | None


def load_manifest(cfg: ExperimentConfig) -> dict:
    path = cfg.out / "data" / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run the 'generate' command first")
    manifest = io.read_json(path)
    io.validate_manifest(manifest)
    return manifest


def load_subjects(cfg: ExperimentConfig, split: str | None = None) -> list[Subject]:
    manifest = load_manifest(cfg)
    root = cfg.out / "data"
    out = []
    for e in manifest["subjects"]:
        if split is not None and e["split"] != split:
            continue
        images, spacing = io.read_sequence(root / e["images"])
        sparse, human, _ = io.read_labels(root / e["annotations"])
        truth, _, _ = io.read_labels(root / e["truth"])
        ann = SparseAnnotations({int(t): sparse[t] for t in np.flatnonzero(human)}, len(images), cfg.cyclic)
        out.append(Subject(e["id"], e["split"], images, spacing, ann, truth))
    return out


def _propagated_path(cfg, sid) -> Path:
    return cfg.out / "propagated" / f"{sid}.aolb"


def load_propagated(cfg: ExperimentConfig, subject: Subject) -> PropagatedLabels:
    path = _propagated_path(cfg, subject.id)
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run the 'propagate' command first")
    labels, human, _ = io.read_labels(path)
    ann = subject.annotations
    n = ann.n_frames
    source = np.array([nearest_annotation(t, ann) for t in range(n)])
    distance = np.array([frame_distance(t, s, n, ann.cyclic) for t, s in enumerate(source)])
    return PropagatedLabels(labels, source, distance, human)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}" if np.isfinite(v) else "nan"
    return v


def _record_run(cfg: ExperimentConfig, command: str, outputs: list[str], extra: dict | None = None) -> None:
    path = cfg.out / "run_manifest.json"
    manifest = io.read_json(path) if path.exists() else {"commands": {}}
    manifest["commands"][command] = {
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "outputs": sorted(outputs),
        **(extra or {}),
    }
    manifest["config"] = cfg.to_dict()
    cfg.out.mkdir(parents=True, exist_ok=True)
    io.write_json(path, manifest)


# ---------------------------------------------------------------- generate / propagate

def run_generate(cfg: ExperimentConfig) -> dict:
    manifest = generate_dataset(cfg.n_subjects, cfg.out / "data", cfg.phantom, cfg.seed, cfg.train_fraction)
    _record_run(cfg, "generate", ["data/manifest.json"])
    return manifest


def run_propagate(cfg: ExperimentConfig, splits=("train", "test")) -> dict[int, dict[str, float]]:
    """Propagate annotations for every subject; returns mean Dice per distance (when truth exists)."""
    subjects = [s for s in load_subjects(cfg) if s.split in splits]
    (cfg.out / "propagated").mkdir(parents=True, exist_ok=True)
    per_dist: dict[tuple[int, str], list[float]] = {}
    for subj in subjects:
        prop = propagate(subj.images, subj.annotations, cfg.registration, cfg.unet.num_classes)
        for w in prop.warnings:
            logger.warning("%s: %s", subj.id, w)
        io.write_labels(_propagated_path(cfg, subj.id), prop.labels, prop.human, cfg.unet.num_classes)
        if subj.truth is not None:
            for t in range(len(prop.labels)):
                for name, cid in STRUCTURES.items():
                    per_dist.setdefault((int(prop.distance[t]), name), []).append(
                        dice(prop.labels[t] == cid, subj.truth[t] == cid))
    rows = [[d, name, float(np.mean(v)), len(v)] for (d, name), v in sorted(per_dist.items())]
    _write_csv(cfg.out / "propagated" / "quality.csv", ["distance", "structure", "mean_dice", "n"], rows)
    _record_run(cfg, "propagate", ["propagated/quality.csv"])
    table: dict[int, dict[str, float]] = {}
    for d, name, m, _ in rows:
        table.setdefault(d, {})[name] = m
    return table


# ---------------------------------------------------------------- checkpoints

def _model_config(cfg: ExperimentConfig, kind: str, weights: WeightConfig | None = None) -> dict:
    out = {"kind": kind, "unet": asdict(cfg.unet)}
    if kind == "full":
        out.update(hidden=cfg.hidden, kernel=cfg.kernel, weights=asdict(weights or cfg.weights))
    return out


def save_model(path, model: UNetParams | SequenceModel, config: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    named = model.named_tensors() if isinstance(model, SequenceModel) else model.tensors
    io.save_checkpoint(path, named, config)


def load_model(path) -> tuple[UNetParams | SequenceModel, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found; run the 'train' command first")
    ck = io.load_checkpoint(path)
    conf = ck.config
    unet = build_unet(UNetConfig(**conf["unet"]))
    model = unet if conf["kind"] == "unet" else build_sequence_model(unet, conf["hidden"], conf["kernel"])
    named = model.named_tensors() if isinstance(model, SequenceModel) else (
        {f"{k}": v for k, v in unet.tensors.items()})
    if set(named) != set(ck.tensors):
        raise ShapeError(f"{path}: tensor names do not match the configured model")
    for name, t in named.items():
        arr = ck.tensors[name]
        if arr.shape != t.shape:
            raise ShapeError(f"{path}: tensor {name} has the wrong shape", arr.shape, t.shape)
        t.data[...] = arr
    return model, conf


# ---------------------------------------------------------------- training

def _augment_fn(cfg: ExperimentConfig):
    if not cfg.augment:
        return None
    ranges = cfg.augment_ranges
    return lambda x, y, rng: augment(x, y, ranges.sample(rng))


def train_stage_unet(cfg: ExperimentConfig, subjects: list[Subject]) -> tuple[UNetParams, list[dict]]:
    images, labels = [], []
    for s in subjects:
        for t, lab in sorted(s.annotations.labels.items()):
            images.append(s.images[t])
            labels.append(lab)
    params = build_unet(cfg.unet, seed=cfg.seed)
    return train_unet_static(params, np.stack(images), np.stack(labels), cfg.stage1,
                             seed=cfg.seed + 11, augment=_augment_fn(cfg))


def train_stage_full(cfg: ExperimentConfig, unet: UNetParams, subjects: list[Subject],
                     propagated: list[PropagatedLabels], weights: WeightConfig | None = None
                     ) -> tuple[SequenceModel, list[dict]]:
    """End-to-end fit on windows of ``T`` frames centred on annotated frames."""
    weights = weights or cfg.weights
    model = build_sequence_model(unet, cfg.hidden, cfg.kernel, seed=cfg.seed)
    plist = model.parameters()
    state = tc.AdamState.fresh(plist)
    rng = np.random.default_rng(cfg.seed + 23)
    aug = _augment_fn(cfg)
    sched = cfg.stage2
    centers = [(i, c) for i, s in enumerate(subjects) for c in s.annotations.frames]
    if not centers:
        raise ConfigError("no annotated frames to centre training windows on")
    log = []
    for it in range(sched.iterations):
        picks = rng.choice(len(centers), size=min(sched.batch_size, len(centers)), replace=False)
        lr = sched.lr(it)
        for p in plist:
            p.zero_grad()
        losses = []
        for k in picks:
            i, c = centers[k]
            win = extract_window(subjects[i].images, propagated[i], c, weights.R, cfg.cyclic)
            imgs, labs = win.images, win.labels
            if aug is not None:
                imgs, labs = aug(imgs, labs, rng)
            with Graph() as g:
                logits = sequence_logits(model, Tensor(imgs[:, None]))
                loss = weighted_sequence_loss(logits, labs, win.distance, weights)
                if len(picks) > 1:
                    loss = tc.scale(loss, 1.0 / len(picks))
            tc.backward(loss, g)
            losses.append(loss.item())
        tc.adam_step(plist, state, lr)
        log.append({"iteration": it, "lr": lr, "loss": float(np.sum(losses))})
    return model, log


def run_train(cfg: ExperimentConfig, stage: str) -> Path:
    ck_dir = cfg.out / "checkpoints"
    train = load_subjects(cfg, "train")
    if not train:
        raise ConfigError("training split is empty")
    if stage == "unet":
        params, log = train_stage_unet(cfg, train)
        path = ck_dir / "unet.aock"
        save_model(path, params, _model_config(cfg, "unet"))
    elif stage == "full":
        unet_path = ck_dir / "unet.aock"
        if not unet_path.exists():
            raise MissingArtifactError(f"{unet_path} not found; run 'train --stage unet' first")
        unet, _ = load_model(unet_path)
        props = [load_propagated(cfg, s) for s in train]
        model, log = train_stage_full(cfg, unet, train, props)
        path = ck_dir / "full.aock"
        save_model(path, model, _model_config(cfg, "full"))
    else:
        raise ConfigError(f"unknown training stage {stage!r}; expected 'unet' or 'full'")
    _write_csv(cfg.out / "logs" / f"train_{stage}.csv", ["iteration", "lr", "loss"],
               [[r["iteration"], r["lr"], r["loss"]] for r in log])
    _record_run(cfg, f"train_{stage}", [str(path.relative_to(cfg.out)), f"logs/train_{stage}.csv"])
    return path


# ---------------------------------------------------------------- evaluation

def predict_labels(model: UNetParams | SequenceModel, images: np.ndarray, radius: int = 0,
                   cyclic: bool = True) -> np.ndarray:
    """Hard label maps for a whole sequence.

    The recurrent model reads each frame off its own ``2*radius+1`` window, the
    same shape it was trained on; ``radius=0`` runs it once over the whole sequence.
    """
    if isinstance(model, SequenceModel):
        if radius:
            probs = predict_windowed(images, model, radius, cyclic)
        else:
            probs = predict_sequence(images, model)
    else:
        probs = predict_frames(model, images)
    return probs.argmax(axis=1).astype(np.uint8)


METRIC_COLUMNS = ("dice", "mcd_mm", "area_err_mm2", "mean_curvature")


def evaluate_model(cfg: ExperimentConfig, model, subjects: list[Subject], radius: int | None = None) -> dict:
    """Per-subject metrics, area series and predictions for one model."""
    if radius is None:
        radius = cfg.weights.R
    results = {}
    for s in subjects:
        pred = predict_labels(model, s.images, radius, cfg.cyclic)
        rep = evaluate_method(pred, s.annotations.labels, s.spacing, STRUCTURES, s.truth)
        results[s.id] = rep
    return results


def _metric_rows(results: dict) -> list[list]:
    rows = []
    for sid, rep in results.items():
        for name in STRUCTURES:
            r = rep.row(name)
            rows.append([sid, name] + [r[c] for c in METRIC_COLUMNS])
    return rows


def _area_rows(results: dict) -> list[list]:
    rows = []
    for sid, rep in results.items():
        for name in STRUCTURES:
            for t, a in enumerate(rep.structures[name].area_series):
                rows.append([sid, name, t, float(a)])
    return rows


def write_metrics(out_dir: Path, results: dict) -> None:
    _write_csv(out_dir / "metrics.csv", ["subject", "structure", *METRIC_COLUMNS], _metric_rows(results))
    _write_csv(out_dir / "area_series.csv", ["subject", "structure", "frame", "area_mm2"], _area_rows(results))


def summarize(results: dict) -> dict[str, float]:
    """Mean of every metric per structure, keyed like ``dice_aao``."""
    out = {}
    for c in METRIC_COLUMNS:
        for name in STRUCTURES:
            vals = np.array([rep.row(name)[c] for rep in results.values()], dtype=float)
            finite = vals[np.isfinite(vals)]
            out[f"{c}_{name.lower()}"] = float(finite.mean()) if finite.size else float("nan")
    return out


def paired_tests(proposed: dict, baseline: dict) -> list[dict]:
    from scipy import stats

    rows = []
    ids = sorted(set(proposed) & set(baseline))
    for c in METRIC_COLUMNS:
        for name in STRUCTURES:
            a = np.array([proposed[i].row(name)[c] for i in ids])
            b = np.array([baseline[i].row(name)[c] for i in ids])
            ok = np.isfinite(a) & np.isfinite(b)
            diff = a[ok] - b[ok]
            if ok.sum() >= 2 and np.any(diff != 0):
                t, p = stats.ttest_rel(a[ok], b[ok])
            else:
                t, p = 0.0, 1.0
            mean = (lambda v: float(v.mean()) if v.size else float("nan"))
            rows.append({"metric": c, "structure": name, "mean_baseline": mean(b[ok]),
                         "mean_proposed": mean(a[ok]), "mean_diff": mean(diff),
                         "t": float(t), "p": float(p), "n": int(ok.sum())})
    return rows


TABLE_COLUMNS = [f"{c}_{s.lower()}" for c in METRIC_COLUMNS for s in STRUCTURES]


def comparison_rows(named: dict[str, dict]) -> list[list]:
    """Rows ``method, dice_aao, dice_dao, mcd_aao, ..., mean_curvature_dao``."""
    rows = []
    for method, results in named.items():
        summ = summarize(results)
        rows.append([method] + [summ[c] for c in TABLE_COLUMNS])
    return rows


def plot_area_curves(path: Path, subject: Subject, curves: dict[str, dict], spacing) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "seqseg"
    fig, axes = plt.subplots(1, len(STRUCTURES), figsize=(9, 3.2))
    for ax, (name, cid) in zip(axes, STRUCTURES.items()):
        for method, rep in curves.items():
            ax.plot(rep.structures[name].area_series, label=method)
        frames = sorted(subject.annotations.labels)
        ref = [float((subject.annotations.labels[t] == cid).sum()) * spacing[0] * spacing[1] for t in frames]
        ax.plot(frames, ref, "o", color="green", label="annotated")
        ax.set_title(name)
        ax.set_xlabel("frame")
        ax.set_ylabel("area (mm$^2$)")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def run_evaluate(cfg: ExperimentConfig, checkpoint=None, baseline=None, plots: int = 3) -> dict:
    """Evaluate on the test split; with a baseline, also write the comparison and paired tests."""
    checkpoint = Path(checkpoint) if checkpoint else cfg.out / "checkpoints" / "full.aock"
    test = load_subjects(cfg, "test")
    if not test:
        raise ConfigError("test split is empty")
    model, conf = load_model(checkpoint)
    if conf["kind"] == "full":
        # prediction windows follow the window the checkpoint was trained with
        cfg = replace(cfg, weights=WeightConfig(**conf["weights"]))
    named = {"proposed" if conf["kind"] == "full" else "unet": evaluate_model(cfg, model, test)}
    if baseline:
        bmodel, _ = load_model(baseline)
        named["baseline"] = evaluate_model(cfg, bmodel, test)
    eval_dir = cfg.out / "eval"
    outputs = []
    for name, res in named.items():
        write_metrics(eval_dir / name, res)
        outputs += [f"eval/{name}/metrics.csv", f"eval/{name}/area_series.csv"]
    _write_csv(eval_dir / "comparison.csv", ["method", *TABLE_COLUMNS], comparison_rows(named))
    outputs.append("eval/comparison.csv")
    out = {"summary": {k: summarize(v) for k, v in named.items()}, "results": named}
    if baseline:
        first = next(iter(named))
        tests = paired_tests(named[first], named["baseline"])
        cols = ["metric", "structure", "mean_baseline", "mean_proposed", "mean_diff", "t", "p", "n"]
        _write_csv(eval_dir / "paired_tests.csv", cols, [[r[c] for c in cols] for r in tests])
        outputs.append("eval/paired_tests.csv")
        out["paired_tests"] = tests
    for s in test[:plots]:
        p = eval_dir / "plots" / f"{s.id}_area.svg"
        plot_area_curves(p, s, {k: v[s.id] for k, v in named.items()}, s.spacing)
        outputs.append(str(p.relative_to(cfg.out)))
    _record_run(cfg, "evaluate", outputs, {"checkpoint": str(checkpoint), "baseline": str(baseline or "")})
    return out


# ---------------------------------------------------------------- sweep

def sweep_cells(T_values=None, r_values=None) -> list[tuple[int, float]]:
    """Cartesian grid when either list is given, else the two one-dimensional default grids."""
    if T_values is None and r_values is None:
        cells = [(T, 0.1) for T in DEFAULT_T_GRID] + [(9, r) for r in DEFAULT_R_GRID]
    else:
        cells = [(T, r) for T in (T_values or [9]) for r in (r_values or [0.1])]
    seen, out = set(), []
    for T, r in cells:
        if T % 2 == 0 or T < 3:
            raise ConfigError(f"window length T must be odd and >= 3, got {T}")
        if r < 0:
            raise ConfigError(f"exponent r must be >= 0, got {r}")
        if (T, float(r)) not in seen:
            seen.add((T, float(r)))
            out.append((int(T), float(r)))
    return out


def run_sweep(cfg: ExperimentConfig, T_values=None, r_values=None) -> list[dict]:
    """Train and evaluate one recurrent model per (T, r) cell from the shared stage-1 U-Net."""
    cells = sweep_cells(T_values, r_values)
    unet_path = cfg.out / "checkpoints" / "unet.aock"
    if not unet_path.exists():
        raise MissingArtifactError(f"{unet_path} not found; run 'train --stage unet' first")
    train = load_subjects(cfg, "train")
    test = load_subjects(cfg, "test")
    props = [load_propagated(cfg, s) for s in train]
    rows = []
    for T, r in cells:
        unet, _ = load_model(unet_path)
        wcfg = WeightConfig.from_window(T, r)
        model, _ = train_stage_full(cfg, unet, train, props, wcfg)
        summ = summarize(evaluate_model(replace(cfg, weights=wcfg), model, test))
        rows.append({"T": T, "r": r, "dice_aao": summ["dice_aao"], "dice_dao": summ["dice_dao"]})
        logger.info("sweep T=%d r=%g: %.4f / %.4f", T, r, summ["dice_aao"], summ["dice_dao"])
    _write_csv(cfg.out / "sweep" / "sweep.csv", ["T", "r", "dice_aao", "dice_dao"],
               [[d["T"], d["r"], d["dice_aao"], d["dice_dao"]] for d in rows])
    _record_run(cfg, "sweep", ["sweep/sweep.csv"], {"cells": [list(c) for c in cells]})
    return rows
