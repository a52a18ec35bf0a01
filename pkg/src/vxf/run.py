"""Training, evaluation, inference and dataset synthesis drivers."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vxf import __version__
from vxf.checkpoint import load_checkpoint, save_checkpoint
from vxf.config import RunConfig
from vxf.inference import aggregate, plan_windows, worker_count
from vxf.metrics import class_metrics, dice_score, summarize, write_report
from vxf.model import SegmentationModel, query_probabilities
from vxf.optim import clip_grad_norm, cosine_lr, make_optimizer
from vxf.phantoms import PhantomSpec, generate, multi_organ_spec, vessel_tumor_spec
from vxf.tensor import NonFiniteError, precision
from vxf.volume import Volume, read_volume, write_volume

MODEL_FILE = "model.vxf"
OPTIM_FILE = "optim.vxf"
MANIFEST_FILE = "run.json"
LOSS_LOG = "loss.csv"


class TrainingError(RuntimeError):
    """Training aborted; ``step`` is the failing step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass
class Case:
    image: np.ndarray  # [D, H, W, 1] float32
    labels: np.ndarray  # [D, H, W] int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = ""


# ----------------------------------------------------------------------- data
def task_spec(task: str, seed: int, extents=(32, 32, 32)) -> PhantomSpec:
    if task == "vessel_tumor":
        return vessel_tumor_spec(seed, extents)
    if task == "multi_organ":
        return multi_organ_spec(seed, extents)
    raise ValueError(f"unknown task {task!r}")


def synth_cases(task: str, n: int, first_seed: int, extents=(32, 32, 32)) -> list[Case]:
    def one(i):
        image, label = generate(task_spec(task, first_seed + i, extents))
        return Case(image.data, label.labels(), image.spacing, f"case_{i:03d}")

    workers = min(worker_count(), max(n, 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]


def write_dataset(out_dir, cases: list[Case], spec_info: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for c in cases:
        img = write_volume(out / f"{c.name}_image.json", Volume(c.image, c.spacing))
        lab = write_volume(out / f"{c.name}_label.json", Volume(c.labels.astype(np.float32), c.spacing))
        pairs.append({"name": c.name, "image": img.name, "label": lab.name})
    manifest = {"pairs": pairs, "spec": spec_info or {}}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_dataset(directory) -> list[Case]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    cases = []
    for pair in manifest["pairs"]:
        img = read_volume(directory / pair["image"])
        lab = read_volume(directory / pair["label"])
        if img.extents != lab.extents:
            raise ValueError(f"{pair['name']}: image {img.extents} and label {lab.extents} differ")
        cases.append(Case(img.data, lab.labels(), img.spacing, pair["name"]))
    return cases


def training_cases(cfg: RunConfig) -> list[Case]:
    if cfg.train_dir:
        return read_dataset(cfg.train_dir)
    return synth_cases(cfg.task, cfg.n_train, cfg.data_seed, tuple(cfg.crop))


def validation_cases(cfg: RunConfig) -> list[Case]:
    if cfg.val_dir:
        return read_dataset(cfg.val_dir)
    return synth_cases(cfg.task, cfg.n_val, cfg.data_seed + 100_000, tuple(cfg.crop))


def sample_batch(cases: list[Case], cfg: RunConfig, step: int):
    """Batch for ``step``; depends only on ``(seed, step)`` so runs can resume exactly."""
    rng = np.random.default_rng([cfg.seed, step])
    batch = []
    for idx in rng.integers(len(cases), size=cfg.batch_size):
        case = cases[int(idx)]
        image, labels = case.image, case.labels
        crop = tuple(cfg.crop)
        pads = [(0, max(c - n, 0)) for n, c in zip(labels.shape, crop)]
        if any(p for _, p in pads):
            image = np.pad(image, pads + [(0, 0)], mode="reflect")
            labels = np.pad(labels, pads, mode="reflect")
        origin = [int(rng.integers(n - c + 1)) for n, c in zip(labels.shape, crop)]
        sl = tuple(slice(o, o + c) for o, c in zip(origin, crop))
        image, labels = image[sl], labels[sl]
        if cfg.flip_augment:
            for axis in range(3):
                if rng.random() < 0.5:
                    image = np.flip(image, axis)
                    labels = np.flip(labels, axis)
        batch.append((np.ascontiguousarray(image), np.ascontiguousarray(labels)))
    return batch


# ---------------------------------------------------------------- persistence
def build_model(cfg: RunConfig) -> SegmentationModel:
    with precision(cfg.precision):
        return SegmentationModel(cfg.model_config(), seed=cfg.seed)


def shape_manifest(model: SegmentationModel) -> dict[str, list[int]]:
    return {name: list(p.shape) for name, p in model.state_dict().items()}


def save_run(out_dir, cfg: RunConfig, model, optimizer, step: int, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exact = cfg.precision == "float64"
    save_checkpoint(out / MODEL_FILE, {k: p.data for k, p in model.state_dict().items()}, exact=exact)
    if optimizer is not None:
        save_checkpoint(out / OPTIM_FILE, optimizer.state(), exact=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "step": step,
        "parameters": shape_manifest(model),
        "num_parameters": model.num_parameters(),
        "version": __version__,
    }
    manifest.update(extra or {})
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(cfg: RunConfig, checkpoint) -> SegmentationModel:
    """Model for ``cfg`` with weights from ``checkpoint`` (a run directory or a ``.vxf`` file)."""
    path = Path(checkpoint)
    if path.is_dir():
        path = path / MODEL_FILE
    model = build_model(cfg)
    state = load_checkpoint(path)
    expected = shape_manifest(model)
    got = {k: list(v.shape) for k, v in state.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise IncompatibleCheckpoint(f"checkpoint does not match the configured model: missing={missing[:4]} "
                                     f"unexpected={extra[:4]} shape_mismatch={wrong[:4]}")
    model.load_state_dict(state)
    return model


# ------------------------------------------------------------------- training
def train(cfg: RunConfig, resume: str | None = None, cases: list[Case] | None = None,
          max_seconds: float | None = None, stop_fn=None) -> dict:
    """Train ``cfg``; writes checkpoint, optimizer state, loss log and run manifest to ``cfg.out_dir``.

    ``stop_fn(step, model)`` may return True to stop early (checked every
    ``log_every`` steps).  Returns a summary dict.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with precision(cfg.precision):
        model = build_model(cfg)
        params = model.state_dict()
        opt = make_optimizer(cfg.optimizer, params, cfg.weight_decay, cfg.momentum)
        start = 0
        log_mode = "w"
        if resume:
            model = load_model(cfg, resume)
            params = model.state_dict()
            opt = make_optimizer(cfg.optimizer, params, cfg.weight_decay, cfg.momentum)
            opt.load_state(load_checkpoint(Path(resume) / OPTIM_FILE))
            start = opt.step_count
            log_mode = "a" if Path(resume).resolve() == out.resolve() else "w"
        cases = training_cases(cfg) if cases is None else cases
        t0 = time.time()
        losses = []
        stopped = "completed"
        with open(out / LOSS_LOG, log_mode, encoding="utf-8") as log:
            if log_mode == "w":
                log.write("step,loss,lr\n")
            step = start
            for step in range(start, cfg.steps):
                lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_steps)
                model.zero_grad()
                total = 0.0
                try:
                    for image, labels in sample_batch(cases, cfg, step):
                        loss = model.loss(image, labels, cfg.lambda0, cfg.lambda1) * (1.0 / cfg.batch_size)
                        loss.backward()
                        total += float(loss.item())
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite value during the loss computation ({exc})", step) from exc
                if not math.isfinite(total):
                    raise TrainingError(f"non-finite loss {total}", step)
                grads = [p for p in params.values() if p.grad is not None]
                if any(not np.isfinite(p.grad).all() for p in grads):
                    raise TrainingError("non-finite gradient", step)
                if cfg.grad_clip > 0:
                    clip_grad_norm(grads, cfg.grad_clip)
                opt.step(lr)
                losses.append(total)
                log.write(f"{step},{total!r},{lr!r}\n")
                done = step + 1
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                    save_run(out, cfg, model, opt, done)
                if cfg.log_every and done % cfg.log_every == 0:
                    log.flush()
                    if stop_fn is not None and stop_fn(done, model):
                        stopped = "early_stop"
                        break
                if max_seconds is not None and time.time() - t0 > max_seconds:
                    stopped = "time_budget"
                    break
        done = opt.step_count
        summary = {"steps_done": done, "stopped": stopped, "seconds": time.time() - t0,
                   "final_loss": losses[-1] if losses else None}
        save_run(out, cfg, model, opt, done, {"train": summary})
    summary["model"] = model
    summary["losses"] = losses
    return summary


def read_loss_log(path) -> list[tuple[int, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        s, loss, lr = line.split(",")
        rows.append((int(s), float(loss), float(lr)))
    return rows


# ----------------------------------------------------------------- evaluation
def predict_case(model, cfg: RunConfig, image: np.ndarray, all_snapshots: bool = False):
    """Sliding-window prediction.  Returns ``(prob, labels)`` for the final
    output, plus a list of per-iteration label maps when ``all_snapshots``."""
    plan = plan_windows(image.shape[:3], cfg.crop, cfg.overlap)
    K = cfg.num_classes
    if not all_snapshots:
        with precision(cfg.precision):
            return aggregate(model, image, plan, cfg.mask_mode, cfg.background)

    def window_fn(crop):
        probs = model.predict_window(crop, cfg.mask_mode, cfg.background, all_snapshots=True)
        return np.concatenate(probs, axis=0)

    with precision(cfg.precision):
        stacked, _ = aggregate(model, image, plan, window_fn=window_fn)
    stages = [stacked[i:i + K] for i in range(0, stacked.shape[0], K)]
    final = stages[-1]
    return final, np.argmax(final, axis=0), [np.argmax(s, axis=0) for s in stages]


def evaluate(model, cfg: RunConfig, cases: list[Case]) -> dict:
    """Per-class Dice/HD/sensitivity/specificity with mean rows, plus per-iteration Dice."""
    K = cfg.num_classes
    per_case = []
    stage_dice = []
    for case in cases:
        prob, labels, stage_labels = predict_case(model, cfg, case.image, all_snapshots=True)
        per_case.append(class_metrics(labels, case.labels, K, case.spacing))
        stage_dice.append([[dice_score(s, case.labels, k) for k in range(1, K)] for s in stage_labels])
    report = summarize(per_case, K)
    sd = np.array(stage_dice)  # [cases, stages, K-1]
    report["c2f_dice"] = {
        "stages": [f"Z{t}" for t in range(sd.shape[1])],
        "per_class": {str(k): sd[:, :, k - 1].mean(axis=0).tolist() for k in range(1, K)},
        "mean": sd.mean(axis=(0, 2)).tolist(),
    }
    report["num_cases"] = len(cases)
    report["config_hash"] = cfg.hash()
    report["config"] = cfg.to_dict()
    return report


def eval_labels(pred_cases: list[np.ndarray], cases: list[Case], num_classes: int) -> dict:
    """Report for precomputed label maps (no model involved)."""
    per_case = [class_metrics(p, c.labels, num_classes, c.spacing) for p, c in zip(pred_cases, cases)]
    return summarize(per_case, num_classes)


def mean_foreground_dice(model, cfg: RunConfig, cases: list[Case]) -> float:
    K = cfg.num_classes
    scores = []
    for case in cases:
        _, labels = predict_case(model, cfg, case.image)
        scores.append(np.mean([dice_score(labels, case.labels, k) for k in range(1, K)]))
    return float(np.mean(scores))


def run_eval(cfg: RunConfig, checkpoint, out_path, cases: list[Case] | None = None) -> dict:
    model = load_model(cfg, checkpoint)
    cases = validation_cases(cfg) if cases is None else cases
    report = evaluate(model, cfg, cases)
    write_report(out_path, report)
    return report


def run_infer(cfg: RunConfig, checkpoint, volume_path, out_dir) -> tuple[Path, Path]:
    model = load_model(cfg, checkpoint)
    vol = read_volume(volume_path)
    prob, labels = predict_case(model, cfg, vol.data)
    out = Path(out_dir)
    stem = Path(volume_path).stem
    lab_path = write_volume(out / f"{stem}_pred_labels.json", Volume(labels.astype(np.float32), vol.spacing))
    prob_path = write_volume(out / f"{stem}_pred_prob.json",
                             Volume(np.moveaxis(prob, 0, -1).astype(np.float32), vol.spacing))
    return lab_path, prob_path


def run_synth(spec: dict, out_dir) -> Path:
    """``spec``: ``{"task" | "phantom": ..., "count": n, "seed": s}``.

    ``phantom`` is a full phantom description; otherwise ``task`` picks a preset.
    """
    count = int(spec.get("count", 10))
    seed = int(spec.get("seed", 0))
    if count < 1:
        raise ValueError("count must be >= 1")
    extents = tuple(spec.get("extents", (32, 32, 32)))
    cases = []
    for i in range(count):
        if "phantom" in spec:
            ps = PhantomSpec.from_dict({**spec["phantom"], "seed": seed + i})
        else:
            ps = task_spec(spec.get("task", "vessel_tumor"), seed + i, extents)
        image, label = generate(ps)
        cases.append(Case(image.data, label.labels(), image.spacing, f"case_{i:03d}"))
    return write_dataset(out_dir, cases, {**spec, "count": count, "seed": seed})
