"""Training, evaluation, ablation matrix, sequence-length sweep, artifacts.

Training runs two phases. Phase 1 warms up the fusion stack and the twist
head against joint and pose losses on the initialization track (no
refinement). Phase 2 trains every module the active cell enables, with
multi-step learning-rate decay and the smoothness term switched on halfway
through. Plain SGD with momentum; every random draw is keyed on
(seed, purpose, epoch), so a (config, seed) pair reproduces bit-identical
metrics.

Artifacts: per-sequence `metrics.csv`, aggregate `summary.json` (config
echo, dataset content hash, backend, wall clock), `table2.csv` for the
six-cell ablation ladder, `sweep.csv` for the sequence-length trend, and
`checkpoint_phase{1,2}.npz` parameter snapshots.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import yaml

from . import backend
from .body import BodyTemplate, build_template
from .metrics import LossWeights, MetricReport, compute_metrics, total_loss
from .metrics import joint_loss, pose_loss
from .model import (
    ABLATION_CELLS,
    AblationFlags,
    ModelConfig,
    ModelParams,
    Prediction,
    forward,
    init_model,
    load_params,
    save_params,
    trainable_params,
)
from .numerics import tape
from .synth import CameraModel, DataConfig, SequenceSample, make_dataset
from .synth import EVAL_SPLIT, TRAIN_SPLIT


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries a diagnostic dict."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainSchedule:
    sequences: int = 160
    eval_sequences: int = 40
    phase1_epochs: int = 2
    phase2_epochs: int = 5
    lr1: float = 1.0e-2
    lr2: float = 3.0e-3
    momentum: float = 0.9
    decay_points: tuple[float, ...] = (0.6, 0.85)
    decay_factor: float = 0.1
    smooth_delay: float = 0.5
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.sequences < 1 or self.eval_sequences < 1:
            raise ValueError("need at least one sequence per split")


@dataclass
class BodySpec:
    joints: int = 16
    shape_dim: int = 4
    vertices: int = 64
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    out: Optional[str] = None
    cell: str = "complete"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(occlusion_rate=0.2))
    camera: CameraModel = field(default_factory=CameraModel)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    body: BodySpec = field(default_factory=BodySpec)
    sweep_lengths: tuple[int, ...] = (8, 16, 24, 32)

    def __post_init__(self):
        if self.data.channels != self.model.channels:
            raise ValueError("data channel width must match the model")
        self.flags()  # validates the cell name

    def flags(self) -> AblationFlags:
        f = AblationFlags.for_cell(self.cell)
        f.validate()
        return f


_SECTION_TYPES = {
    "model": ModelConfig,
    "data": DataConfig,
    "camera": CameraModel,
    "loss": LossWeights,
    "train": TrainSchedule,
    "body": BodySpec,
}


def config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from nested dicts, rejecting unknown keys."""
    raw = dict(raw or {})
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        if section in raw:
            sub = raw.pop(section)
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = set(sub) - names
            if unknown:
                raise ValueError(
                    "unknown %s keys: %s" % (section, sorted(unknown))
                )
            sub = {
                k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()
            }
            kwargs[section] = cls(**sub)
    top_names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - top_names
    if unknown:
        raise ValueError("unknown config keys: %s" % sorted(unknown))
    for k, v in raw.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    return config_from_dict(raw or {})


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for key, val in list(out.items()):
        if isinstance(val, tuple):
            out[key] = list(val)
    for section in _SECTION_TYPES:
        sec = out[section]
        for key, val in list(sec.items()):
            if isinstance(val, tuple):
                sec[key] = list(val)
    return out


def build_body(cfg: RunConfig) -> BodyTemplate:
    return build_template(
        joint_count=cfg.body.joints,
        shape_dim=cfg.body.shape_dim,
        vertex_count=cfg.body.vertices,
        seed=cfg.body.seed,
    )


def dataset_hash(samples: list[SequenceSample]) -> str:
    """Content hash over every observation and ground-truth array."""
    h = hashlib.sha256()
    for s in samples:
        for name in (
            "gt_quats",
            "gt_shape",
            "gt_root",
            "gt_joints",
            "gt_vertices",
            "rgb",
            "depth",
            "confidence",
            "person_mask",
            "keypoints_2d",
            "lifted_3d",
        ):
            arr = np.ascontiguousarray(getattr(s, name))
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
    return h.hexdigest()


def build_datasets(
    cfg: RunConfig, template: BodyTemplate
) -> tuple[list[SequenceSample], list[SequenceSample]]:
    train = make_dataset(
        template, cfg.camera, cfg.data, cfg.train.sequences, cfg.seed, TRAIN_SPLIT
    )
    eval_ = make_dataset(
        template, cfg.camera, cfg.data, cfg.train.eval_sequences, cfg.seed, EVAL_SPLIT
    )
    return train, eval_


# ---------------------------------------------------------------------------
# optimizer


class MomentumSGD:
    def __init__(self, params: list, lr: float, momentum: float, clip_norm: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.value) for name, p in params}

    def step(self) -> None:
        grads = {}
        total = 0.0
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            grads[name] = g
            total += float(np.sum(g * g))
        norm = np.sqrt(total)
        scale = 1.0
        if self.clip_norm > 0.0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, p in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * scale * grads[name]
            p.value = p.value + v


def _phase1_loss(pred: Prediction, sample: SequenceSample, weights: LossWeights):
    gt_j = sample.gt_joints - sample.gt_joints[:, 0:1, :]
    pj = tape.add(pred.joints, tape.mul(pred.joints[:, 0:1, :], -1.0))
    loss = tape.mul(joint_loss(pj, gt_j), weights.joint)
    return tape.add(loss, tape.mul(pose_loss(pred.local_quats, sample.gt_quats), weights.pose))


def _check_finite(loss_value: float, context: dict, out_dir: Optional[str]):
    if np.isfinite(loss_value):
        return
    snapshot = dict(context)
    snapshot["loss"] = float(loss_value)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "divergence.json"), "w") as f:
            json.dump(snapshot, f, indent=2)
    raise TrainingDiverged("training loss is not finite", snapshot)


@dataclass
class RunReport:
    loss_curves: dict
    metrics: dict
    wall_clock: float
    config_echo: dict
    content_hash: str
    backend: str
    cell: str


def train(
    cfg: RunConfig,
    template: Optional[BodyTemplate] = None,
    datasets: Optional[tuple[list, list]] = None,
) -> tuple[ModelParams, RunReport]:
    """Two-phase training followed by evaluation on the eval split."""
    start = time.perf_counter()
    template = template or build_body(cfg)
    train_set, eval_set = datasets or build_datasets(cfg, template)
    flags = cfg.flags()
    params = init_model(cfg.seed, template, cfg.model)
    sched = cfg.train
    curves: dict = {"phase1": [], "phase2": []}

    init_flags = replace(flags, use_modar=False)
    p1_params = trainable_params(params, flags, 1)
    opt1 = MomentumSGD(p1_params, sched.lr1, sched.momentum, sched.clip_norm)
    for epoch in range(sched.phase1_epochs):
        order = np.random.default_rng((cfg.seed, 101, epoch)).permutation(
            len(train_set)
        )
        epoch_loss = 0.0
        for idx in order:
            sample = train_set[idx]
            tape.zero_grads(p for _, p in p1_params)
            pred = forward(
                params, sample, cfg.camera, init_flags, compute_vertices=False
            )
            loss = _phase1_loss(pred, sample, cfg.loss)
            _check_finite(
                float(loss.value),
                {"phase": 1, "epoch": epoch, "sample": int(idx), "seed": cfg.seed},
                cfg.out,
            )
            tape.backward(loss)
            opt1.step()
            epoch_loss += float(loss.value)
        curves["phase1"].append(epoch_loss / len(train_set))
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        save_params(params, os.path.join(cfg.out, "checkpoint_phase1.npz"))

    p2_params = trainable_params(params, flags, 2)
    opt2 = MomentumSGD(p2_params, sched.lr2, sched.momentum, sched.clip_norm)
    decay_epochs = {
        int(np.floor(p * sched.phase2_epochs)) for p in sched.decay_points
    }
    smooth_from = int(np.ceil(sched.smooth_delay * sched.phase2_epochs))
    for epoch in range(sched.phase2_epochs):
        if epoch in decay_epochs and epoch > 0:
            opt2.lr *= sched.decay_factor
        include_smooth = epoch >= smooth_from
        order = np.random.default_rng((cfg.seed, 202, epoch)).permutation(
            len(train_set)
        )
        epoch_loss = 0.0
        for idx in order:
            sample = train_set[idx]
            tape.zero_grads(p for _, p in p2_params)
            pred = forward(params, sample, cfg.camera, flags)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                loss, _ = total_loss(
                    pred.joints,
                    pred.vertices,
                    pred.local_quats,
                    pred.shape,
                    sample.gt_joints,
                    sample.gt_vertices,
                    sample.gt_quats,
                    sample.gt_shape,
                    cfg.loss,
                    include_smooth=include_smooth,
                )
            _check_finite(
                float(loss.value),
                {"phase": 2, "epoch": epoch, "sample": int(idx), "seed": cfg.seed},
                cfg.out,
            )
            tape.backward(loss)
            opt2.step()
            epoch_loss += float(loss.value)
        curves["phase2"].append(epoch_loss / len(train_set))
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        save_params(params, os.path.join(cfg.out, "checkpoint_phase2.npz"))

    aggregate, rows = evaluate(params, eval_set, cfg)
    if cfg.out:
        write_metrics_csv(rows, os.path.join(cfg.out, "metrics.csv"))
    report = RunReport(
        loss_curves=curves,
        metrics=aggregate,
        wall_clock=time.perf_counter() - start,
        config_echo=config_to_dict(cfg),
        content_hash=dataset_hash(train_set + eval_set),
        backend=backend.BACKEND_NAME,
        cell=cfg.cell,
    )
    if cfg.out:
        write_summary_json(report, os.path.join(cfg.out, "summary.json"))
    return params, report


def predict_numpy(
    params: ModelParams,
    sample: SequenceSample,
    camera: CameraModel,
    flags: AblationFlags,
) -> tuple[np.ndarray, np.ndarray]:
    pred = forward(params, sample, camera, flags)
    return pred.joints.value, pred.vertices.value


def evaluate(
    params: ModelParams,
    dataset: list[SequenceSample],
    cfg: RunConfig,
    oracle_bypass: bool = False,
) -> tuple[dict, list[dict]]:
    """Evaluate on every sequence; aggregate is the mean of the rows."""
    flags = cfg.flags()
    rows = []
    for i, sample in enumerate(dataset):
        if sample.gt_quats.shape[1] != params.template.joint_count:
            raise ValueError("dataset joint count does not match the model")
        if sample.rgb.shape[-1] != params.config.channels:
            raise ValueError("dataset channel width does not match the model")
        if oracle_bypass:
            pj, pv = sample.gt_joints, sample.gt_vertices
        else:
            pj, pv = predict_numpy(params, sample, cfg.camera, flags)
        rep = compute_metrics(
            pj, pv, sample.gt_joints, sample.gt_vertices, cfg.camera.fps
        )
        row = {"sequence": i, "frames": rep.frames}
        row.update(rep.as_dict())
        rows.append(row)
    keys = ("mpjpe", "pa_mpjpe", "mpvpe", "accel")
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    aggregate["sequences"] = len(rows)
    return aggregate, rows


# ---------------------------------------------------------------------------
# suites


def ablation_suite(cfg: RunConfig) -> tuple[list[dict], dict]:
    """Train and evaluate the six-cell ladder on one shared dataset.

    Returns (rows in ladder order, per-cell reports). Every cell consumes
    the identical dataset; the returned reports carry matching content
    hashes as evidence.
    """
    template = build_body(cfg)
    datasets = build_datasets(cfg, template)
    rows = []
    reports = {}
    for cell in ABLATION_CELLS:
        cell_cfg = replace(
            cfg,
            cell=cell,
            out=os.path.join(cfg.out, cell) if cfg.out else None,
        )
        _, report = train(cell_cfg, template=template, datasets=datasets)
        row = {"cell": cell}
        row.update(report.metrics)
        rows.append(row)
        reports[cell] = report
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        write_rows_csv(rows, os.path.join(cfg.out, "table2.csv"))
    return rows, reports


def seq_length_sweep(
    cfg: RunConfig, lengths: Optional[tuple[int, ...]] = None
) -> list[dict]:
    """Train/evaluate the configured cell at each sequence length."""
    lengths = tuple(lengths or cfg.sweep_lengths)
    if any(t < 3 for t in lengths):
        raise ValueError("sweep lengths must be at least 3 frames")
    rows = []
    for t_len in lengths:
        sub = replace(
            cfg,
            data=replace(cfg.data, frames=t_len),
            out=os.path.join(cfg.out, "T%d" % t_len) if cfg.out else None,
        )
        _, report = train(sub)
        row = {"frames": t_len}
        row.update(report.metrics)
        rows.append(row)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        write_rows_csv(rows, os.path.join(cfg.out, "sweep.csv"))
    return rows


# ---------------------------------------------------------------------------
# artifact writers


def write_metrics_csv(rows: list[dict], path: str) -> None:
    write_rows_csv(rows, path)


def write_rows_csv(rows: list[dict], path: str) -> None:
    if not rows:
        raise ValueError("no rows to write")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def read_rows_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return [dict(r) for r in csv.DictReader(f)]


def write_summary_json(report: RunReport, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = {
        "metrics": report.metrics,
        "loss_curves": report.loss_curves,
        "wall_clock_s": report.wall_clock,
        "config": report.config_echo,
        "dataset_hash": report.content_hash,
        "backend": report.backend,
        "cell": report.cell,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
