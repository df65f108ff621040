"""Two-stage training: unsupervised representation, then supervised head.

Stage 1 minimizes the triplet reconstruction objective on unlabeled
multi-view images.  Stage 2 trains the pose head on a labeled budget with
the encoder frozen (optionally fine-tuned).  Scenario runners cover the
semi-supervised pipeline, the direct-regression baseline, the ablation
grid, and the label-budget sweep, each persisting a run directory with
config, loss curves, checkpoints, and final metrics.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import math
import os
import time

import numpy as np
import torch

from . import datapipe, losses, metrics, nets

ABLATION_FLAGS = (
    "no_3d_latent", "no_appearance", "no_background",
    "bilinear_only", "no_perceptual", "shallow_head",
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; a diagnostic snapshot is kept."""


@dataclasses.dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    rep_steps: int = 20000
    head_steps: int = 5000
    feature_weight: float = 2.0
    seed: int = 0
    fine_tune_encoder: bool = False
    checkpoint_every: int = 1000
    inplane_range: float = 0.0
    resnet_encoder: bool = False
    no_3d_latent: bool = False
    no_appearance: bool = False
    no_background: bool = False
    bilinear_only: bool = False
    no_perceptual: bool = False
    shallow_head: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    def model_config(self, image_size: int, num_joints: int = 16) -> nets.ArchitectureConfig:
        if self.no_3d_latent:
            variant = "no3d_baseline"
        elif self.resnet_encoder:
            variant = "deep_residual"
        else:
            variant = "unet_style"
        kwargs = {}
        if self.no_appearance:
            kwargs["appearance_dim"] = 0
        return nets.ArchitectureConfig(
            variant=variant, image_size=image_size, num_joints=num_joints,
            seed=self.seed, bilinear_only=self.bilinear_only,
            use_background=not self.no_background,
            head_layers=1 if self.shallow_head else 2, **kwargs,
        )

    @property
    def effective_feature_weight(self) -> float:
        return 0.0 if self.no_perceptual else self.feature_weight


def _save_train_state(path: str, optimizer, np_rng, step: int, rows: list):
    torch.save({
        "optimizer": optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": np_rng.bit_generator.state,
        "step": step,
        "rows": rows,
    }, os.path.join(path, "train_state.pt"))


def _load_train_state(path: str, optimizer, np_rng):
    state = torch.load(os.path.join(path, "train_state.pt"), weights_only=False)
    optimizer.load_state_dict(state["optimizer"])
    torch.set_rng_state(state["torch_rng"])
    np_rng.bit_generator.state = state["numpy_rng"]
    return state["step"], state["rows"]


def _checkpoint(model, out_dir, optimizer, np_rng, step, rows) -> str:
    path = os.path.join(out_dir, "checkpoints", f"step_{step}")
    nets.save_model(model, path)
    _save_train_state(path, optimizer, np_rng, step, rows)
    return path


def write_losses_csv(out_dir: str, rows: list):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "losses.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "stage", "total", "pixel_term", "feature_term"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _abort_on_nan(value: float, model, out_dir, optimizer, np_rng, step, rows):
    if math.isfinite(value):
        return
    where = "nowhere (no out_dir)"
    if out_dir is not None:
        where = _checkpoint(model, out_dir, optimizer, np_rng, step, rows)
        write_losses_csv(out_dir, rows)
    raise TrainingDiverged(f"non-finite loss {value} at step {step}; snapshot at {where}")


def train_representation(view, config: TrainConfig, out_dir: str | None = None,
                         model: nets.GeoAutoencoder | None = None,
                         resume_from: str | None = None):
    """Stage 1: stochastic gradient steps on the triplet reconstruction loss.

    Deterministic given the config seed (single worker).  Returns the
    trained model and the loss-curve rows.  ``resume_from`` restores a
    checkpoint directory bitwise (weights, optimizer, both RNG streams).
    """
    image_size = view.dataset.image_size
    if model is None and resume_from is None:
        model = nets.build_model(config=config.model_config(image_size))
    elif resume_from is not None:
        model = nets.load_model(resume_from)
    torch.manual_seed(config.seed)
    np_rng = np.random.default_rng(config.seed)
    params = (
        list(model.encoder.parameters())
        + list(model.decoder.parameters())
        + list(model.fusion.parameters())
    )
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    start, rows = 0, []
    if resume_from is not None:
        start, rows = _load_train_state(resume_from, optimizer, np_rng)
    feature_net = losses.default_feature_net() if config.effective_feature_weight else None
    model.train()
    for step in range(start, config.rep_steps):
        samples = [
            datapipe.sample_triplet(view, np_rng, inplane_range=config.inplane_range)
            for _ in range(config.batch_size)
        ]
        batch = datapipe.collate_triplets(samples)
        report = losses.reconstruction_loss(
            batch, model, feature_weight=config.effective_feature_weight,
            feature_net=feature_net,
        )
        optimizer.zero_grad()
        report.total.backward()
        optimizer.step()
        rows.append({
            "step": step, "stage": "representation",
            "total": float(report.total.detach()),
            "pixel_term": float(report.pixel_term.detach()),
            "feature_term": float(report.feature_term.detach()),
        })
        _abort_on_nan(rows[-1]["total"], model, out_dir, optimizer, np_rng, step, rows)
        done = step + 1
        if out_dir is not None and (done % config.checkpoint_every == 0 or done == config.rep_steps):
            _checkpoint(model, out_dir, optimizer, np_rng, done, rows)
            write_losses_csv(out_dir, rows)
    model.eval()
    return model, rows


def precompute_codes(model: nets.GeoAutoencoder, labeled, norm_stats,
                     batch_size: int = 64) -> torch.Tensor:
    """Encode every labeled image once with the frozen evaluation-mode encoder."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(labeled), batch_size):
            imgs = np.stack([
                norm_stats.apply_image(s.image) for s in labeled[start:start + batch_size]
            ])
            chunks.append(model.encode(nets.to_tensor(imgs)).geometry)
    return torch.cat(chunks, dim=0)


def train_pose_head(labeled, model: nets.GeoAutoencoder, config: TrainConfig,
                    norm_stats=None, out_dir: str | None = None):
    """Stage 2: supervised head training on root-centered normalized poses.

    The encoder stays frozen (bitwise) unless ``fine_tune_encoder`` is set.
    Latent point sets are standardized per dimension before the head, with
    stats taken once from the labeled set under the initial encoder and
    recorded in the returned normalization statistics.
    Returns the model, the loss rows, and the normalization statistics.
    """
    if len(labeled) == 0:
        raise ValueError("empty labeled set")
    if norm_stats is None:
        norm_stats = datapipe.compute_norm_stats(labeled)
    poses = torch.from_numpy(
        np.stack([norm_stats.apply_pose(s.pose) for s in labeled]).astype(np.float32)
    )
    torch.manual_seed(config.seed + 1)
    np_rng = np.random.default_rng(config.seed + 1)
    codes = precompute_codes(model, labeled, norm_stats)
    flat = codes.flatten(1)
    norm_stats = dataclasses.replace(
        norm_stats,
        code_mean=flat.mean(dim=0).numpy(),
        code_std=flat.std(dim=0).clamp_min(1e-6).numpy(),
    )
    if config.fine_tune_encoder:
        params = list(model.encoder.parameters()) + list(model.pose_head.parameters())
        images = nets.to_tensor(np.stack([norm_stats.apply_image(s.image) for s in labeled]))
    else:
        params = list(model.pose_head.parameters())
        codes = nets.standardize_codes(codes, norm_stats)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    rows = []
    model.pose_head.train()
    for step in range(config.head_steps):
        idx = np_rng.integers(len(labeled), size=min(config.batch_size, len(labeled)))
        idx = torch.from_numpy(idx)
        if config.fine_tune_encoder:
            model.train()
            geometry = model.encode(images[idx]).geometry
            value = losses.pose_loss_from_codes(
                nets.standardize_codes(geometry, norm_stats),
                poses[idx], model.pose_head)
        else:
            value = losses.pose_loss_from_codes(codes[idx], poses[idx], model.pose_head)
        optimizer.zero_grad()
        value.backward()
        optimizer.step()
        rows.append({
            "step": step, "stage": "pose_head",
            "total": float(value.detach()), "pixel_term": "", "feature_term": "",
        })
        _abort_on_nan(rows[-1]["total"], model, out_dir, optimizer, np_rng, step, rows)
    model.eval()
    if out_dir is not None:
        _checkpoint(model, out_dir, optimizer, np_rng, config.head_steps, rows)
        write_losses_csv(out_dir, rows)
        with open(os.path.join(out_dir, "norm_stats.json"), "w") as fh:
            json.dump(norm_stats.to_json(), fh)
    return model, rows, norm_stats


def train_direct_baseline(labeled, config: TrainConfig, image_size: int,
                          out_dir: str | None = None):
    """Fully-supervised baseline: deep encoder straight to pose, no decoder."""
    direct = dataclasses.replace(config, resnet_encoder=True, no_3d_latent=False,
                                 fine_tune_encoder=True)
    model = nets.build_model(config=direct.model_config(image_size))
    return train_pose_head(labeled, model, direct, out_dir=out_dir)


@dataclasses.dataclass(frozen=True)
class Scenario:
    """A named end-to-end pipeline: what to train and on which labels."""

    kind: str = "semi"
    budget: float = 1.0
    test_subjects: tuple | None = None
    eval_stride: int = 1
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("semi", "direct"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 < self.budget <= 1.0:
            raise ValueError("budget must be in (0, 1]")


@dataclasses.dataclass
class RunRecord:
    scenario: dict
    config: dict
    metrics: metrics.MetricReport
    wall_clock: float
    num_labels: int = 0
    out_dir: str | None = None

    def save(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump({"scenario": self.scenario, "train": self.config,
                       "num_labels": self.num_labels,
                       "wall_clock": self.wall_clock}, fh, indent=2)
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            json.dump(self.metrics.to_json(), fh, indent=2)
        self.out_dir = out_dir


def split_subjects(dataset, test_subjects=None):
    subjects = sorted(dataset.subjects)
    if len(subjects) < 2:
        raise ValueError("need at least two subjects for a held-out split")
    if test_subjects is None:
        test_subjects = [subjects[-1]]
    test_subjects = sorted(set(test_subjects))
    train_subjects = [s for s in subjects if s not in test_subjects]
    if not train_subjects:
        raise ValueError("no training subjects left")
    return train_subjects, test_subjects


def labeled_test_set(dataset, test_subjects, stride: int = 1):
    testset, _ = datapipe.label_budget_split(
        dataset.view(test_subjects), datapipe.BudgetScenario(1.0)
    )
    return testset[::stride]


def identity_image_stats(norm_stats):
    """Keep pose normalization, feed the encoder raw [0, 1] images.

    Stage 1 trains the encoder on raw pixels, so stage 2 and evaluation
    must not shift the input distribution under it.
    """
    return datapipe.NormStats(
        image_mean=np.zeros_like(norm_stats.image_mean),
        image_std=np.ones_like(norm_stats.image_std),
        pose_mean=norm_stats.pose_mean,
        pose_std=norm_stats.pose_std,
    )


def transfer_representation(source: nets.GeoAutoencoder,
                            target: nets.GeoAutoencoder) -> nets.GeoAutoencoder:
    """Copy the stage-1 modules (encoder, decoder, fusion) into target.

    The pose head is left untouched, so two configurations that share the
    unsupervised stage exactly and differ only in the head can reuse one
    stage-1 run instead of repeating it.
    """
    state = {k: v.clone() for k, v in source.state_dict().items()
             if not k.startswith("pose_head.")}
    missing, unexpected = target.load_state_dict(state, strict=False)
    if unexpected or any(not k.startswith("pose_head.") for k in missing):
        raise ValueError("representation modules of the two models differ")
    return target


def run_scenario(scenario: Scenario, dataset_root: str, config: TrainConfig,
                 out_dir: str | None = None,
                 pretrained: nets.GeoAutoencoder | None = None) -> RunRecord:
    """Execute one pipeline end-to-end and evaluate on held-out subjects."""
    started = time.time()
    dataset = datapipe.MultiViewDataset(dataset_root)
    train_subjects, test_subjects = split_subjects(dataset, scenario.test_subjects)
    view = dataset.view(train_subjects)
    labeled, _ = datapipe.label_budget_split(
        view, datapipe.BudgetScenario(scenario.budget, seed=config.seed)
    )
    if scenario.kind == "direct":
        model, _, norm_stats = train_direct_baseline(
            labeled, config, dataset.image_size, out_dir=out_dir
        )
    else:
        if pretrained is None:
            model, _ = train_representation(view, config, out_dir=out_dir)
        else:
            model = pretrained
        norm_stats = identity_image_stats(datapipe.compute_norm_stats(labeled))
        model, _, norm_stats = train_pose_head(
            labeled, model, config, norm_stats=norm_stats, out_dir=out_dir
        )
    testset = labeled_test_set(dataset, test_subjects, scenario.eval_stride)
    report = metrics.evaluate_model(model, None, testset, norm_stats, train_subjects)
    record = RunRecord(
        scenario=dataclasses.asdict(scenario), config=config.to_json(),
        metrics=report, wall_clock=time.time() - started,
        num_labels=len(labeled),
    )
    if out_dir is not None:
        record.save(out_dir)
    return record


def ablation_grid(base: TrainConfig) -> list:
    """The full model plus the seven single-change ablations."""
    grid = [("full", base)]
    for flag in ("resnet_encoder",) + ABLATION_FLAGS:
        grid.append((flag, dataclasses.replace(base, **{flag: True})))
    return grid


def run_ablations(dataset_root: str, config: TrainConfig, budget: float = 0.05,
                  out_dir: str | None = None, eval_stride: int = 1) -> dict:
    """Train and evaluate every ablation at a fixed label budget."""
    results = {}
    for name, cfg in ablation_grid(config):
        sub_dir = os.path.join(out_dir, name) if out_dir is not None else None
        scenario = Scenario(kind="semi", budget=budget,
                            eval_stride=eval_stride, name=name)
        results[name] = run_scenario(scenario, dataset_root, cfg, out_dir=sub_dir)
    return results


def sweep_budgets(dataset_root: str, config: TrainConfig,
                  fractions=(1.0, 0.5, 0.1, 0.05, 0.01),
                  out_dir: str | None = None, eval_stride: int = 1) -> dict:
    """Label-budget sweep sharing one stage-1 representation across budgets.

    The representation stage is unsupervised, so the budget only affects
    the head; training stage 1 once keeps the sweep honest and fast.
    """
    dataset = datapipe.MultiViewDataset(dataset_root)
    train_subjects, _ = split_subjects(dataset)
    rep_dir = os.path.join(out_dir, "representation") if out_dir is not None else None
    rep_model, _ = train_representation(dataset.view(train_subjects), config,
                                        out_dir=rep_dir)
    rep_path = None
    if out_dir is not None:
        rep_path = os.path.join(out_dir, "representation", "final")
        nets.save_model(rep_model, rep_path)
    results = {}
    for fraction in fractions:
        sub_dir = os.path.join(out_dir, f"budget_{fraction}") if out_dir is not None else None
        scenario = Scenario(kind="semi", budget=fraction, eval_stride=eval_stride,
                            name=f"budget_{fraction}")
        if rep_path is None:
            model = copy.deepcopy(rep_model)
        else:
            model = nets.load_model(rep_path)
        results[fraction] = run_scenario(scenario, dataset_root, config,
                                         out_dir=sub_dir, pretrained=model)
    return results
