"""Alternating discriminator/generator optimization, checkpointing and the k-fold driver."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ucan.core import TASKS, TrainConfig, TrainingDivergenceError, Study, ValidationError
from ucan.data import (
    TrainingSample,
    bounding_box,
    brain_mask,
    crop_sample,
    denormalize,
    make_sample,
    random_patch_origin,
    sample_training_pair,
    split_folds,
)
from ucan.evaluate import MetricReport, evaluate_study, nmse
from ucan.losses import (
    LossBreakdown,
    adversarial_losses,
    classification_loss,
    combine,
    cyclic_reconstruction_loss,
    discriminator_objective,
    generator_adversarial_loss,
    generator_objective,
    pair_loss,
)
from ucan.nets import (
    Discriminator,
    DiscriminatorSpec,
    DuSEGenerator,
    GeneratorSpec,
    generator_forward,
    load_checkpoint,
    save_checkpoint,
    spec_dict,
)

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "epoch"] + LossBreakdown.field_names()
LAST = "last.pt"
BEST = "best.pt"


def collate(samples: Sequence[TrainingSample], dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Stack samples into (N, C, D, H, W) tensors plus class-index vectors."""

    cl = torch.channels_last_3d

    def vol(attr):
        return torch.from_numpy(np.stack([getattr(s, attr).data for s in samples])[:, None]).to(dtype, memory_format=cl)

    def label(attr):
        return torch.from_numpy(np.stack([getattr(s, attr).channels for s in samples])).to(dtype, memory_format=cl)

    return {
        "x_pet": vol("x_pet"),
        "x_mr": vol("x_mr"),
        "y_gt": vol("y_gt"),
        "m_target": label("m_target"),
        "m_source": label("m_source"),
        "source": torch.tensor([s.source.ordinal for s in samples], dtype=torch.long),
        "target": torch.tensor([s.target.ordinal for s in samples], dtype=torch.long),
    }


class Trainer:
    """Owns G, D, their optimizers and the sampling RNG for one training run."""

    def __init__(self, cfg: TrainConfig, dtype=torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.g_spec = GeneratorSpec.from_config(cfg)
        self.d_spec = DiscriminatorSpec.from_config(cfg)
        # channels-last lets CPU convolutions take the oneDNN path
        self.G = DuSEGenerator(self.g_spec).to(dtype=dtype, memory_format=torch.channels_last_3d)
        self.D = Discriminator(self.d_spec).to(dtype=dtype, memory_format=torch.channels_last_3d)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.lr_d, betas=betas)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.best_val_nmse = math.inf
        self.logs: list[dict] = []

    # -- batches -----------------------------------------------------------------

    def sample_batch(self, studies: Sequence[Study]) -> dict[str, torch.Tensor]:
        """Random study, random task and a random brain-centred patch per batch element."""
        samples = []
        for _ in range(self.cfg.batch_size):
            study = studies[int(self.rng.integers(len(studies)))]
            sample = sample_training_pair(study, self.rng)
            bbox = bounding_box(brain_mask(study.mr))
            origin = random_patch_origin(study.shape, self.cfg.patch_shape, self.rng, bbox)
            samples.append(crop_sample(sample, origin, self.cfg.patch_shape))
        return collate(samples, self.dtype)

    def _d_input(self, x: torch.Tensor, x_mr: torch.Tensor) -> torch.Tensor:
        return torch.cat([x, x_mr], dim=1) if self.cfg.d_use_mr else x

    # -- updates -------------------------------------------------------------------

    def d_terms(self, batch: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """Discriminator loss terms with G frozen.

        Real examples are both the source and the target volumes of the batch,
        each classified against its own tracer label.
        """
        with torch.no_grad():
            fake = generator_forward(self.G, batch["x_pet"], batch["x_mr"], batch["m_target"])
        real = torch.cat([batch["x_pet"], batch["y_gt"]])
        real_mr = torch.cat([batch["x_mr"], batch["x_mr"]])
        real_scores, real_logits = self.D(self._d_input(real, real_mr))
        fake_scores, _ = self.D(self._d_input(fake, batch["x_mr"]))
        adv_d, _ = adversarial_losses(real_scores, fake_scores, self.cfg.adv_mode)
        real_cls = torch.cat([batch["source"], batch["target"]])
        return {"adv_d": adv_d, "clsf_real": classification_loss(real_logits, real_cls)}

    def g_terms(self, batch: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """Generator loss terms; the cycle runs G a second time back to the source domain."""
        fake = generator_forward(self.G, batch["x_pet"], batch["x_mr"], batch["m_target"])
        cyc = generator_forward(self.G, fake, batch["x_mr"], batch["m_source"])
        fake_scores, fake_logits = self.D(self._d_input(fake, batch["x_mr"]))
        return {
            "pair": pair_loss(fake, batch["y_gt"]),
            "rec": cyclic_reconstruction_loss(batch["x_pet"], cyc),
            "adv_g": generator_adversarial_loss(fake_scores, self.cfg.adv_mode),
            "clsf_fake": classification_loss(fake_logits, batch["target"]),
        }

    def train_step_d(self, batch: dict[str, torch.Tensor]) -> LossBreakdown:
        """One discriminator update with G frozen."""
        self.G.requires_grad_(False)
        self.D.requires_grad_(True)
        try:
            terms = self.d_terms(batch)
            bd = combine({k: v.item() for k, v in terms.items()}, self.cfg)
            self.opt_d.zero_grad(set_to_none=False)
            discriminator_objective(terms, self.cfg).backward()
            self.opt_d.step()
        finally:
            self.G.requires_grad_(True)
        return bd

    def train_step_g(self, batch: dict[str, torch.Tensor]) -> LossBreakdown:
        """One generator update with D frozen."""
        self.D.requires_grad_(False)
        self.G.requires_grad_(True)
        try:
            terms = self.g_terms(batch)
            bd = combine({k: v.item() for k, v in terms.items()}, self.cfg)
            self.opt_g.zero_grad(set_to_none=False)
            generator_objective(terms, self.cfg).backward()
            self.opt_g.step()
        finally:
            self.D.requires_grad_(True)
        return bd

    def train_iteration(self, studies: Sequence[Study]) -> dict:
        batch = self.sample_batch(studies)
        bd_d = self.train_step_d(batch)
        bd_g = self.train_step_g(batch)
        parts = {
            "pair": bd_g.pair,
            "rec": bd_g.rec,
            "adv_g": bd_g.adv_g,
            "clsf_fake": bd_g.clsf_fake,
            "adv_d": bd_d.adv_d,
            "clsf_real": bd_d.clsf_real,
        }
        self.step += 1
        row = {"step": self.step, "epoch": self.epoch, **combine(parts, self.cfg).to_dict()}
        self.logs.append(row)
        return row

    # -- validation -----------------------------------------------------------------

    @torch.no_grad()
    def validation_nmse(self, studies: Sequence[Study]) -> float:
        """Mean NMSE over the six tasks on a brain-centred patch of each study."""
        self.G.eval()
        values = []
        for study in studies:
            bbox = bounding_box(brain_mask(study.mr))
            centre = [(lo + hi) // 2 for lo, hi in bbox]
            origin = [
                int(np.clip(c - p // 2, 0, s - p)) for c, p, s in zip(centre, self.cfg.patch_shape, study.shape)
            ]
            for source, target in TASKS:
                sample = crop_sample(make_sample(study, source, target), origin, self.cfg.patch_shape)
                b = collate([sample], self.dtype)
                out = generator_forward(self.G, b["x_pet"], b["x_mr"], b["m_target"])[0, 0].double().numpy()
                rec = study.norm_records[target]
                pred = denormalize(sample.y_gt.with_data(np.clip(out, -1, 1)), rec)
                gt = denormalize(sample.y_gt, rec)
                values.append(nmse(pred, gt))
        self.G.train()
        return float(np.mean(values))

    # -- checkpoints -----------------------------------------------------------------

    def checkpoint_payload(self) -> dict:
        return {
            "generator_spec": spec_dict(self.g_spec),
            "discriminator_spec": spec_dict(self.d_spec),
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "g_state": copy.deepcopy(self.G.state_dict()),
            "d_state": copy.deepcopy(self.D.state_dict()),
            "opt_g": copy.deepcopy(self.opt_g.state_dict()),
            "opt_d": copy.deepcopy(self.opt_d.state_dict()),
            "rng_state": copy.deepcopy(self.rng.bit_generator.state),
            "step": self.step,
            "epoch": self.epoch,
            "best_val_nmse": self.best_val_nmse,
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.checkpoint_payload())

    @classmethod
    def from_checkpoint(cls, blob_or_path, cfg: TrainConfig | None = None) -> "Trainer":
        blob = blob_or_path if isinstance(blob_or_path, dict) else load_checkpoint(blob_or_path)
        saved = TrainConfig.from_dict(blob["config"])
        if cfg is None:
            cfg = saved
        elif replace(cfg, epochs=saved.epochs, data_dir=saved.data_dir, run_dir=saved.run_dir).hash() != saved.hash():
            raise ValidationError("checkpoint was written with a different configuration")
        t = cls(cfg)
        t.G.load_state_dict(blob["g_state"])
        t.D.load_state_dict(blob["d_state"])
        t.opt_g.load_state_dict(blob["opt_g"])
        t.opt_d.load_state_dict(blob["opt_d"])
        t.rng.bit_generator.state = blob["rng_state"]
        t.step = int(blob["step"])
        t.epoch = int(blob["epoch"])
        t.best_val_nmse = float(blob["best_val_nmse"])
        return t


def steps_per_epoch(cfg: TrainConfig, n_studies: int) -> int:
    return cfg.steps_per_epoch or max(1, math.ceil(n_studies / cfg.batch_size))


def _append_log(path: Path, rows: Sequence[dict]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS})


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)
        ]


def train_loop(
    cfg: TrainConfig,
    train_studies: Sequence[Study],
    val_studies: Sequence[Study] = (),
    run_dir: str | Path | None = None,
    trainer: Trainer | None = None,
) -> Trainer:
    """Train until ``cfg.epochs``; one D update then one G update per iteration.

    Resumes from ``trainer`` (e.g. :meth:`Trainer.from_checkpoint`) when given.
    With ``run_dir``, appends per-step rows to ``train_log.csv`` and writes
    ``checkpoints/last.pt`` every ``cfg.checkpoint_every`` epochs and at the end,
    plus ``checkpoints/best.pt`` on improved validation NMSE. A non-finite loss
    aborts the run; the last checkpoint on disk is left untouched.
    """
    if not train_studies:
        raise ValidationError("no training studies")
    t = trainer if trainer is not None else Trainer(cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = run_dir / "checkpoints" if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    n_steps = steps_per_epoch(cfg, len(train_studies))
    t.G.train()
    t.D.train()
    while t.epoch < cfg.epochs:
        epoch_rows = []
        try:
            for _ in range(n_steps):
                epoch_rows.append(t.train_iteration(train_studies))
        except TrainingDivergenceError as exc:
            log.error("training diverged at step %d (%s); last good checkpoint kept", t.step + 1, exc)
            if run_dir is not None and epoch_rows:
                _append_log(run_dir / "train_log.csv", epoch_rows)
            raise
        t.epoch += 1
        last = epoch_rows[-1]
        log.info("epoch %d step %d  L_G %.4f  L_D %.4f  pair %.4f", t.epoch, t.step, last["total_g"], last["total_d"], last["pair"])
        if run_dir is None:
            continue
        _append_log(run_dir / "train_log.csv", epoch_rows)
        if val_studies:
            v = t.validation_nmse(val_studies)
            if v < t.best_val_nmse:
                t.best_val_nmse = v
                t.save(ckpt_dir / BEST)
        if t.epoch % cfg.checkpoint_every == 0 or t.epoch == cfg.epochs:
            t.save(ckpt_dir / LAST)
    return t


def run_cross_validation(
    cfg: TrainConfig,
    studies: Sequence[Study],
    run_dir: str | Path | None = None,
) -> tuple[list, MetricReport]:
    """k-fold training and evaluation over all six translation tasks.

    Returns one checkpoint per fold (a path when ``run_dir`` is given, else
    the in-memory payload) and the pooled report, including copy-input
    baseline rows.
    """
    by_id = {s.id: s for s in studies}
    folds = split_folds(list(by_id), cfg.num_folds, cfg.seed)
    checkpoints: list = []
    report = MetricReport()
    for i, (train_ids, test_ids) in enumerate(folds):
        fold_cfg = replace(cfg, fold_index=i)
        fold_dir = Path(run_dir) / f"fold_{i}" if run_dir is not None else None
        if fold_dir is not None:
            fold_dir.mkdir(parents=True, exist_ok=True)
            fold_cfg.save(fold_dir / "config.json")
        log.info("fold %d/%d: %d train, %d test", i + 1, len(folds), len(train_ids), len(test_ids))
        t = train_loop(fold_cfg, [by_id[k] for k in train_ids], run_dir=fold_dir)
        if fold_dir is not None:
            path = fold_dir / "checkpoints" / LAST
            if not path.exists():
                t.save(path)
            checkpoints.append(path)
        else:
            checkpoints.append(t.checkpoint_payload())
        for sid in test_ids:
            report.extend(
                evaluate_study(
                    t.G, by_id[sid], fold=i, patch_shape=cfg.patch_shape, overlap=cfg.overlap, full_fov=cfg.full_fov
                )
            )
    return checkpoints, report
