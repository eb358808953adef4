"""Adversarial consistent training: the two-phase stage-2 loop.

Each step trains the discriminator first (phase 1), then the separator and
conditional denoiser jointly (phase 2) against a three-term objective:
adversarial + weighted waveform L1 + scheduled consistency between two
denoised noise-corruptions of the target. Gradient routing is strict:
discriminator parameters never move in phase 2, generator parameters never
move in phase 1, and the second denoiser branch is gradient-stopped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import TrainConfig
from .separation import ASMModel, CDModel, DiscriminatorModel, lsgan_d_loss, lsgan_g_loss

SIGMA_FLOOR = 1e-8


class NumericalAbort(RuntimeError):
    """Raised when a loss turns non-finite; carries a diagnostic snapshot."""

    def __init__(self, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(f"non-finite loss at step {snapshot.get('step')}: "
                         f"{snapshot.get('losses')}")


@dataclass
class ACTSchedules:
    """Noise and loss-weight schedules over ``total_steps``.

    ``step_schedule`` and ``ema_decay`` are carried for config completeness
    but are inert: the loop uses neither a step count schedule nor an EMA
    target network.
    """

    sigma_max: float = 0.5
    sigma_min: float = 0.01
    lambda_l1: float = 1.0
    lambda_consist_max: float = 0.25
    lambda_consist_warmup_frac: float = 0.1
    total_steps: int = 2000
    consistency_metric: str = "l1"
    step_schedule: str = "constant"
    ema_decay: float = 0.999

    def sigma(self, k: int) -> float:
        """Geometric decay from sigma_max at k=0 to sigma_min at k=N."""
        if self.total_steps <= 0:
            return max(self.sigma_max, SIGMA_FLOOR)
        frac = min(max(k / self.total_steps, 0.0), 1.0)
        value = self.sigma_max * (self.sigma_min / self.sigma_max) ** frac
        return max(value, SIGMA_FLOOR)

    def lambda_consist(self, k: int) -> float:
        """Linear warmup from 0 over the first warmup fraction, then flat."""
        warmup = self.lambda_consist_warmup_frac * self.total_steps
        if warmup <= 0:
            return self.lambda_consist_max
        return self.lambda_consist_max * min(k / warmup, 1.0)


def make_schedules(cfg: TrainConfig, total_steps: int | None = None) -> ACTSchedules:
    return ACTSchedules(
        sigma_max=cfg.sigma_max,
        sigma_min=cfg.sigma_min,
        lambda_l1=cfg.lambda_l1,
        lambda_consist_max=cfg.lambda_consist_max,
        lambda_consist_warmup_frac=cfg.lambda_consist_warmup_frac,
        total_steps=cfg.total_steps if total_steps is None else total_steps,
        consistency_metric=cfg.consistency_metric,
        step_schedule=cfg.step_schedule,
        ema_decay=cfg.ema_decay,
    )


def consistency_loss(pred1: torch.Tensor, pred2_stopped: torch.Tensor,
                     metric: str = "l1") -> torch.Tensor:
    """Mean per-sample distance between the two denoised predictions.

    ``pred2_stopped`` must already be detached from the graph; this
    function does not detach on the caller's behalf.
    """
    if pred1.shape != pred2_stopped.shape:
        raise ValueError(
            f"prediction shapes differ: {tuple(pred1.shape)} vs "
            f"{tuple(pred2_stopped.shape)}"
        )
    diff = pred1 - pred2_stopped
    if metric == "l1":
        return diff.abs().mean()
    if metric == "l2":
        return (diff**2).mean()
    raise ValueError(f"unknown consistency metric {metric!r}")


@dataclass
class Stage2Batch:
    """One training batch: mixtures, targets, frozen target embeddings, and
    frozen frame features of the mixtures."""

    mixtures: torch.Tensor  # [B, T]
    targets: torch.Tensor  # [B, T]
    target_embeddings: torch.Tensor  # [B, D]
    frame_features: torch.Tensor  # [B, F, feat]

    def select(self, idx: torch.Tensor) -> "Stage2Batch":
        return Stage2Batch(
            self.mixtures[idx], self.targets[idx],
            self.target_embeddings[idx], self.frame_features[idx],
        )

    def __len__(self) -> int:
        return self.mixtures.shape[0]


@dataclass
class TrainState:
    asm: ASMModel
    cd: CDModel
    disc: DiscriminatorModel
    opt_gen: torch.optim.Optimizer  # covers ASM and CD jointly
    opt_disc: torch.optim.Optimizer
    step: int = 0
    gen_noise1: torch.Generator = field(default_factory=torch.Generator)
    gen_noise2: torch.Generator = field(default_factory=torch.Generator)
    gen_batch: torch.Generator = field(default_factory=torch.Generator)

    def __post_init__(self):
        gen_ids = {id(p) for group in self.opt_gen.param_groups for p in group["params"]}
        disc_ids = {id(p) for group in self.opt_disc.param_groups for p in group["params"]}
        if gen_ids & disc_ids:
            raise ValueError("generator and discriminator optimizers share parameters")

    def rng_state(self) -> dict:
        return {
            "noise1": self.gen_noise1.get_state(),
            "noise2": self.gen_noise2.get_state(),
            "batch": self.gen_batch.get_state(),
        }

    def load_rng_state(self, state: dict) -> None:
        self.gen_noise1.set_state(state["noise1"])
        self.gen_noise2.set_state(state["noise2"])
        self.gen_batch.set_state(state["batch"])


def init_train_state(asm: ASMModel, cd: CDModel, disc: DiscriminatorModel,
                     cfg: TrainConfig, seed: int = 0) -> TrainState:
    opt_gen = torch.optim.AdamW(
        list(asm.parameters()) + list(cd.parameters()),
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
    )
    opt_disc = torch.optim.AdamW(
        disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    state = TrainState(asm=asm, cd=cd, disc=disc, opt_gen=opt_gen, opt_disc=opt_disc)
    state.gen_noise1.manual_seed(seed * 3 + 1)
    state.gen_noise2.manual_seed(seed * 3 + 2)
    state.gen_batch.manual_seed(seed * 3 + 3)
    return state


def _check_finite(losses: dict, state: TrainState, batch: Stage2Batch) -> None:
    if all(math.isfinite(v) for v in losses.values()):
        return
    snapshot = {
        "step": state.step,
        "losses": losses,
        "batch_abs_max": float(batch.mixtures.abs().max()),
        "target_abs_max": float(batch.targets.abs().max()),
    }
    raise NumericalAbort(snapshot)


def discriminator_phase(state: TrainState, batch: Stage2Batch) -> float:
    """Phase 1: update D only. The generator runs in pure inference; no
    generator gradients are built."""
    with torch.no_grad():
        x_gen, _ = state.asm(batch.mixtures, batch.target_embeddings,
                             batch.frame_features)
    d_real = state.disc(batch.targets)
    d_fake = state.disc(x_gen)
    loss_d = lsgan_d_loss(d_real, d_fake)
    _check_finite({"L_D": loss_d.item()}, state, batch)
    state.opt_disc.zero_grad()
    loss_d.backward()
    state.opt_disc.step()
    return loss_d.item()


def generator_phase(state: TrainState, batch: Stage2Batch, sigma: float,
                    lambda_l1: float, lambda_consist: float,
                    metric: str = "l1") -> dict:
    """Phase 2: update ASM and CD jointly. D's parameters are
    gradient-stopped, but gradients still flow through D into the
    generator for the adversarial term."""
    for p in state.disc.parameters():
        p.requires_grad_(False)
    try:
        x_gen, cond = state.asm(batch.mixtures, batch.target_embeddings,
                                batch.frame_features)
        d_fake = state.disc(x_gen)
        eps1 = torch.randn(batch.targets.shape, generator=state.gen_noise1,
                           dtype=batch.targets.dtype) * sigma
        eps2 = torch.randn(batch.targets.shape, generator=state.gen_noise2,
                           dtype=batch.targets.dtype) * sigma
        pred1 = state.cd(batch.targets + eps1, cond)
        with torch.no_grad():
            pred2 = state.cd(batch.targets + eps2, cond.detach())
        loss_consist = consistency_loss(pred1, pred2, metric)
        loss_l1 = (x_gen - batch.targets).abs().mean()
        loss_adv = lsgan_g_loss(d_fake)
        # Compose in float64 so the logged total is exactly the sum of the
        # logged components.
        loss_total = (loss_adv.double() + lambda_l1 * loss_l1.double()
                      + lambda_consist * loss_consist.double())
        losses = {
            "L_adv": loss_adv.double().item(),
            "L_L1": loss_l1.double().item(),
            "L_consist": loss_consist.double().item(),
            "L_T": loss_total.item(),
        }
        _check_finite(losses, state, batch)
        state.opt_gen.zero_grad()
        loss_total.backward()
        state.opt_gen.step()
    finally:
        for p in state.disc.parameters():
            p.requires_grad_(True)
    return losses


def act_step(state: TrainState, batch: Stage2Batch,
             schedules: ACTSchedules) -> dict:
    """One two-phase training step; returns the scalar log record."""
    k = state.step
    sigma = schedules.sigma(k)
    lam_c = schedules.lambda_consist(k)
    loss_d = discriminator_phase(state, batch)
    losses = generator_phase(state, batch, sigma, schedules.lambda_l1, lam_c,
                             schedules.consistency_metric)
    state.step = k + 1
    return {"step": k, "L_D": loss_d, **losses,
            "sigma": sigma, "lambda_consist": lam_c}


def act_train(state: TrainState, data: Stage2Batch, schedules: ACTSchedules,
              steps: int, batch_size: int = 8, metrics_path: str | Path | None = None,
              checkpoint_every: int = 0, checkpoint_fn=None,
              log_every: int = 0, log_fn=None) -> list[dict]:
    """Run ``steps`` ACT iterations over ``data`` with seeded batching.

    Per-step scalar records are returned and, when ``metrics_path`` is
    given, appended as line-delimited JSON.
    """
    n = len(data)
    records: list[dict] = []
    sink = open(metrics_path, "a") if metrics_path is not None else None
    try:
        for _ in range(steps):
            idx = torch.randperm(n, generator=state.gen_batch)[: min(batch_size, n)]
            record = act_step(state, data.select(idx), schedules)
            records.append(record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if log_fn is not None and log_every and (
                record["step"] % log_every == 0 or record["step"] == steps - 1
            ):
                log_fn(record)
            if checkpoint_fn is not None and checkpoint_every and (
                state.step % checkpoint_every == 0
            ):
                checkpoint_fn(state)
    finally:
        if sink is not None:
            sink.close()
    if checkpoint_fn is not None:
        checkpoint_fn(state)
    return records
