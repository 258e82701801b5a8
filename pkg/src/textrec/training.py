"""Adam training loop shared by every trainer in the package."""
from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Iterable
from pathlib import Path

import torch

logger = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8


def fit(
    params: Iterable[torch.Tensor],
    step_loss: Callable[[int], torch.Tensor],
    steps: int,
    lr: float,
    clip: float | None = 1.0,
    after_step: Callable[[int], None] | None = None,
    log_every: int = 0,
) -> list[float]:
    """Minimize ``step_loss(t)`` for ``steps`` Adam updates; returns the loss curve.

    ``after_step`` runs after each update (pruning masks hook in here).
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("nothing to train")
    opt = torch.optim.Adam(params, lr=lr, betas=BETAS, eps=EPS)
    curve: list[float] = []
    for t in range(steps):
        opt.zero_grad(set_to_none=True)
        loss = step_loss(t)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {t}: loss={loss.item()}")
        loss.backward()
        if clip is not None:
            torch.nn.utils.clip_grad_norm_(params, clip)
        opt.step()
        if after_step is not None:
            after_step(t)
        curve.append(float(loss.detach()))
        if log_every and t % log_every == 0:
            logger.info("step %d loss %.4f", t, curve[-1])
    return curve


def write_curve(path: str | Path, curve: list[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(v)])
