"""Step two: debiased fine-tuning on unlabeled target data.

The distilled model teaches itself with a weak-to-strong consistency loss:
confident predictions on a weakly augmented view become hard pseudo-labels
for a strongly augmented view.  Because the distilled model inherits the
source model's class bias, the strong-view logits are shifted by
``rho * log(pi)`` before the cross entropy, where ``pi`` is the class prior
estimated afresh from the pseudo-labels at the start of every epoch.  The
mutual-information term from step one stays on, computed on all weak views.

    total = afm - mi
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AugmentationPolicy, augment_batch
from .distill import _batch_slices, mutual_info
from .networks import OptimConfig, make_optimizer, predict_probs, set_progress
from .pseudo import Hyperparams


@dataclass(frozen=True)
class FinetuneFlags:
    """Ablation switches for the fine-tuning objective.

    ``fm`` and ``afm`` select the plain or the prior-adjusted consistency
    loss; they are mutually exclusive.
    """

    fm: bool = False
    afm: bool = True
    mi: bool = True

    def __post_init__(self):
        if self.fm and self.afm:
            raise ValueError("fm and afm are mutually exclusive")

    def any_active(self) -> bool:
        return self.fm or self.afm or self.mi


@dataclass(frozen=True)
class DingBreakdown:
    """Loss components of one fine-tuning step; total = afm - mi."""

    afm: float = 0.0
    mi: float = 0.0
    total: float = 0.0

    def to_json(self) -> dict:
        return {"afm": self.afm, "mi": self.mi, "total": self.total}


def estimate_prior(pseudo_labels: np.ndarray, num_classes: int, floor: float = 1e-4) -> np.ndarray:
    """Class prior from pseudo-label frequencies, floored and renormalized.

    Every class keeps at least ``floor`` mass so the downstream log never
    sees a zero.
    """
    y = np.asarray(pseudo_labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("cannot estimate a prior from zero pseudo-labels")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError("pseudo-label outside [0, num_classes)")
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    pi = counts / counts.sum()
    pi = np.maximum(pi, floor)
    return pi / pi.sum()


def _gate(weak_logits: torch.Tensor, eta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Pseudo-labels and confidence mask from the weak view, gradients blocked."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    with torch.no_grad():
        probs = F.softmax(weak_logits, dim=-1)
        conf, yhat = probs.max(dim=-1)
        mask = conf >= eta
    return yhat, mask


def fixmatch_loss(weak_logits: torch.Tensor, strong_logits: torch.Tensor, eta: float) -> torch.Tensor:
    """Consistency loss: cross entropy of strong-view logits against gated weak pseudo-labels.

    Mean over the samples whose weak confidence clears ``eta``; zero when
    none do.  No gradient flows through the weak branch.
    """
    yhat, mask = _gate(weak_logits, eta)
    if not bool(mask.any()):
        return strong_logits.sum() * 0.0
    return F.cross_entropy(strong_logits[mask], yhat[mask])


def adjusted_fixmatch_loss(
    weak_logits: torch.Tensor,
    strong_logits: torch.Tensor,
    eta: float,
    pi: np.ndarray | torch.Tensor,
    rho: float,
) -> torch.Tensor:
    """Debiased consistency: strong logits shifted by rho * log(pi) before the CE.

    Gate and pseudo-labels still come from the unadjusted weak view.  ``pi``
    must be strictly positive (pre-floored); rho = 0 or a uniform prior
    reduce this to :func:`fixmatch_loss` exactly.
    """
    pi_t = torch.as_tensor(pi, dtype=strong_logits.dtype)
    if pi_t.shape != strong_logits.shape[-1:]:
        raise ValueError("pi must have one entry per class")
    if bool((pi_t <= 0).any()):
        raise ValueError("pi must be strictly positive; floor it first")
    yhat, mask = _gate(weak_logits, eta)
    if not bool(mask.any()):
        return strong_logits.sum() * 0.0
    adjusted = strong_logits + rho * torch.log(pi_t)
    return F.cross_entropy(adjusted[mask], yhat[mask])


def ding_step(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    weak_x: torch.Tensor,
    strong_x: torch.Tensor,
    pi: np.ndarray,
    hp: Hyperparams,
    flags: FinetuneFlags = FinetuneFlags(),
) -> tuple[DingBreakdown, float]:
    """One fine-tuning SGD step. Returns loss components and the gate pass rate.

    The weak view is forwarded once; that pass feeds the gate, the
    pseudo-labels and the mutual-information term.
    """
    model.train()
    weak_logits = model(weak_x)
    _, mask = _gate(weak_logits, hp.eta)
    pass_rate = float(mask.double().mean())
    zero = weak_logits.sum() * 0.0
    afm = mi = zero
    if flags.mi:
        mi = mutual_info(weak_logits)
    if flags.afm:
        afm = adjusted_fixmatch_loss(weak_logits, model(strong_x), hp.eta, pi, hp.rho)
    elif flags.fm:
        afm = fixmatch_loss(weak_logits, model(strong_x), hp.eta)
    total = afm - mi
    if flags.any_active():
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
    return (
        DingBreakdown(float(afm.detach()), float(mi.detach()), float(total.detach())),
        pass_rate,
    )


def _seed_for(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def run_finetune(
    model: nn.Module,
    dataset,
    hp: Hyperparams,
    optim: OptimConfig | None = None,
    seed: int = 2024,
    flags: FinetuneFlags = FinetuneFlags(),
    weak_policy: AugmentationPolicy | None = None,
    strong_policy: AugmentationPolicy | None = None,
    epoch_callback=None,
    metrics_path: str | Path | None = None,
    verbose: bool = False,
):
    """Fine-tune the distilled model for ``hp.t_m`` epochs on unlabeled target data.

    Each epoch opens with a full evaluation-mode pass over the weakly
    augmented target set to refresh the pseudo-labels and the class prior,
    then runs the batched consistency updates.  Returns ``(model, history)``
    with per-epoch prior, pass rate and loss components.
    """
    optim = optim or OptimConfig()
    weak_policy = weak_policy or AugmentationPolicy(kind="weak")
    strong_policy = strong_policy or AugmentationPolicy(kind="strong", sigma=weak_policy.sigma)
    inputs = dataset.inputs_array()
    n = len(inputs)
    if n == 0:
        raise ValueError("empty target dataset")
    k = dataset.num_classes

    first_probs = predict_probs(model, inputs)
    # an untrained model is within a few percent of exactly uniform
    if float(first_probs.max(axis=1).mean()) < 1.05 / k:
        warnings.warn("model predictions are near uniform; expected a distilled checkpoint")

    optimizer = make_optimizer(model, optim)
    rng = np.random.default_rng([int(seed), 0xF17E])
    n_b = math.ceil(n / optim.batch_size)
    total_steps = max(1, hp.t_m * n_b)
    history = {"epochs": []}
    metrics_file = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics_file = open(metrics_path, "w")

    step = 0
    try:
        for epoch in range(hp.t_m):
            # refresh pseudo-labels and prior on the weak view, eval mode
            xw_full = augment_batch(inputs, weak_policy, _seed_for(seed, epoch, 0))
            probs = predict_probs(model, xw_full)
            pi = estimate_prior(probs.argmax(axis=1), k)

            order = rng.permutation(n)
            sums = np.zeros(3)
            rates = []
            batches = _batch_slices(order, optim.batch_size)
            for bi, idx in enumerate(batches):
                set_progress(optimizer, optim, step / total_steps)
                raw = inputs[idx]
                xw = torch.as_tensor(augment_batch(raw, weak_policy, _seed_for(seed, epoch, 1, bi)))
                xs = torch.as_tensor(augment_batch(raw, strong_policy, _seed_for(seed, epoch, 2, bi)))
                bd, rate = ding_step(model, optimizer, xw, xs, pi, hp, flags)
                sums += [bd.afm, bd.mi, bd.total]
                rates.append(rate)
                step += 1
            record = {
                "epoch": epoch,
                "pi": pi.tolist(),
                "pass_rate": float(np.mean(rates)),
                "afm": float(sums[0] / len(batches)),
                "mi": float(sums[1] / len(batches)),
                "total": float(sums[2] / len(batches)),
            }
            history["epochs"].append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + "\n")
            if verbose:
                print(
                    f"[finetune] epoch {epoch + 1}/{hp.t_m} afm {record['afm']:.4f} "
                    f"mi {record['mi']:.4f} pass {record['pass_rate']:.2f}"
                )
            if epoch_callback is not None:
                epoch_callback(model, epoch, pi)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return model, history
