"""Step one: distill a target model from the teacher bank.

Per batch the objective is

    total = skd + mix - mi

where ``skd`` is the KL divergence from the per-example teacher rows to the
student's softmax, ``mix`` is an interpolation-consistency term (train the
student to respond linearly between examples, against its own detached
predictions), and ``mi`` is the mutual information between inputs and
predictions, maximized to keep outputs confident yet diverse.  After every
epoch the teacher bank drifts toward the student's clean evaluation-mode
predictions.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import OptimConfig, make_optimizer, predict_probs, set_progress
from .pseudo import (
    Hyperparams,
    TeacherBank,
    compute_prototypes,
    default_pca_dim,
    init_teacher,
    ema_update,
    prototype_pseudo_labels,
    reduce_features,
    smooth_query_results,
)


@dataclass(frozen=True)
class DistillFlags:
    """Ablation switches for the distillation objective."""

    skd: bool = True
    mix: bool = True
    mi: bool = True
    proto: bool = True

    def any_active(self) -> bool:
        return self.skd or self.mix or self.mi


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components of one step or one epoch; total = skd + mix - mi."""

    skd: float = 0.0
    mix: float = 0.0
    mi: float = 0.0
    total: float = 0.0

    def to_json(self) -> dict:
        return {"skd": self.skd, "mix": self.mix, "mi": self.mi, "total": self.total}


@contextmanager
def frozen_bn_stats(model: nn.Module):
    """Temporarily stop batch-norm running-stat updates (batch stats still used)."""
    saved = []
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            saved.append((m, m.track_running_stats))
            m.track_running_stats = False
    try:
        yield
    finally:
        for m, flag in saved:
            m.track_running_stats = flag


def skd_loss(teacher: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Mean KL(teacher row || student softmax) over the batch.

    Teacher rows are probability vectors and carry no gradient; zero entries
    contribute zero.
    """
    teacher = teacher.detach()
    log_student = F.log_softmax(student_logits, dim=-1)
    return F.kl_div(log_student, teacher, reduction="batchmean")


def mix_inputs(a: torch.Tensor, b: torch.Tensor, lam: float) -> torch.Tensor:
    """Convex combination lam * a + (1 - lam) * b."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    return lam * a + (1.0 - lam) * b


def ict_loss(
    model: nn.Module,
    x: torch.Tensor,
    alpha: float,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Interpolation consistency: predict the mix of own predictions on mixed inputs.

    One lam ~ Beta(alpha, alpha) per batch; partners come from a permutation
    drawn from ``rng``.  The interpolated target distribution is computed
    without gradient, so only the mixed-input branch trains.
    """
    n = x.shape[0]
    if n < 2:
        raise ValueError("interpolation needs a batch of at least 2")
    lam = float(rng.beta(alpha, alpha))
    perm = torch.as_tensor(rng.permutation(n))
    with torch.no_grad(), frozen_bn_stats(model):
        p_i = F.softmax(model(x), dim=-1)
        p_j = p_i[perm]
        target = mix_inputs(p_i, p_j, lam)
    logits_mix = model(mix_inputs(x, x[perm], lam))
    return -(target * F.log_softmax(logits_mix, dim=-1)).sum(dim=-1).mean()


def mutual_info(logits: torch.Tensor) -> torch.Tensor:
    """Mutual information between input index and predicted class.

    Entropy of the batch-mean prediction minus mean per-example entropy;
    bounded by [0, ln K].
    """
    probs = F.softmax(logits, dim=-1)
    marginal = probs.mean(dim=0)
    h_marginal = -torch.special.xlogy(marginal, marginal).sum()
    h_cond = -torch.special.xlogy(probs, probs).sum(dim=-1).mean()
    return h_marginal - h_cond


def prod_step(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    x: torch.Tensor,
    teacher_rows: torch.Tensor,
    hp: Hyperparams,
    flags: DistillFlags = DistillFlags(),
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """One distillation SGD step on a batch. Returns the loss components."""
    model.train()
    rng = rng or np.random.default_rng(0)
    zero = torch.zeros((), dtype=x.dtype)
    skd = mix = mi = zero
    if flags.skd or flags.mi:
        logits = model(x)
        if flags.skd:
            skd = skd_loss(teacher_rows.to(x.dtype), logits)
        if flags.mi:
            mi = mutual_info(logits)
    if flags.mix:
        mix = ict_loss(model, x, hp.alpha, rng)
    total = skd + mix - mi
    if flags.any_active():
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
    return LossBreakdown(
        float(skd.detach()), float(mix.detach()), float(mi.detach()), float(total.detach())
    )


def build_teacher_bank(
    model: nn.Module,
    dataset,
    oracle_results: dict,
    hp: Hyperparams,
    proto: bool = True,
) -> TeacherBank:
    """Initial teacher bank from smoothed oracle records and prototypes.

    The prototype branch runs on the model's current encoder features,
    reduced and normalized; with ``proto`` off (or beta = 1) the bank is the
    smoothed source predictions alone.
    """
    ids = dataset.ids
    k = dataset.num_classes
    p_src = smooth_query_results(oracle_results, ids, k, hp.epsilon)
    beta = hp.beta if proto else 1.0
    if beta == 1.0:
        return init_teacher(ids, p_src, None, 1.0)
    inputs = dataset.inputs_array()
    feats = _encoder_features(model, inputs)
    d = hp.pca_dim if hp.pca_dim is not None else default_pca_dim(len(inputs), feats.shape[1])
    reduced = reduce_features(feats, d)
    protos = compute_prototypes(reduced, p_src)
    p_proto = prototype_pseudo_labels(reduced, protos, hp.tau)
    return init_teacher(ids, p_src, p_proto, beta)


def _encoder_features(model: nn.Module, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            xb = torch.as_tensor(inputs[i : i + batch_size], dtype=dtype)
            outs.append(model.features(xb).double().numpy())
    if was_training:
        model.train()
    return np.concatenate(outs)


def _batch_slices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    n = len(order)
    n_b = math.ceil(n / batch_size)
    batches = [order[b * batch_size : (b + 1) * batch_size] for b in range(n_b)]
    # batch norm cannot take a singleton in training mode; fold it back
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def run_distillation(
    model: nn.Module,
    dataset,
    oracle_results: dict,
    hp: Hyperparams,
    optim: OptimConfig | None = None,
    seed: int = 2024,
    flags: DistillFlags = DistillFlags(),
    epoch_callback=None,
    metrics_path: str | Path | None = None,
    keep_snapshots: bool = True,
    verbose: bool = False,
):
    """Distill ``model`` from the oracle records for ``hp.t_m`` epochs.

    The teacher bank is built once up front, then updated by EMA from the
    student's clean evaluation-mode predictions after every epoch.  Returns
    ``(model, history)``; history carries per-epoch mean loss components,
    bank snapshots and the final bank.
    """
    optim = optim or OptimConfig()
    inputs = dataset.inputs_array()
    n = len(inputs)
    if n == 0:
        raise ValueError("empty target dataset")
    missing = [i for i in dataset.ids if i not in oracle_results]
    if missing:
        raise ValueError(f"oracle records missing for {len(missing)} ids, e.g. {missing[0]!r}")

    bank = build_teacher_bank(model, dataset, oracle_results, hp, proto=flags.proto)
    optimizer = make_optimizer(model, optim)
    rng = np.random.default_rng([int(seed), 0xD157])
    ids = dataset.ids

    n_b = math.ceil(n / optim.batch_size)
    total_steps = max(1, hp.t_m * n_b)
    history = {"epochs": [], "bank_snapshots": [], "bank": bank}
    metrics_file = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics_file = open(metrics_path, "w")

    step = 0
    try:
        for epoch in range(hp.t_m):
            order = rng.permutation(n)
            sums = np.zeros(4)
            batches = _batch_slices(order, optim.batch_size)
            for bi, idx in enumerate(batches):
                set_progress(optimizer, optim, step / total_steps)
                xb = torch.as_tensor(inputs[idx])
                rows = torch.as_tensor(bank.rows([ids[i] for i in idx]))
                bd = prod_step(model, optimizer, xb, rows, hp, flags, rng)
                sums += [bd.skd, bd.mix, bd.mi, bd.total]
                if metrics_file is not None:
                    metrics_file.write(
                        json.dumps({"epoch": epoch, "step": bi, **bd.to_json()}) + "\n"
                    )
                step += 1
            student = predict_probs(model, inputs)
            ema_update(bank, student, hp.gamma)
            mean_bd = LossBreakdown(*(float(v) for v in sums / len(batches)))
            history["epochs"].append(mean_bd)
            if keep_snapshots:
                history["bank_snapshots"].append(bank.matrix.copy())
            if verbose:
                print(
                    f"[distill] epoch {epoch + 1}/{hp.t_m} "
                    f"skd {mean_bd.skd:.4f} mix {mean_bd.mix:.4f} mi {mean_bd.mi:.4f}"
                )
            if epoch_callback is not None:
                epoch_callback(model, epoch, bank)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return model, history
