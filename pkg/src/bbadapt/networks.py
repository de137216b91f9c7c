"""Model definitions and source-domain training.

The vendor-side model is an encoder plus one linear head, nothing else.  The
adaptation-side model inserts a bottleneck (batch norm, then a linear map to a
fixed width) and classifies with a row-normalized linear layer whose weight
rows stay on the unit sphere by construction.

Optimization everywhere is mini-batch SGD with momentum and a polynomial
learning-rate decay in training progress; backbone parameters run at a tenth
of the rate of freshly added layers.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class MLPEncoder(nn.Module):
    """Two-layer perceptron encoder for vector inputs.

    Output features are post-ReLU, so they are nonnegative like pooled
    features of the usual pretrained convolutional backbones.
    """

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
        )
        self.out_dim = hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


ENCODERS: dict[str, Callable[..., nn.Module]] = {
    "mlp": MLPEncoder,
}


class RowNormLinear(nn.Module):
    """Linear layer whose effective weight has unit-L2 rows.

    The raw parameter is free; the forward pass renormalizes each row, so the
    constraint survives every optimizer step exactly.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight_raw = nn.Parameter(torch.empty(out_dim, in_dim))
        nn.init.kaiming_uniform_(self.weight_raw, a=math.sqrt(5))

    @property
    def effective_weight(self) -> torch.Tensor:
        return F.normalize(self.weight_raw, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight)


class SourceModel(nn.Module):
    """Encoder plus a single linear head. Stays on the vendor side."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 64, encoder: str = "mlp"):
        super().__init__()
        self.arch = {
            "kind": "source",
            "in_dim": in_dim,
            "num_classes": num_classes,
            "hidden": hidden,
            "encoder": encoder,
        }
        self.encoder = ENCODERS[encoder](in_dim, hidden)
        self.head = nn.Linear(self.encoder.out_dim, num_classes)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


class TargetModel(nn.Module):
    """Adaptation-side model: encoder, bottleneck, row-normalized classifier.

    The bottleneck applies batch normalization to the encoder features and
    then maps them linearly to ``bottleneck_dim``.
    """

    def __init__(
        self,
        in_dim: int,
        num_classes: int,
        hidden: int = 64,
        bottleneck_dim: int = 256,
        encoder: str = "mlp",
    ):
        super().__init__()
        self.arch = {
            "kind": "target",
            "in_dim": in_dim,
            "num_classes": num_classes,
            "hidden": hidden,
            "bottleneck_dim": bottleneck_dim,
            "encoder": encoder,
        }
        self.encoder = ENCODERS[encoder](in_dim, hidden)
        self.bottleneck = nn.Sequential(
            nn.BatchNorm1d(self.encoder.out_dim),
            nn.Linear(self.encoder.out_dim, bottleneck_dim),
        )
        self.classifier = RowNormLinear(bottleneck_dim, num_classes)
        self.num_classes = num_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder output, the space prototypes are computed in."""
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.bottleneck(self.encoder(x)))


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class OptimConfig:
    """SGD settings shared by every training stage."""

    lr_backbone: float = 1e-3
    lr_new_layers: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64

    def __post_init__(self):
        if self.lr_backbone < 0 or self.lr_new_layers < 0:
            raise ValueError("learning rates must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(cfg: OptimConfig, progress: float) -> tuple[float, float]:
    """Learning rates at training progress p in [0, 1].

    Both groups decay by (1 + 10 p) ** -0.75, so the backbone/new-layer ratio
    is constant throughout.
    """
    if not (0.0 <= progress <= 1.0):
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    decay = (1.0 + 10.0 * progress) ** (-0.75)
    return cfg.lr_backbone * decay, cfg.lr_new_layers * decay


def make_optimizer(model: nn.Module, cfg: OptimConfig) -> torch.optim.SGD:
    """SGD with two parameter groups: encoder at lr_backbone, the rest at lr_new_layers."""
    backbone, new = [], []
    for name, p in model.named_parameters():
        (backbone if name.startswith("encoder.") else new).append(p)
    groups = [
        {"params": backbone, "lr": cfg.lr_backbone, "tag": "backbone"},
        {"params": new, "lr": cfg.lr_new_layers, "tag": "new_layers"},
    ]
    return torch.optim.SGD(
        groups, momentum=cfg.momentum, weight_decay=cfg.weight_decay, nesterov=False
    )


def set_progress(optimizer: torch.optim.Optimizer, cfg: OptimConfig, progress: float) -> None:
    """Write the scheduled learning rates for ``progress`` into the optimizer."""
    lr_b, lr_n = lr_at(cfg, progress)
    for group in optimizer.param_groups:
        group["lr"] = lr_b if group.get("tag") == "backbone" else lr_n


# ---------------------------------------------------------------------------
# losses and inference helpers


def smoothed_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Cross entropy against smoothed one-hot targets.

    The target for label y puts 1 - epsilon on y and spreads epsilon
    uniformly over all K classes.  epsilon = 0 recovers plain cross entropy;
    epsilon = 1 is a uniform target.
    """
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    k = logits.shape[-1]
    log_probs = F.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    uniform = -log_probs.mean(dim=-1)
    return ((1.0 - epsilon) * nll + epsilon * uniform).mean()


def forward_logits(model: nn.Module, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode logits for a stacked input array, as float64 numpy."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            xb = torch.as_tensor(inputs[i : i + batch_size], dtype=dtype)
            outs.append(model(xb).double().numpy())
    if was_training:
        model.train()
    if not outs:
        return np.zeros((0, model.num_classes))
    return np.concatenate(outs)


def predict_probs(model: nn.Module, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode softmax outputs, rows summing to one in float64."""
    logits = forward_logits(model, inputs, batch_size)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(model: nn.Module, inputs: np.ndarray, labels: np.ndarray) -> float:
    logits = forward_logits(model, inputs)
    return float((logits.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# source training


def train_source(
    data,
    epsilon: float = 0.1,
    optim: OptimConfig | None = None,
    epochs: int = 50,
    seed: int = 1234,
    val_data=None,
    hidden: int = 64,
    verbose: bool = False,
):
    """Train the vendor model on labeled source data with label smoothing.

    Keeps the epoch snapshot with the best source accuracy, measured on
    ``val_data`` when given and on the training split otherwise.  Returns
    ``(model, history)`` where history holds per-epoch loss and accuracy.
    """
    optim = optim or OptimConfig()
    inputs = data.inputs_array()
    labels = data.train_labels
    n = len(inputs)
    if n == 0:
        raise ValueError("empty source dataset")
    eval_inputs = val_data.inputs_array() if val_data is not None else inputs
    eval_labels = val_data.train_labels if val_data is not None else labels

    torch.manual_seed(seed)
    model = SourceModel(inputs.shape[1], data.num_classes, hidden=hidden)
    optimizer = make_optimizer(model, optim)
    rng = np.random.default_rng([int(seed), 0x5EC])

    n_b = math.ceil(n / optim.batch_size)
    total_steps = max(1, epochs * n_b)
    history = {"loss": [], "accuracy": []}
    best_acc, best_state, step = -1.0, None, 0
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(n_b):
            idx = order[b * optim.batch_size : (b + 1) * optim.batch_size]
            set_progress(optimizer, optim, step / total_steps)
            xb = torch.as_tensor(inputs[idx])
            yb = torch.as_tensor(labels[idx])
            loss = smoothed_cross_entropy(model(xb), yb, epsilon)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            step += 1
        acc = accuracy(model, eval_inputs, eval_labels)
        history["loss"].append(epoch_loss / n_b)
        history["accuracy"].append(acc)
        if acc > best_acc:
            best_acc = acc
            best_state = copy.deepcopy(model.state_dict())
        if verbose:
            print(f"[source] epoch {epoch + 1}/{epochs} loss {epoch_loss / n_b:.4f} acc {acc:.4f}")
    model.load_state_dict(best_state)
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: nn.Module, path: str | Path, **meta) -> None:
    """Serialize a model with its architecture spec for bit-exact reload."""
    payload = {
        "arch": dict(model.arch),
        "state": model.state_dict(),
        "meta": dict(meta),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild a model from :func:`save_checkpoint` output."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    arch = payload["arch"]
    if arch["kind"] == "source":
        model = SourceModel(arch["in_dim"], arch["num_classes"], arch["hidden"], arch["encoder"])
    elif arch["kind"] == "target":
        model = TargetModel(
            arch["in_dim"], arch["num_classes"], arch["hidden"], arch["bottleneck_dim"], arch["encoder"]
        )
    else:
        raise ValueError(f"unknown checkpoint kind {arch['kind']!r}")
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["meta"]


def state_checksum(model: nn.Module) -> str:
    """sha256 over all parameters and buffers in state-dict order."""
    h = hashlib.sha256()
    for key, tensor in model.state_dict().items():
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
