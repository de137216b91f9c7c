"""Experiment harness: configs, orchestration, evaluation and reports.

A run takes a flat key=value config file, trains (or loads) the vendor model,
queries it once per target example through the black-box oracle, distills,
fine-tunes, and evaluates, repeating over adaptation seeds and optionally
over a matrix of named ablation presets.  Reports are plain dicts with a
content fingerprint, emitted as JSON, CSV and optional plots.

The vendor model here is trained locally only to stand in for the remote
service; adaptation code still sees nothing but truncated query records.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import (
    AugmentationPolicy,
    Dataset,
    LabelShiftParams,
    SyntheticShiftSpec,
    apply_label_shift,
    load_image_list,
    make_synthetic_shift,
)
from .distill import DistillFlags, run_distillation
from .finetune import FinetuneFlags, run_finetune
from .networks import (
    OptimConfig,
    TargetModel,
    forward_logits,
    load_checkpoint,
    save_checkpoint,
    state_checksum,
    train_source,
)
from .oracle import BlackBoxOracle, QueryMode, query_dataset
from .pseudo import Hyperparams


class ConfigError(ValueError):
    """Bad configuration file or invalid field value. CLI exit code 1."""


# key -> (type, default, help)
CONFIG_SCHEMA: dict[str, tuple[str, object, str]] = {
    "dataset.kind": ("str", "synthetic", "synthetic | image_list"),
    "dataset.num_classes": ("int", 4, "number of classes K"),
    "dataset.dim": ("int", 2, "feature dimension (synthetic)"),
    "dataset.samples_per_class": ("int", 400, "per-class count in each domain (synthetic)"),
    "dataset.rotation_deg": ("float", 30.0, "target rotation in degrees (synthetic)"),
    "dataset.translation": ("float", 0.0, "target mean translation length (synthetic)"),
    "dataset.noise_scale": ("float", 0.7, "blob standard deviation (synthetic)"),
    "dataset.radius": ("float", 2.0, "blob circle radius (synthetic)"),
    "dataset.seed": ("int", 7, "generator seed (synthetic); fixed across run seeds"),
    "dataset.source_list": ("str", "", "source image-list file (image_list)"),
    "dataset.target_list": ("str", "", "target image-list file (image_list)"),
    "dataset.root": ("str", "", "path prefix for image-list entries"),
    "labelshift.mode": ("str", "none", "none | rsut | partial"),
    "labelshift.ratio": ("float", 0.7, "geometric decay per class rank (rsut)"),
    "labelshift.fraction": ("float", 0.5, "kept label fraction (partial, target only)"),
    "labelshift.seed": ("int", 0, "subsampling seed"),
    "oracle.mode": ("str", "soft_top_r", "hard | soft_top_r"),
    "oracle.r": ("int", 1, "returned top-r size (soft_top_r)"),
    "hp.beta": ("float", 0.5, "source vs prototype blend in the teacher init"),
    "hp.tau": ("float", 0.1, "prototype softmax temperature"),
    "hp.gamma": ("float", 0.7, "teacher bank EMA keep rate"),
    "hp.alpha": ("float", 0.3, "Beta(alpha, alpha) interpolation strength"),
    "hp.eta": ("float", 0.95, "confidence gate threshold, in (0, 1]"),
    "hp.rho": ("float", 0.5, "logit adjustment strength"),
    "hp.epsilon": ("float", 0.1, "label smoothing amount"),
    "hp.t_m": ("int", 30, "epochs per adaptation stage"),
    "hp.pca_dim": ("int", 0, "prototype feature dimension; 0 = min(256, n-1, e)"),
    "optim.lr_backbone": ("float", 1e-3, "encoder learning rate"),
    "optim.lr_new_layers": ("float", 1e-2, "bottleneck/classifier learning rate"),
    "optim.momentum": ("float", 0.9, "SGD momentum"),
    "optim.weight_decay": ("float", 1e-3, "SGD weight decay"),
    "optim.batch_size": ("int", 64, "mini-batch size"),
    "model.hidden": ("int", 128, "encoder hidden width"),
    "model.bottleneck": ("int", 256, "bottleneck output width"),
    "source.epochs": ("int", 50, "vendor training epochs"),
    "source.seed": ("int", 1234, "vendor training seed (fixed, not swept)"),
    "aug.sigma": ("float", 0.1, "weak jitter scale; strong uses 4x plus masking"),
    "aug.mask_fraction": ("float", 0.25, "strong-view coordinate mask share"),
    "seeds": ("int_list", [2024, 2025, 2026], "adaptation seeds"),
    "ablation.skd": ("bool", True, "teacher-KL distillation term"),
    "ablation.mix": ("bool", True, "interpolation consistency term"),
    "ablation.mi_distill": ("bool", True, "mutual-information term, step one"),
    "ablation.proto": ("bool", True, "prototype branch in the teacher init"),
    "ablation.fm": ("bool", False, "plain consistency loss, step two"),
    "ablation.afm": ("bool", True, "prior-adjusted consistency loss, step two"),
    "ablation.mi_finetune": ("bool", True, "mutual-information term, step two"),
    "output_dir": ("str", "runs/exp", "artifact directory (not fingerprinted)"),
}


def _coerce(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError("expected true or false")
        if kind == "int_list":
            return [int(v) for v in raw.split(",") if v.strip()]
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}: {e}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, validated configuration for one experiment."""

    values: tuple  # sorted (key, value) pairs; hashable

    def get(self, key: str):
        return dict(self.values)[key]

    def fingerprint(self) -> str:
        """Content hash over semantic fields. Artifact location is excluded."""
        h = hashlib.sha256()
        for key, value in self.values:
            if key == "output_dir":
                continue
            h.update(f"{key}={value!r}\n".encode())
        return h.hexdigest()

    # typed views -----------------------------------------------------------

    @property
    def seeds(self) -> list[int]:
        return list(self.get("seeds"))

    @property
    def output_dir(self) -> Path:
        return Path(self.get("output_dir"))

    def hyperparams(self) -> Hyperparams:
        pca = self.get("hp.pca_dim")
        return Hyperparams(
            r=self.get("oracle.r"),
            beta=self.get("hp.beta"),
            tau=self.get("hp.tau"),
            gamma=self.get("hp.gamma"),
            alpha=self.get("hp.alpha"),
            eta=self.get("hp.eta"),
            rho=self.get("hp.rho"),
            epsilon=self.get("hp.epsilon"),
            t_m=self.get("hp.t_m"),
            pca_dim=None if pca == 0 else pca,
        )

    def optim(self) -> OptimConfig:
        return OptimConfig(
            lr_backbone=self.get("optim.lr_backbone"),
            lr_new_layers=self.get("optim.lr_new_layers"),
            momentum=self.get("optim.momentum"),
            weight_decay=self.get("optim.weight_decay"),
            batch_size=self.get("optim.batch_size"),
        )

    def oracle_mode(self) -> QueryMode:
        return QueryMode(self.get("oracle.mode"), self.get("oracle.r"))

    def distill_flags(self) -> DistillFlags:
        return DistillFlags(
            skd=self.get("ablation.skd"),
            mix=self.get("ablation.mix"),
            mi=self.get("ablation.mi_distill"),
            proto=self.get("ablation.proto"),
        )

    def finetune_flags(self) -> FinetuneFlags:
        return FinetuneFlags(
            fm=self.get("ablation.fm"),
            afm=self.get("ablation.afm"),
            mi=self.get("ablation.mi_finetune"),
        )

    def weak_policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(kind="weak", sigma=self.get("aug.sigma"))

    def strong_policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(
            kind="strong",
            sigma=self.get("aug.sigma"),
            mask_fraction=self.get("aug.mask_fraction"),
        )

    def synthetic_spec(self) -> SyntheticShiftSpec:
        return SyntheticShiftSpec(
            num_classes=self.get("dataset.num_classes"),
            dim=self.get("dataset.dim"),
            samples_per_class=self.get("dataset.samples_per_class"),
            rotation_deg=self.get("dataset.rotation_deg"),
            translation=self.get("dataset.translation"),
            noise_scale=self.get("dataset.noise_scale"),
            radius=self.get("dataset.radius"),
            seed=self.get("dataset.seed"),
        )


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and validate flat ``key = value`` config text.

    Unknown keys, duplicate keys and out-of-range values are hard errors.
    ``#`` starts a comment, full-line or trailing.
    """
    values = {k: default for k, (_, default, _) in CONFIG_SCHEMA.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _coerce(key, CONFIG_SCHEMA[key][0], raw)
    for key, value in (overrides or {}).items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
        values[key] = value
    config = ExperimentConfig(tuple(sorted(values.items(), key=lambda kv: kv[0])))
    _validate(config)
    return config


def parse_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, overrides)


def default_config() -> ExperimentConfig:
    return parse_config_text("")


def config_help() -> str:
    """One documented line per config key."""
    lines = []
    for key, (kind, default, doc) in CONFIG_SCHEMA.items():
        if kind == "int_list":
            default = ",".join(str(v) for v in default)
        lines.append(f"{key} = {default}  # {kind}: {doc}")
    return "\n".join(lines)


def _validate(config: ExperimentConfig) -> None:
    def fail(msg):
        raise ConfigError(msg)

    if config.get("dataset.kind") not in ("synthetic", "image_list"):
        fail(f"dataset.kind must be synthetic or image_list, got {config.get('dataset.kind')!r}")
    if config.get("labelshift.mode") not in ("none", "rsut", "partial"):
        fail(f"labelshift.mode must be none, rsut or partial")
    if config.get("oracle.mode") not in ("hard", "soft_top_r"):
        fail(f"oracle.mode must be hard or soft_top_r, got {config.get('oracle.mode')!r}")
    if not (0.0 < config.get("hp.eta") <= 1.0):
        fail(f"hp.eta must be in (0, 1], got {config.get('hp.eta')}")
    if not config.seeds:
        fail("seeds must be nonempty")
    if config.get("dataset.kind") == "synthetic":
        k = config.get("dataset.num_classes")
        if not (1 <= config.get("oracle.r") <= k - 1):
            fail(f"oracle.r must be in [1, K-1] = [1, {k - 1}], got {config.get('oracle.r')}")
    if config.get("dataset.kind") == "image_list":
        if not config.get("dataset.source_list") or not config.get("dataset.target_list"):
            fail("image_list runs need dataset.source_list and dataset.target_list")
    try:
        config.hyperparams()
        config.optim()
        config.finetune_flags()
        config.synthetic_spec() if config.get("dataset.kind") == "synthetic" else None
    except ValueError as e:
        fail(str(e))


# ---------------------------------------------------------------------------
# evaluation


def default_loader(path: str) -> np.ndarray:
    """Loader hook for list datasets; handles .npy vectors out of the box."""
    if path.endswith(".npy"):
        return np.load(path)
    raise ValueError(f"no decoder wired for {path!r}; pass a custom loader")


def evaluate(model, dataset: Dataset, loader=None) -> dict:
    """Overall and per-class accuracy of a model on a labeled dataset.

    Per-class scores are recalls; their mean covers only classes present in
    the data, which is the number reported under label shift.
    """
    inputs = dataset.inputs_array(loader)
    preds = forward_logits(model, inputs).argmax(axis=1)
    return evaluate_predictions(preds, dataset.eval_labels, dataset.num_classes)


def evaluate_predictions(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels disagree on shape")
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    per_class = {}
    for c in range(num_classes):
        idx = labels == c
        if idx.any():
            per_class[c] = float((preds[idx] == c).mean())
    return {
        "accuracy": float((preds == labels).mean()),
        "per_class": per_class,
        "per_class_mean": float(np.mean(list(per_class.values()))),
        "n": int(len(labels)),
    }


# ---------------------------------------------------------------------------
# orchestration


PROD_FLAGS = DistillFlags(skd=True, mix=True, mi=True, proto=True)

# ablation presets mirroring the component build-up of the method
PRESETS: dict[str, tuple[DistillFlags | None, FinetuneFlags | None]] = {
    "no_adapt": (None, None),
    "skd": (DistillFlags(skd=True, mix=False, mi=False, proto=False), None),
    "skd_mix": (DistillFlags(skd=True, mix=True, mi=False, proto=False), None),
    "skd_mi": (DistillFlags(skd=True, mix=False, mi=True, proto=False), None),
    "prod_no_proto": (DistillFlags(skd=True, mix=True, mi=True, proto=False), None),
    "prod": (PROD_FLAGS, None),
    "prod_fm": (PROD_FLAGS, FinetuneFlags(fm=True, afm=False, mi=False)),
    "prod_afm": (PROD_FLAGS, FinetuneFlags(fm=False, afm=True, mi=False)),
    "prod_mi": (PROD_FLAGS, FinetuneFlags(fm=False, afm=False, mi=True)),
    "prod_fm_mi": (PROD_FLAGS, FinetuneFlags(fm=True, afm=False, mi=True)),
    "prodding": (PROD_FLAGS, FinetuneFlags(fm=False, afm=True, mi=True)),
}


def build_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Source and target datasets for a config, label shift applied."""
    if config.get("dataset.kind") == "synthetic":
        source, target = make_synthetic_shift(config.synthetic_spec())
    else:
        source = load_image_list(
            config.get("dataset.source_list"), config.get("dataset.root"), role="source"
        )
        target = load_image_list(
            config.get("dataset.target_list"),
            config.get("dataset.root"),
            num_classes=source.num_classes,
            role="target",
        )
    mode = config.get("labelshift.mode")
    if mode == "rsut":
        params = LabelShiftParams(
            ratio=config.get("labelshift.ratio"), seed=config.get("labelshift.seed")
        )
        source = apply_label_shift(source, "rsut", params)
        target = apply_label_shift(target, "rsut", params)
    elif mode == "partial":
        params = LabelShiftParams(
            fraction=config.get("labelshift.fraction"), seed=config.get("labelshift.seed")
        )
        target = apply_label_shift(target, "partial", params)
    return source, target


def prepare_source(config: ExperimentConfig, source: Dataset, verbose: bool = False):
    """Train the vendor model once per config, or reload its checkpoint."""
    path = config.output_dir / "source.pt"
    if path.exists():
        model, _ = load_checkpoint(path)
        return model
    model, _ = train_source(
        source,
        epsilon=config.get("hp.epsilon"),
        optim=config.optim(),
        epochs=config.get("source.epochs"),
        seed=config.get("source.seed"),
        hidden=config.get("model.hidden"),
        verbose=verbose,
    )
    save_checkpoint(model, path, seed=config.get("source.seed"))
    return model


def _fresh_target_model(config: ExperimentConfig, in_dim: int, seed: int) -> TargetModel:
    torch.manual_seed(seed)
    return TargetModel(
        in_dim,
        config.get("dataset.num_classes"),
        hidden=config.get("model.hidden"),
        bottleneck_dim=config.get("model.bottleneck"),
    )


def run_experiment(
    config: ExperimentConfig,
    presets: list[str] | None = None,
    verbose: bool = False,
) -> dict:
    """Run the full pipeline for each seed (and preset) and build the Report.

    With ``presets`` of None the config's own ablation flags run under the
    preset name "config".  A failing stage marks that preset/seed pair as
    partial instead of aborting the whole run.
    """
    torch.set_num_threads(1)  # keep reductions bit-reproducible
    if config.get("dataset.kind") == "image_list":
        raise ConfigError(
            "run_experiment drives the synthetic benchmark; image-list datasets "
            "are supported at the library level (plug a loader and call the "
            "stage functions directly)"
        )
    t_start = time.time()
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_datasets(config)

    source_model = prepare_source(config, source, verbose=verbose)
    oracle = BlackBoxOracle(source_model)
    mode = config.oracle_mode()
    cache_path = out / f"oracle_cache_{mode.key.replace(':', '_')}.jsonl"
    records = query_dataset(oracle, target, mode, cache_path=cache_path)
    queries_issued = oracle.log.count

    labels = target.eval_labels
    top1 = np.array([records[i].top1 for i in target.ids])
    no_adapt = evaluate_predictions(top1, labels, target.num_classes)

    if presets is None:
        chosen = {"config": (config.distill_flags(), config.finetune_flags())}
    else:
        unknown = [p for p in presets if p not in PRESETS]
        if unknown:
            raise ConfigError(f"unknown presets {unknown}; valid: {list(PRESETS)}")
        chosen = {name: PRESETS[name] for name in presets}

    hp = config.hyperparams()
    optim = config.optim()
    inputs = target.inputs_array()
    report = {
        "config_fingerprint": config.fingerprint(),
        "oracle_mode": mode.key,
        "num_classes": target.num_classes,
        "n_target": len(target),
        "queries_issued": queries_issued,
        "seeds": config.seeds,
        "no_adapt": no_adapt,
        "presets": {},
        "partial": [],
    }

    distill_memo: dict = {}
    for name, (dflags, fflags) in chosen.items():
        per_seed = {}
        for seed in config.seeds:
            try:
                per_seed[str(seed)] = _run_one(
                    config, target, inputs, records, hp, optim, seed, name,
                    dflags, fflags, no_adapt, distill_memo, verbose,
                )
            except Exception as e:  # partial seeds are recorded, not fatal
                report["partial"].append(
                    {"preset": name, "seed": seed, "error": f"{type(e).__name__}: {e}"}
                )
                if verbose:
                    traceback.print_exc()
        accs = [row["accuracy"] for row in per_seed.values()]
        entry = {"per_seed": per_seed}
        if accs:
            entry["mean_accuracy"] = float(np.mean(accs))
            entry["mean_per_class"] = float(
                np.mean([row["per_class_mean"] for row in per_seed.values()])
            )
        report["presets"][name] = entry
        if verbose and accs:
            print(f"[harness] preset {name}: mean accuracy {entry['mean_accuracy']:.4f}")

    report["fingerprint"] = report_fingerprint(report)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    if verbose:
        print(f"[harness] done in {time.time() - t_start:.1f}s -> {out / 'report.json'}")
    return report


def _run_one(
    config, target, inputs, records, hp, optim, seed, name,
    dflags, fflags, no_adapt, distill_memo, verbose,
) -> dict:
    """One preset under one seed: distill, fine-tune, evaluate."""
    out = config.output_dir
    row: dict = {"preset": name, "seed": seed}
    d_active = dflags is not None and dflags.any_active()
    f_active = fflags is not None and fflags.any_active()
    if not d_active and not f_active:
        # no adaptation at all: the report row is the oracle's own accuracy
        row.update(no_adapt)
        row["checksum"] = None
        return row

    stage_dir = out / name / f"seed{seed}"
    stage_dir.mkdir(parents=True, exist_ok=True)

    model = _fresh_target_model(config, inputs.shape[1], seed)
    distill_curve: list[float] = []
    if d_active:
        memo_key = (seed, dflags)
        if memo_key in distill_memo:
            state, bank_path, distill_curve, distill_epochs = distill_memo[memo_key]
            model.load_state_dict(copy.deepcopy(state))
            row["distill_loss"] = distill_epochs
        else:
            def on_epoch(m, epoch, bank):
                distill_curve.append(evaluate(m, target)["accuracy"])

            model, hist = run_distillation(
                model, target, records, hp, optim, seed,
                flags=dflags, epoch_callback=on_epoch,
                metrics_path=stage_dir / "distill_metrics.jsonl",
                keep_snapshots=False, verbose=verbose,
            )
            hist["bank"].save(stage_dir / "teacher_bank.json")
            row["distill_loss"] = [bd.to_json() for bd in hist["epochs"]]
            distill_memo[memo_key] = (
                copy.deepcopy(model.state_dict()),
                stage_dir / "teacher_bank.json",
                distill_curve,
                row["distill_loss"],
            )
        save_checkpoint(model, stage_dir / "distilled.pt", seed=seed, stage="distill")
    row["distill_curve"] = list(distill_curve)
    row["distill_accuracy"] = evaluate(model, target)["accuracy"] if d_active else None

    finetune_curve: list[float] = []
    if f_active:
        def on_ft_epoch(m, epoch, pi):
            finetune_curve.append(evaluate(m, target)["accuracy"])

        model, hist = run_finetune(
            model, target, hp, optim, seed,
            flags=fflags,
            weak_policy=config.weak_policy(),
            strong_policy=config.strong_policy(),
            epoch_callback=on_ft_epoch,
            metrics_path=stage_dir / "finetune_metrics.jsonl",
            verbose=verbose,
        )
        row["finetune_loss"] = hist["epochs"]
    row["finetune_curve"] = list(finetune_curve)

    save_checkpoint(model, stage_dir / "final.pt", seed=seed, stage=name)
    row.update(evaluate(model, target))
    row["checksum"] = state_checksum(model)
    return row


def report_fingerprint(report: dict) -> str:
    """Content hash of a report's results.

    Operational fields are excluded: the stored fingerprint itself and the
    query tally, which is legitimately zero on warm-cache reruns.
    """
    trimmed = {k: v for k, v in report.items() if k not in ("fingerprint", "queries_issued")}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# report emission


def emit_report(report: dict, out_dir: str | Path, formats: tuple[str, ...] = ("json", "csv")) -> list[Path]:
    """Write a report as JSON/CSV, plus accuracy-curve plots when asked.

    ``formats`` may include "json", "csv" and "plots".  Returns the paths
    written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out_dir / "report.json"
        with open(path, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
        written.append(path)
    if "csv" in formats:
        path = out_dir / "accuracy.csv"
        seeds = [str(s) for s in report["seeds"]]
        with open(path, "w") as f:
            f.write("preset," + ",".join(f"seed{s}" for s in seeds) + ",mean\n")
            if "no_adapt" not in report["presets"]:
                base = f"{report['no_adapt']['accuracy']:.4f}"
                f.write("no_adapt," + ",".join(base for _ in seeds) + f",{base}\n")
            for name, entry in report["presets"].items():
                cells = []
                for s in seeds:
                    row = entry["per_seed"].get(s)
                    cells.append(f"{row['accuracy']:.4f}" if row else "NA")
                mean = entry.get("mean_accuracy")
                mean_cell = "NA" if mean is None else f"{mean:.4f}"
                f.write(f"{name}," + ",".join(cells) + f",{mean_cell}\n")
        written.append(path)
    if "plots" in formats:
        written.extend(_plot_curves(report, out_dir))
    return written


def _plot_curves(report: dict, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for pi, (name, entry) in enumerate(report["presets"].items()):
        for seed, row in entry["per_seed"].items():
            d = row.get("distill_curve") or []
            ft = row.get("finetune_curve") or []
            color = colors[pi % len(colors)]
            if d:
                ax.plot(range(1, len(d) + 1), d, color=color, alpha=0.6,
                        label=f"{name} distill" if seed == list(entry["per_seed"])[0] else None)
            if ft:
                ax.plot(range(len(d) + 1, len(d) + len(ft) + 1), ft, color=color,
                        alpha=0.6, linestyle="--",
                        label=f"{name} finetune" if seed == list(entry["per_seed"])[0] else None)
    ax.axhline(report["no_adapt"]["accuracy"], color="gray", linestyle=":", label="no_adapt")
    ax.set_xlabel("epoch")
    ax.set_ylabel("target accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "accuracy_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
