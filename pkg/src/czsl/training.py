"""Objective assembly, the deterministic training loop, and checkpoint I/O.

Checkpoints are .npz archives holding every state tensor plus a JSON metadata
blob (schema version, config, label space, backbone seed/kind, optimizer
state); identical content serializes to identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .aggregation import STRATEGIES
from .data import (
    LabelSpace,
    SplitArrays,
    init_semantic_embeddings,
    load_manifest,
    load_split,
)
from .errors import (
    CheckpointSchemaError,
    ConfigurationError,
    DataValidationError,
    TrainingAborted,
)
from .focus import branch_attention_maps, focus_consistency_loss
from .model import FUSE_MODES, POOLINGS, ModelConfig, ThreeBranchNet

CHECKPOINT_SCHEMA = 1
SCHEDULES = ("cosine", "constant")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    alpha: float = 3.0
    tau: float = 16.0
    lr: float = 5e-5
    weight_decay: float = 5e-5  # published recipe ties this to the learning rate
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    schedule: str = "cosine"
    strategy: str = "learned"
    pooling: str = "attention"
    focus_loss: bool = True
    detach_maps: bool = False
    levels: tuple = (1, 2, 3)
    image_size: int = 64
    stage_channels: tuple = (16, 32, 64, 128)
    predictor_channels: tuple = (16, 32, 64)
    target_channels: int = 128
    embed_dim: int = 64
    gcn_hidden: int = 128
    gcn_layers: int = 2
    head_hidden: int = 0
    pool_heads: int = 1
    freeze_node_init: bool = False
    fuse: str = "sum"
    dtype: str = "float32"
    embedding_source: str = "seeded"
    embedding_path: str = ""
    # bias-grid size for the per-epoch validation sweep; 0 = exact enumeration
    # (exact sweeps on large validation splits cost seconds per epoch)
    val_grid: int = 512

    def __post_init__(self):
        self.levels = tuple(sorted(self.levels))
        self.stage_channels = tuple(self.stage_channels)
        self.predictor_channels = tuple(self.predictor_channels)
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError(
                "batch_size must be >= 2 (classifier heads use batch statistics)"
            )
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule '{self.schedule}'")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy '{self.strategy}'")
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"unknown pooling '{self.pooling}'")
        if self.fuse not in FUSE_MODES:
            raise ConfigurationError(f"unknown fuse mode '{self.fuse}'")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}")
        if self.embedding_source not in ("seeded", "file"):
            raise ConfigurationError(f"unknown embedding source '{self.embedding_source}'")
        if self.val_grid < 0 or self.val_grid == 1:
            raise ConfigurationError("val_grid must be 0 (exact) or >= 2")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key in ("levels", "stage_channels", "predictor_channels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("levels", "stage_channels", "predictor_channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def model_config(self):
        return ModelConfig(
            image_size=self.image_size,
            stage_channels=self.stage_channels,
            predictor_channels=self.predictor_channels,
            target_channels=self.target_channels,
            levels=self.levels,
            embed_dim=self.embed_dim,
            gcn_hidden=self.gcn_hidden,
            gcn_layers=self.gcn_layers,
            head_hidden=self.head_hidden,
            pool_heads=self.pool_heads,
            strategy=self.strategy,
            pooling=self.pooling,
            tau=self.tau,
            freeze_node_init=self.freeze_node_init,
        )


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(field, raw):
    raw = raw.strip()
    if field.type in ("tuple", tuple):
        return tuple(int(t) for t in raw.replace(",", " ").split())
    if isinstance(field.default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigurationError(f"cannot parse boolean '{raw}' for {field.name}")
    if isinstance(field.default, int):
        return int(raw)
    if isinstance(field.default, float):
        return float(raw)
    return raw


def parse_config_file(path):
    """Flat ``key = value`` text file -> dict of TrainConfig fields."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{ln}: expected 'key = value'")
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in fields:
            raise ConfigurationError(f"{path}:{ln}: unknown config key '{key}'")
        out[key] = _parse_value(fields[key], raw)
    return out


# ---------------------------------------------------------------------------
# objective


def classification_loss(attr_scores, obj_scores, comp_scores, attr_labels, obj_labels,
                        comp_labels):
    """Per-branch softmax cross-entropy, meaned over the batch. The composition
    term classifies over every closed-world composition."""
    for scores, labels, what in (
        (attr_scores, attr_labels, "attribute"),
        (obj_scores, obj_labels, "object"),
        (comp_scores, comp_labels, "composition"),
    ):
        if labels.numel() and (labels.min() < 0 or labels.max() >= scores.shape[1]):
            raise ConfigurationError(f"{what} label out of range [0, {scores.shape[1]})")
    return (
        F.cross_entropy(attr_scores, attr_labels),
        F.cross_entropy(obj_scores, obj_labels),
        F.cross_entropy(comp_scores, comp_labels),
    )


@dataclass
class LossRecord:
    epoch: int
    step: int
    loss_attr: float
    loss_obj: float
    loss_comp: float
    loss_focus: object  # float, or None when the focus loss is off
    alpha: float
    lr: float

    @property
    def loss_cls(self):
        return self.loss_attr + self.loss_obj + self.loss_comp

    @property
    def total(self):
        if self.loss_focus is None:
            return self.loss_cls
        return self.loss_cls + self.alpha * self.loss_focus

    def to_json_dict(self):
        d = {
            "epoch": self.epoch,
            "step": self.step,
            "loss_attr": self.loss_attr,
            "loss_obj": self.loss_obj,
            "loss_comp": self.loss_comp,
            "loss_total": self.total,
            "lr": self.lr,
        }
        if self.loss_focus is not None:
            d["loss_focus"] = self.loss_focus
            d["alpha"] = self.alpha
        return d


def schedule_lr(config: TrainConfig, epoch):
    """Learning rate for an epoch; cosine annealing decays to 0 over the run."""
    if config.schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_meta(optimizer, param_names):
    groups = []
    for g in optimizer.param_groups:
        groups.append(
            {
                "size": len(g["params"]),
                "lr": g["lr"],
                "weight_decay": g["weight_decay"],
                "betas": list(g["betas"]),
                "eps": g["eps"],
            }
        )
    return {"param_names": param_names, "groups": groups}


def save_checkpoint(path, model: ThreeBranchNet, config: TrainConfig, epoch,
                    optimizer=None, opt_param_names=None):
    arrays = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    opt_meta = None
    if optimizer is not None:
        opt_meta = _optimizer_meta(optimizer, opt_param_names)
        state = optimizer.state_dict()["state"]
        for idx, entry in state.items():
            pname = opt_param_names[idx]
            for key, value in entry.items():
                arrays[f"opt/{pname}/{key}"] = (
                    value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                )
    space = model.space
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "epoch": epoch,
        "config": config.to_dict(),
        "backbone": {"kind": model.config.backbone_kind, "seed": model.seed},
        "label_space": {
            "attributes": list(space.attributes),
            "objects": list(space.objects),
            "compositions": [list(p) for p in space.compositions],
            "seen_mask": [bool(s) for s in space.seen_mask],
        },
        "optimizer": opt_meta,
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **{k: arrays[k] for k in sorted(arrays)})
    return path


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict

    @property
    def epoch(self):
        return self.meta["epoch"]

    def train_config(self):
        return TrainConfig.from_dict(self.meta["config"])

    def label_space(self):
        ls = self.meta["label_space"]
        return LabelSpace(
            attributes=tuple(ls["attributes"]),
            objects=tuple(ls["objects"]),
            compositions=tuple(tuple(p) for p in ls["compositions"]),
            seen_mask=tuple(ls["seen_mask"]),
        )


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    if "__meta__" not in arrays:
        raise DataValidationError(f"{path} is not a checkpoint (no metadata entry)")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointSchemaError(
            f"checkpoint schema {meta.get('schema')} != supported {CHECKPOINT_SCHEMA}"
        )
    return Checkpoint(meta=meta, arrays=arrays)


def resave_checkpoint(ckpt: Checkpoint, path):
    """Serialize a loaded checkpoint back out; identical content gives
    identical bytes, so save -> load -> save round-trips exactly."""
    arrays = dict(ckpt.arrays)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(ckpt.meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **{k: arrays[k] for k in sorted(arrays)})
    return Path(path)


def restore_model(ckpt: Checkpoint, backbone_stages=None) -> ThreeBranchNet:
    """Rebuild the network from a checkpoint. External backbones need their
    stage modules passed in; desk backbones rebuild from the stored seed."""
    config = ckpt.train_config()
    space = ckpt.label_space()
    embeddings = init_semantic_embeddings(
        space,
        config.embed_dim,
        source="seeded",
        seed=ckpt.meta["backbone"]["seed"],
    )
    model = ThreeBranchNet(
        space,
        embeddings,
        config.model_config(),
        seed=ckpt.meta["backbone"]["seed"],
        backbone_stages=backbone_stages,
    )
    model = model.to(DTYPES[config.dtype])
    state = {}
    for key, arr in ckpt.arrays.items():
        if key.startswith("param/"):
            state[key[len("param/"):]] = torch.as_tensor(arr)
    model.load_state_dict(state, strict=True)
    return model


# ---------------------------------------------------------------------------
# training loop


def _split_decay_groups(model: ThreeBranchNet):
    """(decay names, no-decay names): batch-norm parameters and position
    embeddings are excluded from weight decay."""
    bn_params = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm):
            for p_name, _ in mod.named_parameters(recurse=False):
                bn_params.add(f"{mod_name}.{p_name}")
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if name in bn_params or name.endswith("pos_embed"):
            no_decay.append(name)
        else:
            decay.append(name)
    return decay, no_decay


def build_optimizer(model: ThreeBranchNet, config: TrainConfig):
    decay, no_decay = _split_decay_groups(model)
    params = dict(model.named_parameters())
    groups = [
        {"params": [params[n] for n in decay], "weight_decay": config.weight_decay},
        {"params": [params[n] for n in no_decay], "weight_decay": 0.0},
    ]
    optimizer = torch.optim.Adam(groups, lr=config.lr)
    return optimizer, decay + no_decay


def training_objective(model: ThreeBranchNet, images, attr_labels, obj_labels,
                       comp_labels, config: TrainConfig, sample_indices=None,
                       draw_key=0):
    """One forward pass and the full objective; returns (total, parts dict)."""
    result = model(images, sample_indices=sample_indices, draw_key=draw_key)
    l_attr, l_obj, l_comp = classification_loss(
        result.attr_scores, result.obj_scores, result.comp_scores,
        attr_labels, obj_labels, comp_labels,
    )
    total = l_attr + l_obj + l_comp
    l_focus = None
    if config.focus_loss:
        maps = branch_attention_maps(
            result, attr_labels, obj_labels, comp_labels,
            create_graph=not config.detach_maps,
        )
        l_focus = focus_consistency_loss(
            maps["attribute"], maps["object"], maps["composition"]
        )
        total = total + config.alpha * l_focus
    return total, {"attr": l_attr, "obj": l_obj, "comp": l_comp, "focus": l_focus}


@dataclass
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path
    steps: list
    epochs: list
    space: LabelSpace


def _epoch_batches(n, batch_size, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch, 0xDA7A)))
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # heads use batch statistics; a trailing singleton batch cannot train
    return [b for b in batches if len(b) >= 2]


def train(config: TrainConfig, data, out_dir, backbone_stages=None,
           log_fn=None) -> TrainResult:
    """Train a model and write checkpoints + JSONL logs under ``out_dir``.

    ``data`` is a manifest path / dataset directory, or a preloaded
    (LabelSpace, DatasetManifest) pair. Runs are deterministic given the
    config: same seed, same data => identical checkpoints and logs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(data, (str, Path)):
        path = Path(data)
        if path.is_dir():
            path = path / "manifest.tsv"
        space, manifest = load_manifest(path)
    else:
        space, manifest = data

    embeddings = init_semantic_embeddings(
        space,
        config.embed_dim,
        source=config.embedding_source,
        seed=config.seed,
        path=config.embedding_path or None,
    )
    dtype = DTYPES[config.dtype]
    model = ThreeBranchNet(
        space, embeddings, config.model_config(), seed=config.seed,
        backbone_stages=backbone_stages,
    ).to(dtype)
    backbone_init = {
        k: v.detach().clone() for k, v in model.backbone.state_dict().items()
    }

    train_split = load_split(manifest, space, "train")
    if len(train_split) == 0:
        raise DataValidationError("train split is empty")
    val_split = load_split(manifest, space, "val")
    images = torch.as_tensor(train_split.images, dtype=dtype)
    ya = torch.as_tensor(train_split.attr_idx)
    yo = torch.as_tensor(train_split.obj_idx)
    yc = torch.as_tensor(train_split.comp_idx)

    optimizer, opt_param_names = build_optimizer(model, config)

    from .evaluation import report_for_split  # deferred: evaluation imports model

    steps_log, epochs_log = [], []
    steps_path = out_dir / "steps.jsonl"
    epochs_path = out_dir / "epochs.jsonl"
    last_path = out_dir / "last.npz"
    best_path = out_dir / "best.npz"
    best_hm = None
    global_step = 0

    with open(steps_path, "w", encoding="utf-8") as steps_fh, open(
        epochs_path, "w", encoding="utf-8"
    ) as epochs_fh:
        for epoch in range(config.epochs):
            lr = schedule_lr(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            epoch_records = []
            for batch in _epoch_batches(len(train_split), config.batch_size,
                                        config.seed, epoch):
                idx = torch.as_tensor(batch)
                total, parts = training_objective(
                    model, images[idx], ya[idx], yo[idx], yc[idx], config,
                    sample_indices=batch, draw_key=epoch,
                )
                record = LossRecord(
                    epoch=epoch,
                    step=global_step,
                    loss_attr=float(parts["attr"].detach()),
                    loss_obj=float(parts["obj"].detach()),
                    loss_comp=float(parts["comp"].detach()),
                    loss_focus=(
                        None if parts["focus"] is None else float(parts["focus"].detach())
                    ),
                    alpha=config.alpha,
                    lr=lr,
                )
                if not math.isfinite(record.total):
                    raise TrainingAborted(
                        f"non-finite loss at step {global_step}: {record.to_json_dict()}",
                        step=global_step,
                        breakdown=record,
                    )
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                steps_log.append(record)
                epoch_records.append(record)
                steps_fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
                global_step += 1
            steps_fh.flush()

            epoch_entry = {
                "epoch": epoch,
                "lr": lr,
                "loss_attr": _mean(r.loss_attr for r in epoch_records),
                "loss_obj": _mean(r.loss_obj for r in epoch_records),
                "loss_comp": _mean(r.loss_comp for r in epoch_records),
                "loss_total": _mean(r.total for r in epoch_records),
            }
            if config.focus_loss:
                epoch_entry["loss_focus"] = _mean(r.loss_focus for r in epoch_records)
            if len(val_split):
                report, _curve = report_for_split(model, val_split, space,
                                                  fuse_mode=config.fuse,
                                                  grid=config.val_grid or None)
                epoch_entry["val_seen"] = report.best_seen
                epoch_entry["val_unseen"] = report.best_unseen
                epoch_entry["val_auc"] = report.auc
                epoch_entry["val_hm"] = report.best_hm
                if report.best_hm is not None and (best_hm is None or report.best_hm > best_hm):
                    best_hm = report.best_hm
                    save_checkpoint(best_path, model, config, epoch, optimizer,
                                    opt_param_names)
            epochs_log.append(epoch_entry)
            epochs_fh.write(json.dumps(epoch_entry, sort_keys=True) + "\n")
            epochs_fh.flush()
            save_checkpoint(last_path, model, config, epoch, optimizer, opt_param_names)
            if log_fn is not None:
                log_fn(epoch_entry)

    for key, tensor in model.backbone.state_dict().items():
        if not torch.equal(tensor, backbone_init[key]):
            raise TrainingAborted(f"frozen backbone parameter '{key}' changed")
    if not best_path.is_file():
        save_checkpoint(best_path, model, config, config.epochs - 1, optimizer,
                        opt_param_names)
    return TrainResult(
        out_dir=out_dir,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        steps=steps_log,
        epochs=epochs_log,
        space=space,
    )


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else 0.0
