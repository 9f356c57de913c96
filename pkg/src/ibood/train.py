"""Two-phase training: adversarial pre-training, then IB re-training.

Phase 1 trains a DCGAN-style generator/discriminator pair on the unlabeled
in-distribution pool (binary cross-entropy discriminator, non-saturating
generator). Phase 2 embeds the labeled support set and descends the IB loss,
updating the embedding parameters and the class prototypes; the real/fake
affine head is frozen and unused.

All randomness derives from the config seeds, so runs are reproducible on a
fixed device/thread configuration.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nets
from .data_ingest import BatchPlan, EmptyInputError, OodTask, iterate_batches
from .ib_loss import ClassPrototypes, EmbeddingBatch, IBLossConfig, ib_loss


class TrainingDivergedError(RuntimeError):
    """Raised when a loss turns non-finite; carries the last step record."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record


@dataclass
class GanTrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    noise_dim: int = nets.NOISE_DIM
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class IBTrainConfig:
    steps: int = 300
    lr: float = 1e-4
    loss: IBLossConfig = field(default_factory=IBLossConfig)
    scope: str = "full_discriminator_stack"  # or "embedding_head_only"
    prototype_init: str = "support_class_means"  # or "random"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.scope not in ("full_discriminator_stack", "embedding_head_only"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.prototype_init not in ("support_class_means", "random"):
            raise ValueError(f"unknown prototype_init {self.prototype_init!r}")


@dataclass
class TrainLog:
    """Per-step records for one phase; serializable as JSON lines."""

    phase: str
    records: list[dict] = field(default_factory=list)
    ood_label_hits: int = 0  # training samples seen that carry the OOD label

    def append(self, **fields) -> None:
        self.records.append({"phase": self.phase, **fields})

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + ("\n" if lines else "")

    def canonical(self) -> str:
        """JSON-lines form with wall-clock stripped, for determinism checks."""
        lines = [
            json.dumps({k: v for k, v in r.items() if k != "time"}, sort_keys=True)
            for r in self.records
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_jsonl())

    def losses(self, key: str) -> list[float]:
        return [r[key] for r in self.records if key in r]


def pretrain_gan(task: OodTask, cfg: GanTrainConfig):
    """Adversarially pre-train generator and discriminator on the unlabeled pool.

    Returns (generator, discriminator, log). Raises TrainingDivergedError if
    either loss turns non-finite.
    """
    if len(task.pretrain_pool) == 0:
        raise EmptyInputError("pretrain pool is empty")

    torch.manual_seed(cfg.seed)
    generator = nets.Generator()
    discriminator = nets.Discriminator()
    nets.init_dcgan_weights(generator)
    nets.init_dcgan_weights(discriminator)
    generator.train()
    discriminator.train()

    opt_g = torch.optim.Adam(
        generator.parameters(), lr=cfg.lr_generator, betas=cfg.adam_betas
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=cfg.lr_discriminator, betas=cfg.adam_betas
    )
    bce = torch.nn.BCEWithLogitsLoss()
    # stable batch statistics under batch norm favor full batches in this phase
    plan = BatchPlan(batch_size=cfg.batch_size, shuffle_seed=cfg.seed, drop_last=True)
    if len(task.pretrain_pool) < cfg.batch_size:
        plan = BatchPlan(batch_size=len(task.pretrain_pool), shuffle_seed=cfg.seed, drop_last=True)

    log = TrainLog(phase="gan_pretrain")
    step = 0
    for epoch in range(cfg.epochs):
        for images, labels in iterate_batches(task.pretrain_pool, plan, epoch):
            log.ood_label_hits += int(np.sum(labels == task.ood_class))
            real = nets.images_to_tensor(images)
            n = real.shape[0]
            noise = torch.randn(n, cfg.noise_dim)
            fake = generator(noise)

            opt_d.zero_grad()
            d_loss = bce(discriminator.logits(real), torch.ones(n)) + bce(
                discriminator.logits(fake.detach()), torch.zeros(n)
            )
            d_loss.backward()
            opt_d.step()

            # non-saturating objective: push generated samples toward "real"
            opt_g.zero_grad()
            g_loss = bce(discriminator.logits(fake), torch.ones(n))
            g_loss.backward()
            opt_g.step()

            record = {
                "step": step,
                "epoch": epoch,
                "d_loss": float(d_loss),
                "g_loss": float(g_loss),
                "time": time.time(),
            }
            if not (np.isfinite(record["d_loss"]) and np.isfinite(record["g_loss"])):
                raise TrainingDivergedError(
                    f"non-finite GAN loss at step {step}", record
                )
            log.append(**record)
            step += 1

    generator.eval()
    discriminator.eval()
    return generator, discriminator, log


def _scope_parameters(discriminator, head, scope: str):
    if scope == "embedding_head_only":
        return list(head.parameters())
    return list(discriminator.features.parameters()) + list(head.parameters())


def parameter_digest(module: torch.nn.Module) -> bytes:
    """Byte digest of all parameters/buffers, for frozen-scope audits."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.digest()


def retrain_ib(
    discriminator: "nets.Discriminator",
    head: "nets.EmbeddingHead",
    task: OodTask,
    cfg: IBTrainConfig,
):
    """Descend the IB loss on the full support set for cfg.steps steps.

    Returns (discriminator, head, prototypes, log). The discriminating affine
    head stays frozen; prototypes are trained jointly with the embedding.
    """
    counts = task.support_set.class_counts()
    missing = [k for k in task.in_dist_classes if counts.get(k, 0) == 0]
    if missing:
        raise ValueError(f"support set is missing classes {missing}")

    torch.manual_seed(cfg.seed)
    n_classes = len(task.in_dist_classes)
    label_map = {k: i for i, k in enumerate(task.in_dist_classes)}
    y = torch.tensor([label_map[int(l)] for l in task.support_set.labels])
    images = nets.images_to_tensor(task.support_set.images)

    log = TrainLog(phase="ib_retrain")
    log.ood_label_hits += int(np.sum(task.support_set.labels == task.ood_class))

    discriminator.eval()
    head.eval()
    with torch.no_grad():
        z0 = nets.embed(discriminator, head, images)
    if cfg.prototype_init == "support_class_means":
        protos = ClassPrototypes.from_embeddings(EmbeddingBatch(z0, y), n_classes)
    else:
        protos = ClassPrototypes.random(n_classes, head.d, seed=cfg.seed)

    full_stack = cfg.scope == "full_discriminator_stack"
    discriminator.head.requires_grad_(False)
    discriminator.features.requires_grad_(full_stack)
    params = _scope_parameters(discriminator, head, cfg.scope) + list(
        protos.parameters()
    )
    optimizer = torch.optim.Adam(params, lr=cfg.lr)

    snapshot = None
    for step in range(cfg.steps):
        # batch norm uses batch statistics only when its layers are in scope
        discriminator.features.train(full_stack)
        head.train(True)
        z = nets.embed(discriminator, head, images)
        breakdown = ib_loss(EmbeddingBatch(z, y), protos, cfg.loss)
        record = {"step": step, "time": time.time(), **breakdown.as_floats()}
        if not all(np.isfinite(v) for v in breakdown.as_floats().values()):
            if snapshot is not None:
                discriminator.load_state_dict(snapshot[0])
                head.load_state_dict(snapshot[1])
                protos.load_state_dict(snapshot[2])
            raise TrainingDivergedError(f"non-finite IB loss at step {step}", record)
        snapshot = (
            copy.deepcopy(discriminator.state_dict()),
            copy.deepcopy(head.state_dict()),
            copy.deepcopy(protos.state_dict()),
        )
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        log.append(**record)

    discriminator.eval()
    head.eval()
    discriminator.features.requires_grad_(True)
    discriminator.head.requires_grad_(True)
    return discriminator, head, protos, log


@dataclass
class RepetitionResult:
    seed: int
    task: OodTask
    generator: "nets.Generator"
    discriminator: "nets.Discriminator"
    head: "nets.EmbeddingHead"
    prototypes: ClassPrototypes
    gan_log: TrainLog
    ib_log: TrainLog
    pretrained_state: dict  # discriminator+head state right after phase 1


def run_single(
    train_ds,
    test_ds,
    ood_class: int,
    gan_cfg: GanTrainConfig,
    ib_cfg: IBTrainConfig,
    n_support: int,
    seed: int,
    head_mode: str = "projected",
    d_proj: int = 128,
) -> RepetitionResult:
    """One (support sample, pretrain, retrain) cell with every phase seeded."""
    from .data_ingest import build_task

    task = build_task(train_ds, test_ds, ood_class, n_support, seed)
    gan_cfg = _with_seed(gan_cfg, seed)
    ib_cfg = _with_seed(ib_cfg, seed)

    generator, discriminator, gan_log = pretrain_gan(task, gan_cfg)
    torch.manual_seed(seed)
    head = nets.EmbeddingHead(head_mode, d_proj)
    nets.init_dcgan_weights(head)
    head.eval()

    pretrained_state = {
        "discriminator": copy.deepcopy(discriminator.state_dict()),
        "head": copy.deepcopy(head.state_dict()),
    }
    discriminator, head, protos, ib_log = retrain_ib(discriminator, head, task, ib_cfg)
    return RepetitionResult(
        seed=seed,
        task=task,
        generator=generator,
        discriminator=discriminator,
        head=head,
        prototypes=protos,
        gan_log=gan_log,
        ib_log=ib_log,
        pretrained_state=pretrained_state,
    )


def _with_seed(cfg, seed: int):
    clone = copy.deepcopy(cfg)
    clone.seed = seed
    return clone


def run_experiment(
    train_ds,
    test_ds,
    ood_class: int,
    gan_cfg: GanTrainConfig,
    ib_cfg: IBTrainConfig,
    repetitions: int = 10,
    n_support: int = 10,
    base_seed: int = 0,
    head_mode: str = "projected",
    d_proj: int = 128,
) -> list[RepetitionResult]:
    """Repeat the two-phase protocol; repetition r uses seed = base_seed + r."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if ood_class not in set(np.unique(train_ds.labels).tolist()):
        raise ValueError(f"ood_class {ood_class} not in the label set")
    return [
        run_single(
            train_ds,
            test_ds,
            ood_class,
            gan_cfg,
            ib_cfg,
            n_support,
            base_seed + r,
            head_mode,
            d_proj,
        )
        for r in range(repetitions)
    ]
