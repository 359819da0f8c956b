"""Training loop: warm-up phase, alternating D and (G, E) updates, checkpoints.

Each step draws a prior code z, generates x_hat = G(z), encodes the data
batch, updates the discriminator on its loss, then recomputes the forward
passes through the updated discriminator and updates generator and encoder
jointly on the adversarial loss plus lambda times the triplet loss. The
first ``warmup_epochs`` epochs force lambda to zero, so they are
step-for-step identical to a plain BiGAN run with the same seed.

Model variants share this loop: ``bigan`` pins lambda to zero throughout,
``triplet`` trains only the encoder on the triplet loss (no adversarial
part), and ``triplet-bigan`` is the full objective.

RNG streams are split by purpose (model init, torch noise, unsupervised
batch order, triplet draws) so that enabling or disabling the triplet term
never perturbs the others; all stream states travel inside checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .datasets import DatasetSplit, LabeledIndex
from .errors import CheckpointError, ContractError, NumericalError
from .evaluation import encode_images
from .losses import (
    LossReport,
    combined_loss,
    discriminator_loss,
    encoder_generator_loss,
    triplet_distances,
    triplet_loss,
)
from .models import ArchitectureConfig, ModelBundle, build_models, discriminate, encode, generate
from .sampler import (
    LabeledCodes,
    TripletBatch,
    compute_labeled_codes,
    sample_hard_negative_batch,
    sample_triplet_batch,
    unsupervised_batches,
)

CHECKPOINT_VERSION = 1
MODEL_TAGS = ("triplet", "bigan", "triplet-bigan")
METRIC_KEYS = ("epoch", "l_d", "l_eg", "l_t", "l_teg", "d_plus_mean", "d_minus_mean", "triplet_accuracy", "wall_time_s")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    lambda_triplet: float = 1.0
    warmup_epochs: int = 10
    total_epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_per_class: int = 100
    latent_dim: int = 64
    seed: int = 0
    hard_negatives: bool = False
    checkpoint_every: int = 10
    model_tag: str = "triplet-bigan"
    deterministic: bool = True

    def __post_init__(self):
        if self.model_tag not in MODEL_TAGS:
            raise ContractError(f"model_tag {self.model_tag!r} not in {MODEL_TAGS}")
        if self.lambda_triplet < 0:
            raise ContractError("lambda must be >= 0")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ContractError("need 0 <= warmup_epochs <= total_epochs")
        for name in ("total_epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "n_per_class", "latent_dim", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be strictly positive")
        if self.model_tag == "bigan" and self.lambda_triplet != 0.0:
            raise ContractError("model_tag 'bigan' requires lambda = 0")
        if self.model_tag == "triplet" and self.warmup_epochs != 0:
            raise ContractError("model_tag 'triplet' has no warm-up phase; set warmup_epochs = 0")


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    arch: ArchitectureConfig
    config: TrainConfig
    models: ModelBundle
    opt_d: Optional[torch.optim.Adam]
    opt_eg: torch.optim.Adam
    noise_rng: torch.Generator
    data_rng: np.random.Generator
    triplet_rng: np.random.Generator
    epoch: int = 0
    global_step: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(config: TrainConfig, arch: ArchitectureConfig) -> TrainState:
    if arch.latent_dim != config.latent_dim:
        raise ContractError(f"architecture latent_dim {arch.latent_dim} != train config latent_dim {config.latent_dim}")
    models = build_models(arch, config.seed)
    betas = (config.adam_beta1, config.adam_beta2)
    if config.model_tag == "triplet":
        opt_d = None
        opt_eg = torch.optim.Adam(models.encoder.parameters(), lr=config.learning_rate, betas=betas, eps=config.adam_eps)
    else:
        opt_d = torch.optim.Adam(models.discriminator.parameters(), lr=config.learning_rate, betas=betas, eps=config.adam_eps)
        opt_eg = torch.optim.Adam(models.eg_parameters(), lr=config.learning_rate, betas=betas, eps=config.adam_eps)
    noise_rng = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(
        arch=arch,
        config=config,
        models=models,
        opt_d=opt_d,
        opt_eg=opt_eg,
        noise_rng=noise_rng,
        data_rng=np.random.default_rng([config.seed, 2]),
        triplet_rng=np.random.default_rng([config.seed, 3]),
    )


def _check_finite(value: torch.Tensor, name: str, step: int) -> None:
    if not torch.isfinite(value):
        raise NumericalError(f"{name} is not finite ({float(value.detach())}) at step {step}")


def _triplet_term(state: TrainState, triplet: TripletBatch):
    encoder = state.models.encoder
    code_a = encode(encoder, torch.as_tensor(triplet.anchor), "train", generator=state.noise_rng)
    code_p = encode(encoder, torch.as_tensor(triplet.positive), "train", generator=state.noise_rng)
    code_n = encode(encoder, torch.as_tensor(triplet.negative), "train", generator=state.noise_rng)
    d_plus, d_minus = triplet_distances(code_a, code_p, code_n)
    l_t = triplet_loss(code_a, code_p, code_n)
    return l_t, float(d_plus.detach().mean()), float(d_minus.detach().mean())


def train_step(
    state: TrainState,
    images: Union[np.ndarray, torch.Tensor],
    triplet: Optional[TripletBatch] = None,
    lam: Optional[float] = None,
) -> LossReport:
    """Run one optimization step, mutating the state in place.

    ``lam`` is the effective triplet weight for this step (the trainer
    passes 0 during warm-up); a triplet batch must be present exactly when
    the triplet term is active.
    """
    config = state.config
    step = state.global_step

    if config.model_tag == "triplet":
        if triplet is None:
            raise ContractError("model_tag 'triplet' requires a triplet batch every step")
        l_t, dp, dn = _triplet_term(state, triplet)
        _check_finite(l_t, "l_t", step)
        state.opt_eg.zero_grad()
        l_t.backward()
        state.opt_eg.step()
        state.global_step += 1
        return LossReport(l_t=float(l_t.detach()), d_plus_mean=dp, d_minus_mean=dn)

    if lam is None:
        lam = 0.0 if config.model_tag == "bigan" else config.lambda_triplet
    if (lam > 0) != (triplet is not None):
        raise ContractError("a triplet batch must be supplied exactly when lambda > 0")

    x = torch.as_tensor(images)
    models = state.models
    z = torch.randn((x.shape[0], config.latent_dim), generator=state.noise_rng)

    # Discriminator update; generated pair and encoded pair are detached so
    # only theta_D moves.
    x_hat = generate(models.generator, z)
    code = encode(models.encoder, x, "train", generator=state.noise_rng)
    d_real = discriminate(models.discriminator, x, code.z.detach())
    d_fake = discriminate(models.discriminator, x_hat.detach(), z)
    l_d = discriminator_loss(d_real, d_fake)
    _check_finite(l_d, "l_d", step)
    state.opt_d.zero_grad()
    l_d.backward()
    state.opt_d.step()

    # Joint (G, E) update, recomputed through the freshly updated D.
    x_hat = generate(models.generator, z)
    code = encode(models.encoder, x, "train", generator=state.noise_rng)
    d_real = discriminate(models.discriminator, x, code.z)
    d_fake = discriminate(models.discriminator, x_hat, z)
    l_eg = encoder_generator_loss(d_real, d_fake)
    _check_finite(l_eg, "l_eg", step)

    l_t_value = dp = dn = None
    if triplet is not None:
        l_t, dp, dn = _triplet_term(state, triplet)
        _check_finite(l_t, "l_t", step)
        total = combined_loss(l_eg, l_t, lam)
        l_t_value = float(l_t.detach())
    else:
        total = l_eg
    _check_finite(total, "l_teg", step)
    state.opt_eg.zero_grad()
    total.backward()
    state.opt_eg.step()

    state.global_step += 1
    return LossReport(
        l_d=float(l_d.detach()),
        l_eg=float(l_eg.detach()),
        l_t=l_t_value,
        l_teg=float(total.detach()) if triplet is not None else None,
        d_plus_mean=dp,
        d_minus_mean=dn,
    )


def _mean_or_none(values: list[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def triplet_accuracy(codes: LabeledCodes, rng: np.random.Generator) -> float:
    """Fraction of triplets with d+ < d-, one triplet per labeled anchor."""
    labels = codes.labels
    vectors = np.asarray(codes.codes, dtype=np.float64)
    by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    correct = 0
    total = 0
    for i in range(len(labels)):
        same = by_class[int(labels[i])]
        if len(same) < 2:
            continue
        j = same[rng.integers(len(same) - 1)]
        if j == i:
            j = same[len(same) - 1]
        others = np.flatnonzero(labels != labels[i])
        k = others[rng.integers(len(others))]
        d_plus = np.linalg.norm(vectors[i] - vectors[j])
        d_minus = np.linalg.norm(vectors[i] - vectors[k])
        correct += int(d_plus < d_minus)
        total += 1
    return correct / total if total else 0.0


def fit(
    config: TrainConfig,
    arch: ArchitectureConfig,
    split: DatasetSplit,
    index: LabeledIndex,
    out_dir: Union[str, Path, None] = None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Train from scratch (or continue ``state``) for config.total_epochs.

    Writes one metrics record per epoch to ``out_dir``/metrics.jsonl and
    checkpoints every ``checkpoint_every`` epochs plus at completion. In
    deterministic mode wall_time_s is recorded as 0.0 so reruns of the same
    seed reproduce the log byte-for-byte.
    """
    if state is None:
        state = init_state(config, arch)
    else:
        config, arch = state.config, state.arch
    if config.deterministic:
        torch.use_deterministic_algorithms(True)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        (out_path / "checkpoints").mkdir(parents=True, exist_ok=True)
        if state.epoch == 0:  # fresh run: drop any stale log; resume appends
            (out_path / "metrics.jsonl").write_text("")

    embed_fn = lambda imgs: encode_images(state.models.encoder, imgs)

    while state.epoch < config.total_epochs:
        epoch = state.epoch
        in_warmup = epoch < config.warmup_epochs
        if config.model_tag == "triplet":
            lam_eff = None
            use_triplets = True
        else:
            lam_eff = 0.0 if (in_warmup or config.model_tag == "bigan") else config.lambda_triplet
            use_triplets = lam_eff > 0

        snapshot = None
        if use_triplets and config.hard_negatives:
            snapshot = compute_labeled_codes(embed_fn, split, index)

        start = time.perf_counter()
        reports: list[LossReport] = []
        for images, _ in unsupervised_batches(split, config.batch_size, state.data_rng):
            triplet = None
            if use_triplets:
                if snapshot is not None:
                    triplet = sample_hard_negative_batch(index, split, len(images), snapshot, state.triplet_rng)
                else:
                    triplet = sample_triplet_batch(index, split, len(images), state.triplet_rng)
            reports.append(train_step(state, images, triplet, lam=lam_eff))

        eval_rng = np.random.default_rng([config.seed, 4, epoch])
        accuracy = triplet_accuracy(compute_labeled_codes(embed_fn, split, index), eval_rng)
        wall = 0.0 if config.deterministic else time.perf_counter() - start

        record = {"epoch": epoch}
        for key in ("l_d", "l_eg", "l_t", "l_teg", "d_plus_mean", "d_minus_mean"):
            record[key] = _mean_or_none([getattr(r, key) for r in reports])
        record["triplet_accuracy"] = accuracy
        record["wall_time_s"] = wall
        state.history.append(record)
        state.epoch += 1

        if out_path is not None:
            with open(out_path / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            if state.epoch % config.checkpoint_every == 0 or state.epoch == config.total_epochs:
                save_checkpoint(state, out_path / "checkpoints" / f"epoch_{state.epoch:04d}.pt")
    return state


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> None:
    """Write a versioned checkpoint; the write is atomic (tmp + rename)."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(state.arch),
        "config": asdict(state.config),
        "models": state.models.state_dicts(),
        "opt_d": None if state.opt_d is None else state.opt_d.state_dict(),
        "opt_eg": state.opt_eg.state_dict(),
        "noise_rng": state.noise_rng.get_state(),
        "data_rng": state.data_rng.bit_generator.state,
        "triplet_rng": state.triplet_rng.bit_generator.state,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "history": state.history,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def resume(checkpoint_path: Union[str, Path]) -> TrainState:
    """Restore a TrainState (parameters, optimizers, RNG streams, history)."""
    path = Path(checkpoint_path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path} is not a tbigan checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload['version']} != supported version {CHECKPOINT_VERSION}")

    arch = ArchitectureConfig(**{k: tuple(v) if isinstance(v, (list, tuple)) else v for k, v in payload["arch"].items()})
    config = TrainConfig(**payload["config"])
    state = init_state(config, arch)
    state.models.load_state_dicts(payload["models"])
    if payload["opt_d"] is not None:
        state.opt_d.load_state_dict(payload["opt_d"])
    state.opt_eg.load_state_dict(payload["opt_eg"])
    state.noise_rng.set_state(payload["noise_rng"])
    state.data_rng.bit_generator.state = payload["data_rng"]
    state.triplet_rng.bit_generator.state = payload["triplet_rng"]
    state.epoch = payload["epoch"]
    state.global_step = payload["global_step"]
    state.history = payload["history"]
    return state
