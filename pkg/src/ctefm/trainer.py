"""Joint training of the CTE and flow-matching network."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .cfm import euler_sample, masked_mse, ot_flow, target_vector
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import FeatureCache, ManifestItem, TrainBatch, build_batch
from .features import ProviderRegistry, default_registry, embed_mel_all
from .losses import LossWeights, secs, timbre_loss, total_loss
from .model import ModelConfig, VoiceConverter

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_iters: int = 5000
    weight_decay: float = 0.01
    seed: int = 0
    reference_duration_s: float = 4.0
    euler_steps_eval: int = 20
    lambda_tim: float = 0.05
    tim_warmup_iters: int = 0
    grad_clip: float = 1.0
    # 0 keeps whole utterances; otherwise random crops of this many mel frames
    segment_frames: int = 0
    checkpoint_every: int = 1000
    provider_seed: int = 0
    n_mels: int = 80
    content_dim: int = 256
    sv_dims: tuple = (192, 192, 192)
    model_dim: int = 256
    n_heads: int = 4
    ffn_dim: int = 1024
    n_blocks: int = 6
    unet_channels: tuple = (128, 256)
    time_emb_dim: int = 128
    sigma_min: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "sv_dims", tuple(self.sv_dims))
        object.__setattr__(self, "unet_channels", tuple(self.unet_channels))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.max_iters < 0:
            raise ConfigError("learning_rate, weight_decay and max_iters must be non-negative")
        if self.reference_duration_s <= 0 or self.euler_steps_eval < 1:
            raise ConfigError("reference_duration_s and euler_steps_eval must be positive")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(cls.keys())}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sv_dims"] = list(self.sv_dims)
        d["unet_channels"] = list(self.unet_channels)
        return d

    def model_config(self, mel_mean=0.0, mel_std=1.0) -> ModelConfig:
        return ModelConfig(
            n_mels=self.n_mels,
            content_dim=self.content_dim,
            sv_dims=self.sv_dims,
            model_dim=self.model_dim,
            n_heads=self.n_heads,
            ffn_dim=self.ffn_dim,
            n_blocks=self.n_blocks,
            unet_channels=self.unet_channels,
            time_emb_dim=self.time_emb_dim,
            sigma_min=self.sigma_min,
            mel_mean=mel_mean,
            mel_std=mel_std,
        )


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> VoiceConverter:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VoiceConverter(cfg)
    return model.to(dtype)


def mel_statistics(cache: FeatureCache, items: list[ManifestItem]) -> tuple[tuple, tuple]:
    mels = [c.mel for c in (cache.get(it) for it in items) if c is not None]
    if not mels:
        raise ValueError("no readable training items")
    allv = np.concatenate(mels, axis=0)
    mean = allv.mean(axis=0)
    std = np.maximum(allv.std(axis=0), 1e-3)
    # float32-rounded so the statistics survive the JSON round trip unchanged
    return tuple(float(np.float32(v)) for v in mean), tuple(float(np.float32(v)) for v in std)


class Trainer:
    """Owns the model, optimiser and iteration counter.

    Each iteration draws its batch from a generator seeded by
    ``(seed, iteration)``, so a resumed run sees exactly the batches the
    uninterrupted run would have.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        items: list[ManifestItem],
        registry: ProviderRegistry | None = None,
        model: VoiceConverter | None = None,
        dtype=torch.float32,
        cache: FeatureCache | None = None,
    ):
        self.cfg = cfg
        self.items = [it for it in items if it.split == "train"] or list(items)
        self.registry = registry or default_registry(cfg.provider_seed, cfg.sv_dims, cfg.content_dim)
        if self.registry.sv_dims != tuple(cfg.sv_dims):
            raise ConfigError(f"registry dims {self.registry.sv_dims} != config sv_dims {cfg.sv_dims}")
        self.cache = cache or FeatureCache(self.registry)
        self.dtype = dtype
        if model is None:
            mean, std = mel_statistics(self.cache, self.items) if self.items else (0.0, 1.0)
            model = build_model(cfg.model_config(mean, std), cfg.seed, dtype)
        self.model = model
        self.weights = LossWeights(cfg.lambda_tim)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        self.iteration = 0

    # -- batches -------------------------------------------------------------

    def batch_rng(self, iteration: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, iteration])

    def batch_for(self, iteration: int) -> TrainBatch:
        rng = self.batch_rng(iteration)
        n = len(self.items)
        if n == 0:
            raise ValueError("no training items")
        idx = rng.choice(n, size=self.cfg.batch_size, replace=n < self.cfg.batch_size)
        return build_batch(
            [self.items[i] for i in idx],
            self.cache,
            rng,
            self.cfg.reference_duration_s,
            self.cfg.segment_frames,
        )

    # -- objective -----------------------------------------------------------

    def losses(self, batch: TrainBatch, lambda_tim: float | None = None) -> dict[str, torch.Tensor]:
        """Differentiable loss terms for one batch."""
        model = self.model
        b = batch.to(self.dtype)
        lam = self.weights.lambda_tim if lambda_tim is None else lambda_tim
        with torch.no_grad():
            ref = embed_mel_all(self.registry, b.ref_mel, b.ref_mask)
        h, f_T = model.condition(b.content, ref)
        m = b.mask.unsqueeze(-1)
        x1 = model.normalize(b.mel) * m
        x0 = b.noise * m
        x_t = ot_flow(b.t, x1, x0, model.schedule)
        v = model(x_t, b.t, h, f_T, b.mask)
        l_cfm = masked_mse(v, target_vector(x0, x1, model.schedule), b.mask)
        with torch.set_grad_enabled(torch.is_grad_enabled() and lam > 0):
            x1_hat = x_t + (1 - b.t)[:, None, None] * v
            conv = embed_mel_all(self.registry, model.denormalize(x1_hat), b.mask)
            l_tim = timbre_loss(ref, conv).mean()
        return {"l_cfm": l_cfm, "l_tim": l_tim, "l_total": total_loss(l_cfm, l_tim, LossWeights(lam))}

    def train_step(self, batch: TrainBatch) -> dict[str, float]:
        self.model.train()
        lam = self.cfg.lambda_tim if self.iteration >= self.cfg.tim_warmup_iters else 0.0
        out = self.losses(batch, lam)
        if not bool(torch.isfinite(out["l_total"])):
            raise TrainingDiverged(
                f"non-finite loss at iteration {self.iteration + 1}: "
                f"l_cfm={out['l_cfm'].item()} l_tim={out['l_tim'].item()}; batch ids {batch.ids}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        out["l_total"].backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.iteration += 1
        metrics = {k: float(v.detach()) for k, v in out.items()}
        metrics["grad_norm"] = float(grad_norm)
        return metrics

    def fit(
        self,
        out_dir=None,
        log_path=None,
        until: int | None = None,
        callback: Callable[[int, dict], None] | None = None,
    ) -> list[dict]:
        """Train up to ``until`` (default ``cfg.max_iters``) iterations.

        Writes ``ckpt_XXXXXX.ctefm`` every ``checkpoint_every`` iterations and
        ``final.ctefm`` at the end when ``out_dir`` is given; appends one JSON
        record per step to ``log_path``.
        """
        until = self.cfg.max_iters if until is None else until
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        log = open(log_path, "a") if log_path is not None else None
        history = []
        try:
            while self.iteration < until:
                start = time.perf_counter()
                metrics = self.train_step(self.batch_for(self.iteration))
                record = {"iter": self.iteration, **metrics}
                record["wall_ms"] = round(1000 * (time.perf_counter() - start), 3)
                history.append(record)
                if log is not None:
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                if callback is not None:
                    callback(self.iteration, record)
                if out_dir is not None and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"ckpt_{self.iteration:06d}.ctefm", self.checkpoint())
        finally:
            if log is not None:
                log.close()
        if out_dir is not None:
            save_checkpoint(out_dir / "final.ctefm", self.checkpoint())
        return history

    # -- persistence ---------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors = {}
        names = {p: n for n, p in self.model.named_parameters()}
        for name, p in self.model.named_parameters():
            tensors[f"model.{name}"] = p.detach().cpu().numpy()
        for p, state in self.optimizer.state.items():
            name = names[p]
            tensors[f"optim.{name}.exp_avg"] = state["exp_avg"].cpu().numpy()
            tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy()
            tensors[f"optim.{name}.step"] = np.array([float(state["step"])])
        config = {
            "train": self.cfg.to_dict(),
            "model": self.model.cfg.to_dict(),
            "providers": self.registry.metadata,
        }
        return Checkpoint(self.iteration, config, tensors)

    @classmethod
    def from_checkpoint(
        cls,
        ckpt: Checkpoint | str | Path,
        items: list[ManifestItem],
        registry: ProviderRegistry | None = None,
        dtype=torch.float32,
        cache: FeatureCache | None = None,
        **overrides,
    ) -> "Trainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        train_cfg = TrainConfig.from_mapping({**ckpt.config["train"], **overrides})
        model = model_from_checkpoint(ckpt, dtype)
        trainer = cls(train_cfg, items, registry, model, dtype, cache)
        for name, p in trainer.model.named_parameters():
            key = f"optim.{name}.exp_avg"
            if key in ckpt.tensors:
                trainer.optimizer.state[p] = {
                    "step": torch.tensor(float(ckpt.tensors[f"optim.{name}.step"][0])),
                    "exp_avg": torch.from_numpy(ckpt.tensors[key]).to(dtype),
                    "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim.{name}.exp_avg_sq"]).to(dtype),
                }
        trainer.iteration = int(ckpt.iteration)
        return trainer


def model_from_checkpoint(ckpt: Checkpoint | str | Path, dtype=torch.float32) -> VoiceConverter:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = VoiceConverter(ModelConfig.from_dict(ckpt.config["model"])).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"model.{name}"
            if key not in ckpt.tensors:
                raise KeyError(f"checkpoint lacks parameter {name}")
            p.copy_(torch.from_numpy(ckpt.tensors[key]))
    return model


def registry_from_checkpoint(ckpt: Checkpoint) -> ProviderRegistry:
    t = ckpt.config["train"]
    return default_registry(t.get("provider_seed", 0), t["sv_dims"], t["content_dim"])


@torch.no_grad()
def validate(
    model: VoiceConverter,
    registry: ProviderRegistry,
    items: list[ManifestItem],
    cfg: TrainConfig,
    cache: FeatureCache | None = None,
    max_items: int | None = None,
) -> dict[str, float]:
    """Held-out flow loss, self-conversion SECS and mel MSE. Never touches parameters."""
    items = list(items)[:max_items] if max_items else list(items)
    cache = cache or FeatureCache(registry)
    loaded = [c for c in (cache.get(it) for it in items) if c is not None]
    if not loaded:
        raise ValueError("empty validation set")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    l_cfm, sims, mses = [], [], []
    try:
        for i, c in enumerate(loaded):
            rng = np.random.default_rng([cfg.seed, 0x7A1, i])
            mel = torch.from_numpy(c.mel).to(dtype)
            content = torch.from_numpy(c.content).to(dtype)
            ref = [e.to(dtype) for e in embed_mel_all(registry, mel)]
            h, f_T = model.condition(content, ref)
            t = float(rng.uniform())
            x1 = model.normalize(mel)
            x0 = torch.as_tensor(rng.standard_normal(tuple(x1.shape)), dtype=dtype)
            x_t = ot_flow(t, x1, x0, model.schedule)
            l_cfm.append(float(masked_mse(model(x_t, t, h, f_T), target_vector(x0, x1, model.schedule))))
            out = model.denormalize(
                euler_sample_model(model, h, f_T, cfg.euler_steps_eval, rng, dtype)
            )
            conv = embed_mel_all(registry, out)
            sims.append(float(np.mean([float(secs(a, b)) for a, b in zip(ref, conv)])))
            mses.append(float(((out - mel) ** 2).mean()))
    finally:
        model.train(was_training)
    return {
        "l_cfm": float(np.mean(l_cfm)),
        "secs": float(np.mean(sims)),
        "mel_mse": float(np.mean(mses)),
        "n_items": len(loaded),
    }


def euler_sample_model(model: VoiceConverter, h, f_T, steps, rng, dtype=torch.float32):
    return euler_sample(model, h, f_T, steps, rng, shape=(h.shape[-2], model.n_mels), dtype=dtype)
