"""Stage-wise training under the unpaired-paired joint scheme.

Stages train in pipeline order: the warp-conditioned pose aligner, then
the texture refiner, the region-of-interest net, and finally the fitting
network; earlier stages are frozen while a later stage trains. Every
stage except the RoI net optimizes a generator/discriminator pair where
the discriminator scores the (image, dense pose) concatenation.

Per joint cycle the trainer takes one step on same-identity pairs (the
paired branch, which has a pixel ground truth: the person image itself)
and one step on random cross-identity pairs (the unpaired branch, which
is supervised by the adversarial loss alone); the ratio is configurable.

Checkpoints use a self-describing container of little-endian float32
tensors (see :func:`save_checkpoint`). Telemetry is line-delimited
``step<TAB>stage<TAB>term<TAB>value`` records. Both are deterministic:
two runs with the same config and seed produce identical bytes in
single-threaded mode.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import imagecore, uvwarp
from .data import (
    FIXTURE_UPPER_PARTS,
    Manifest,
    SampleRecord,
    pair_same_identity,
    sample_unpaired,
)
from .imagecore import BinaryMask, ImageTensor, IuvMap
from .losses import (
    LossWeights,
    discriminator_loss,
    generator_gan_loss,
    RandomFeatureExtractor,
    Vgg16FeatureExtractor,
    reconstruction_loss,
    total_paired_loss,
    _normalized_grams,
    _rms_distance,
)
from .networks import (
    FittingNetwork,
    PoseAligner,
    PoseConditionalDiscriminator,
    RoiGenerator,
    TextureRefiner,
    image_to_tensor,
    init_weights,
    iuv_to_tensor,
    mask_to_tensor,
    parameter_checksum,
    tensor_to_image,
    tensor_to_mask,
    union_roi,
)

GAN_STAGES = ("pan", "trn", "ftn")
STAGES = GAN_STAGES + ("roi",)

_UPSTREAM = {"pan": (), "trn": ("pan",), "ftn": ("pan", "trn", "roi"), "roi": ()}


class MissingCheckpointError(RuntimeError):
    """An upstream stage checkpoint is required but absent."""


class TrainingDivergedError(RuntimeError):
    """A loss term went non-finite or exceeded the abort threshold."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    epochs_per_stage: dict = field(
        default_factory=lambda: {"pan": 80, "trn": 50, "ftn": 50}
    )
    roi_iterations: int = 500
    batch_size: int = 4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    paired_unpaired_ratio: tuple = (1, 1)
    resolution: int = 256
    base_width: int = 64
    residual_blocks: int = 6
    disc_width: int = 64
    upper_parts: tuple = FIXTURE_UPPER_PARTS
    extractor_seed: int = 0
    extractor_weights: str | None = None
    passthrough: bool = True
    abort_threshold: float = 1e4
    single_thread: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        for stage in GAN_STAGES:
            if self.epochs_per_stage.get(stage, 0) < 0:
                raise ValueError(f"negative epoch count for stage {stage}")
        if self.roi_iterations < 0:
            raise ValueError("negative roi iteration count")
        res = self.resolution
        if res < 32 or res & (res - 1):
            raise ValueError("resolution must be a power of two, at least 32")
        a, b = self.paired_unpaired_ratio
        if a < 1 or b < 0:
            raise ValueError("ratio needs >= 1 paired step and >= 0 unpaired steps")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = asdict(self.loss_weights)
        d["paired_unpaired_ratio"] = list(self.paired_unpaired_ratio)
        d["upper_parts"] = list(self.upper_parts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss_weights"] = LossWeights(**d["loss_weights"])
        d["paired_unpaired_ratio"] = tuple(d["paired_unpaired_ratio"])
        d["upper_parts"] = tuple(d["upper_parts"])
        return cls(**d)


_CONFIG_KEY_TYPES = {
    "learning_rate": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "roi_iterations": int,
    "batch_size": int,
    "seed": int,
    "resolution": int,
    "base_width": int,
    "residual_blocks": int,
    "disc_width": int,
    "extractor_seed": int,
    "extractor_weights": str,
    "passthrough": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "abort_threshold": float,
    "single_thread": lambda s: s.lower() in ("1", "true", "yes", "on"),
}


def parse_config_file(path) -> TrainConfig:
    """Read the key=value training config format ('#' starts a comment).

    Recognized keys: every scalar TrainConfig field, ``epochs_pan`` /
    ``epochs_trn`` / ``epochs_ftn``, the loss weights ``w_gan w_l1 w_l2
    w_perc w_style``, ``paired_steps`` / ``unpaired_steps`` and
    ``upper_parts`` as a comma list.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    values: dict = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return apply_config_overrides(TrainConfig(), values)


def apply_config_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    """Overlay string key=value settings (file keys or CLI flags)."""
    kwargs: dict = {}
    epochs = dict(cfg.epochs_per_stage)
    weights = asdict(cfg.loss_weights)
    ratio = list(cfg.paired_unpaired_ratio)
    for key, val in values.items():
        if val is None:
            continue
        if key in _CONFIG_KEY_TYPES:
            kwargs[key] = _CONFIG_KEY_TYPES[key](val)
        elif key.startswith("epochs_") and key[len("epochs_"):] in GAN_STAGES:
            epochs[key[len("epochs_"):]] = int(val)
        elif key in weights:
            weights[key] = float(val)
        elif key == "paired_steps":
            ratio[0] = int(val)
        elif key == "unpaired_steps":
            ratio[1] = int(val)
        elif key == "upper_parts":
            kwargs["upper_parts"] = tuple(
                int(p) for p in str(val).split(",") if p.strip()
            )
        else:
            raise ValueError(f"unknown config key: {key}")
    return replace(
        cfg,
        epochs_per_stage=epochs,
        loss_weights=LossWeights(**weights),
        paired_unpaired_ratio=tuple(ratio),
        **kwargs,
    )


def build_extractor(cfg: TrainConfig):
    if cfg.extractor_weights:
        return Vgg16FeatureExtractor(cfg.extractor_weights)
    return RandomFeatureExtractor(seed=cfg.extractor_seed)


def build_generator(stage: str, cfg: TrainConfig) -> torch.nn.Module:
    classes = {
        "pan": PoseAligner,
        "trn": TextureRefiner,
        "ftn": FittingNetwork,
        "roi": RoiGenerator,
    }
    if stage not in classes:
        raise ValueError(f"unknown stage {stage!r}")
    return classes[stage](
        base_width=cfg.base_width, residual_blocks=cfg.residual_blocks
    )


def build_discriminator(cfg: TrainConfig) -> torch.nn.Module:
    return PoseConditionalDiscriminator(base_width=cfg.disc_width)


def _stage_seed(cfg: TrainConfig, stage: str, slot: int) -> int:
    return cfg.seed * 1009 + STAGES.index(stage) * 17 + slot


# ---------------------------------------------------------------------------
# Checkpoints: magic + JSON header + packed little-endian float32 blob


_CKPT_MAGIC = b"TRYONCKPT1\n"


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    params: dict          # net name -> {param name -> float32 array}
    optimizer_state: dict  # net name -> {"steps": {...}, "tensors": {...}}
    config: dict
    checksum: str = ""


def _collect_params(net: torch.nn.Module) -> dict:
    return {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in net.named_parameters()
    }


def _collect_optimizer(opt: torch.optim.Optimizer, net: torch.nn.Module) -> dict:
    steps: dict = {}
    tensors: dict = {}
    for name, param in net.named_parameters():
        state = opt.state.get(param)
        if not state:
            continue
        steps[name] = int(state["step"])
        tensors[f"{name}.exp_avg"] = state["exp_avg"].numpy().astype("<f4")
        tensors[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().astype("<f4")
    return {"steps": steps, "tensors": tensors}


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write the checkpoint container; returns the content checksum."""
    entries = []
    blobs = []
    offset = 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset,
             "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)

    for net_name in sorted(ckpt.params):
        for pname in sorted(ckpt.params[net_name]):
            add(f"param/{net_name}/{pname}", ckpt.params[net_name][pname])
    opt_steps = {}
    for net_name in sorted(ckpt.optimizer_state):
        state = ckpt.optimizer_state[net_name]
        opt_steps[net_name] = state.get("steps", {})
        for tname in sorted(state.get("tensors", {})):
            add(f"opt/{net_name}/{tname}", state["tensors"][tname])

    blob = b"".join(blobs)
    checksum = hashlib.sha256(blob).hexdigest()
    header = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "checksum": checksum,
        "dtype": "<f4",
        "tensors": entries,
        "optimizer_steps": opt_steps,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(blob)
    ckpt.checksum = checksum
    return checksum


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise ValueError(f"checkpoint checksum mismatch: {path}")
    params: dict = {}
    opt_tensors: dict = {}
    for entry in header["tensors"]:
        data = np.frombuffer(
            blob, dtype="<f4", count=entry["nbytes"] // 4,
            offset=entry["offset"],
        ).reshape(entry["shape"]).copy()
        kind, net_name, rest = entry["name"].split("/", 2)
        if kind == "param":
            params.setdefault(net_name, {})[rest] = data
        else:
            opt_tensors.setdefault(net_name, {})[rest] = data
    optimizer_state = {
        net: {"steps": steps, "tensors": opt_tensors.get(net, {})}
        for net, steps in header["optimizer_steps"].items()
    }
    return Checkpoint(
        stage=header["stage"],
        epoch=header["epoch"],
        params=params,
        optimizer_state=optimizer_state,
        config=header["config"],
        checksum=header["checksum"],
    )


def load_params_into(net: torch.nn.Module, params: dict) -> None:
    with torch.no_grad():
        for name, param in net.named_parameters():
            if name not in params:
                raise ValueError(f"checkpoint is missing parameter {name}")
            src = torch.from_numpy(np.ascontiguousarray(params[name]))
            if tuple(src.shape) != tuple(param.shape):
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {tuple(src.shape)} "
                    f"vs model {tuple(param.shape)}"
                )
            param.copy_(src)


def _restore_optimizer(opt, net, state) -> None:
    if not state or not state.get("steps"):
        return
    sd = opt.state_dict()
    name_to_idx = {name: i for i, (name, _) in enumerate(net.named_parameters())}
    for name, step in state["steps"].items():
        idx = name_to_idx[name]
        sd["state"][idx] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(
                np.ascontiguousarray(state["tensors"][f"{name}.exp_avg"])
            ),
            "exp_avg_sq": torch.from_numpy(
                np.ascontiguousarray(state["tensors"][f"{name}.exp_avg_sq"])
            ),
        }
    opt.load_state_dict(sd)


def checkpoint_dir(run_dir) -> Path:
    return Path(run_dir) / "ckpt"


def find_stage_checkpoint(run_dir, stage: str) -> Path | None:
    """Highest-epoch checkpoint of a stage under runs/<name>/ckpt."""
    cdir = checkpoint_dir(run_dir)
    best, best_epoch = None, -1
    if cdir.is_dir():
        for path in cdir.glob(f"{stage}_*.ckpt"):
            try:
                epoch = int(path.stem.split("_", 1)[1])
            except ValueError:
                continue
            if epoch > best_epoch:
                best, best_epoch = path, epoch
    return best


def _load_stage_net(run_dir, stage: str) -> tuple[torch.nn.Module, dict]:
    path = find_stage_checkpoint(run_dir, stage)
    if path is None:
        raise MissingCheckpointError(
            f"missing upstream checkpoint for stage {stage!r} under {run_dir}"
        )
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.config)
    net = build_generator(stage, cfg)
    load_params_into(net, ckpt.params["gen"])
    net.eval()
    net.requires_grad_(False)
    return net, ckpt.config


# ---------------------------------------------------------------------------
# Sample loading and batch assembly


class SampleCache:
    """Loads records at the training resolution and memoizes the heavy
    derived artifacts (UV indices, warps)."""

    def __init__(self, resolution: int):
        self.resolution = resolution
        self._images: dict = {}
        self._iuvs: dict = {}
        self._masks: dict = {}
        self._indices: dict = {}
        self._warps: dict = {}

    def image(self, rec: SampleRecord) -> ImageTensor:
        if rec not in self._images:
            img = imagecore.load_image(rec.image_path)
            if img.height != self.resolution or img.width != self.resolution:
                img = imagecore.resize_image(img, self.resolution)
            self._images[rec] = img
        return self._images[rec]

    def iuv(self, rec: SampleRecord) -> IuvMap:
        if rec not in self._iuvs:
            iuv = imagecore.load_iuv(rec.iuv_path)
            if iuv.height != self.resolution or iuv.width != self.resolution:
                iuv = imagecore.resize_iuv(iuv, self.resolution)
            self._iuvs[rec] = iuv
        return self._iuvs[rec]

    def mask(self, rec: SampleRecord) -> BinaryMask:
        if rec.parsing_mask_path is None:
            raise FileNotFoundError(
                f"record {rec.key} has no parsing mask file"
            )
        if rec not in self._masks:
            mask = imagecore.load_mask(rec.parsing_mask_path)
            if mask.values.shape[0] != self.resolution:
                mask = imagecore.resize_mask(mask, self.resolution)
            self._masks[rec] = mask
        return self._masks[rec]

    def uv_index(self, rec: SampleRecord):
        if rec not in self._indices:
            self._indices[rec] = uvwarp.build_uv_index(self.image(rec), self.iuv(rec))
        return self._indices[rec]

    def warped(self, model: SampleRecord, person: SampleRecord):
        key = (model, person)
        if key not in self._warps:
            self._warps[key] = uvwarp.warp(self.uv_index(model), self.iuv(person))
        return self._warps[key]


def _duo_batch(cache: SampleCache, duos) -> dict:
    """Tensor batch for one list of (model, person) record pairs."""
    model, model_pose, person, person_pose = [], [], [], []
    warped, region = [], []
    for m, p in duos:
        w, _ = cache.warped(m, p)
        r = uvwarp.texture_region(w)
        model.append(image_to_tensor(cache.image(m)))
        model_pose.append(iuv_to_tensor(cache.iuv(m)))
        person.append(image_to_tensor(cache.image(p)))
        person_pose.append(iuv_to_tensor(cache.iuv(p)))
        warped.append(image_to_tensor(w))
        region.append(mask_to_tensor(r))
    return {
        "model": torch.stack(model),
        "model_pose": torch.stack(model_pose),
        "person": torch.stack(person),
        "person_pose": torch.stack(person_pose),
        "warped": torch.stack(warped),
        "region": torch.stack(region),
    }


# ---------------------------------------------------------------------------
# Joint optimization


@dataclass
class StageContext:
    """Everything one GAN stage needs for a joint step."""

    stage: str
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    gen_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer
    upstream: dict
    extractor: object
    cfg: TrainConfig


@dataclass
class StepReport:
    """Loss terms per branch plus the weights they entered with."""

    branches: dict
    weights: dict


def _stage_fake(ctx: StageContext, batch: dict) -> torch.Tensor:
    """Run the pipeline up to the trained stage; upstream stays frozen."""
    stage = ctx.stage
    if stage == "pan":
        return ctx.generator(
            batch["model"], batch["model_pose"], batch["person_pose"], batch["warped"]
        )
    with torch.no_grad():
        aligned = ctx.upstream["pan"](
            batch["model"], batch["model_pose"], batch["person_pose"], batch["warped"]
        )
        merged = batch["warped"] * batch["region"] + aligned * (1.0 - batch["region"])
    if stage == "trn":
        return ctx.generator(merged, batch["region"])
    with torch.no_grad():
        refined = ctx.upstream["trn"](merged, batch["region"])
        roi = (
            ctx.upstream["roi"](batch["person"], batch["person_pose"]) >= 0.5
        ).float()
        garment = refined * roi
        outside = batch["person"] * (1.0 - roi)
    return ctx.generator(garment, outside)


def _check_terms(terms: dict, threshold: float) -> None:
    for name, value in terms.items():
        if not math.isfinite(value) or abs(value) > threshold:
            raise TrainingDivergedError(
                f"loss term {name!r} diverged with value {value}"
            )


def _branch_step(ctx: StageContext, batch: dict, paired: bool) -> dict:
    cfg = ctx.cfg
    fake = _stage_fake(ctx, batch)
    pose = batch["person_pose"]
    real = batch["person"]

    ctx.disc_opt.zero_grad(set_to_none=True)
    d_loss = discriminator_loss(
        ctx.discriminator(real, pose), ctx.discriminator(fake.detach(), pose)
    )
    d_loss.backward()
    ctx.disc_opt.step()

    ctx.gen_opt.zero_grad(set_to_none=True)
    g_gan = generator_gan_loss(ctx.discriminator(fake, pose))
    terms = {"d_loss": float(d_loss.detach()), "g_gan": float(g_gan.detach())}
    if paired:
        # the paired ground truth is the person image itself: same
        # identity and clothes, so the transfer must reproduce it
        l1, l2 = reconstruction_loss(fake, real)
        fa = ctx.extractor.extract(fake)
        fb = ctx.extractor.extract(real)
        perc = fake.new_zeros(())
        for a, b in zip(fa.features, fb.features):
            perc = perc + _rms_distance(a, b)
        style = fake.new_zeros(())
        for a, b in zip(fa.spatial, fb.spatial):
            style = style + _rms_distance(_normalized_grams(a), _normalized_grams(b))
        tensor_terms = {"g_gan": g_gan, "l1": l1, "l2": l2, "perc": perc,
                        "style": style}
        total = total_paired_loss(tensor_terms, cfg.loss_weights)
        terms.update(
            l1=float(l1.detach()),
            l2=float(l2.detach()),
            perc=float(perc.detach()),
            style=float(style.detach()),
            total=float(total.detach()),
        )
        loss = total
    else:
        loss = cfg.loss_weights.w_gan * g_gan
    loss.backward()
    ctx.gen_opt.step()
    _check_terms(terms, cfg.abort_threshold)
    return terms


def joint_step(
    ctx: StageContext,
    batch_paired: dict | None = None,
    batch_unpaired: dict | None = None,
) -> StepReport:
    """One discriminator and one generator update per supplied branch.

    The unpaired branch contributes adversarial terms only; the paired
    branch adds the pixel-similarity terms on top. Paired runs first.
    """
    if batch_paired is None and batch_unpaired is None:
        raise ValueError("joint_step needs at least one branch batch")
    branches = {}
    if batch_paired is not None:
        branches["paired"] = _branch_step(ctx, batch_paired, paired=True)
    if batch_unpaired is not None:
        branches["unpaired"] = _branch_step(ctx, batch_unpaired, paired=False)
    lw = ctx.cfg.loss_weights
    weights = {
        "d_loss": 1.0,
        "g_gan": lw.w_gan,
        "l1": lw.w_l1,
        "l2": lw.w_l2,
        "perc": lw.w_perc,
        "style": lw.w_style,
    }
    return StepReport(branches=branches, weights=weights)


class TelemetryWriter:
    """Appends ``step<TAB>stage<TAB>term<TAB>value`` records."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, step: int, stage: str, terms: dict) -> None:
        with open(self.path, "a") as fh:
            for term in sorted(terms):
                fh.write(f"{step}\t{stage}\t{term}\t{terms[term]!r}\n")


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def train_stage(stage: str, cfg: TrainConfig, manifest: Manifest, run_dir) -> Checkpoint:
    """Train one stage to its configured length and checkpoint it.

    Upstream stages must already have checkpoints under the run
    directory; they are loaded frozen.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage == "roi":
        return train_roi(cfg, manifest, run_dir)
    run_dir = Path(run_dir)
    if cfg.single_thread:
        torch.set_num_threads(1)

    upstream = {}
    for dep in _UPSTREAM[stage]:
        upstream[dep], _ = _load_stage_net(run_dir, dep)

    gen = init_weights(build_generator(stage, cfg), _stage_seed(cfg, stage, 1))
    disc = init_weights(build_discriminator(cfg), _stage_seed(cfg, stage, 2))
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    gen_opt = torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, betas=betas)
    disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=betas)
    ctx = StageContext(
        stage=stage,
        generator=gen,
        discriminator=disc,
        gen_opt=gen_opt,
        disc_opt=disc_opt,
        upstream=upstream,
        extractor=build_extractor(cfg),
        cfg=cfg,
    )

    cache = SampleCache(cfg.resolution)
    pairs = pair_same_identity(manifest)
    if not pairs:
        raise ValueError("manifest yields no same-identity pairs for training")
    shuffle_rng = random.Random(_stage_seed(cfg, stage, 3))
    unpaired_stream = sample_unpaired(manifest, _stage_seed(cfg, stage, 4))
    telemetry = TelemetryWriter(run_dir / "telemetry.tsv")

    n_paired, n_unpaired = cfg.paired_unpaired_ratio
    step = 0
    epochs = cfg.epochs_per_stage.get(stage, 0)
    for _epoch in range(epochs):
        order = list(pairs)
        shuffle_rng.shuffle(order)
        chunk_iter = iter(list(_chunks(order, cfg.batch_size)))
        exhausted = False
        while not exhausted:
            for _ in range(n_paired):
                chunk = next(chunk_iter, None)
                if chunk is None:
                    exhausted = True
                    break
                report = joint_step(ctx, batch_paired=_duo_batch(cache, chunk))
                step += 1
                telemetry.write(step, stage, _flatten_report(report))
            if exhausted:
                break
            for _ in range(n_unpaired):
                duos = [next(unpaired_stream) for _ in range(cfg.batch_size)]
                report = joint_step(ctx, batch_unpaired=_duo_batch(cache, duos))
                step += 1
                telemetry.write(step, stage, _flatten_report(report))

    ckpt = Checkpoint(
        stage=stage,
        epoch=epochs,
        params={"gen": _collect_params(gen), "disc": _collect_params(disc)},
        optimizer_state={
            "gen": _collect_optimizer(gen_opt, gen),
            "disc": _collect_optimizer(disc_opt, disc),
        },
        config=cfg.to_dict(),
    )
    save_checkpoint(ckpt, checkpoint_dir(run_dir) / f"{stage}_{epochs}.ckpt")
    return ckpt


def _flatten_report(report: StepReport) -> dict:
    flat = {}
    for branch, terms in report.branches.items():
        for term, value in terms.items():
            flat[f"{branch}.{term}"] = value
    return flat


def train_roi(cfg: TrainConfig, manifest: Manifest, run_dir) -> Checkpoint:
    """Fit the RoI net against the clothes/body union pseudo ground truth
    with an L1 objective."""
    run_dir = Path(run_dir)
    if cfg.single_thread:
        torch.set_num_threads(1)
    for rec in manifest.records:
        if rec.parsing_mask_path is None:
            raise FileNotFoundError(
                f"record {rec.key} lacks a parsing mask; roi training needs one"
            )
    cache = SampleCache(cfg.resolution)
    records = sorted(manifest.records, key=lambda r: r.key)

    net = init_weights(build_generator("roi", cfg), _stage_seed(cfg, "roi", 1))
    opt = torch.optim.Adam(
        net.parameters(), lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )
    rng = random.Random(_stage_seed(cfg, "roi", 3))
    telemetry = TelemetryWriter(run_dir / "telemetry.tsv")

    person = torch.stack([image_to_tensor(cache.image(r)) for r in records])
    pose = torch.stack([iuv_to_tensor(cache.iuv(r)) for r in records])
    pseudo = torch.stack(
        [
            mask_to_tensor(union_roi(cache.mask(r), cache.iuv(r), cfg.upper_parts))
            for r in records
        ]
    )

    for it in range(cfg.roi_iterations):
        idx = [rng.randrange(len(records)) for _ in range(cfg.batch_size)]
        opt.zero_grad(set_to_none=True)
        predicted = net(person[idx], pose[idx])
        loss = (predicted - pseudo[idx]).abs().mean()
        value = float(loss.detach())
        if not math.isfinite(value) or value > cfg.abort_threshold:
            raise TrainingDivergedError(f"loss term 'roi_l1' diverged with value {value}")
        loss.backward()
        opt.step()
        telemetry.write(it + 1, "roi", {"roi_l1": value})

    ckpt = Checkpoint(
        stage="roi",
        epoch=cfg.roi_iterations,
        params={"gen": _collect_params(net)},
        optimizer_state={"gen": _collect_optimizer(opt, net)},
        config=cfg.to_dict(),
    )
    save_checkpoint(ckpt, checkpoint_dir(run_dir) / f"roi_{cfg.roi_iterations}.ckpt")
    return ckpt


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two hard masks."""
    av = a.values >= 0.5
    bv = b.values >= 0.5
    union = np.logical_or(av, bv).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(av, bv).sum() / union)


# ---------------------------------------------------------------------------
# Inference


@dataclass
class TryonResult:
    """Final output plus every intermediate of the pipeline."""

    tryon: ImageTensor       # unit_signed
    warped: ImageTensor      # byte range, black where uncovered
    covered: BinaryMask
    aligned: ImageTensor     # unit_signed
    merged: ImageTensor      # unit_signed
    refined: ImageTensor     # unit_signed
    roi: BinaryMask          # hard


class TryonPipeline:
    """The four trained stages restored from a run directory."""

    def __init__(self, nets: dict, cfg: TrainConfig):
        for stage in STAGES:
            if stage not in nets:
                raise MissingCheckpointError(f"pipeline is missing stage {stage!r}")
        self.nets = nets
        self.cfg = cfg
        for net in nets.values():
            net.eval()
            net.requires_grad_(False)

    @classmethod
    def load(cls, run_dir) -> "TryonPipeline":
        nets = {}
        config = None
        for stage in STAGES:
            nets[stage], cfg_dict = _load_stage_net(run_dir, stage)
            if stage == "ftn":
                config = cfg_dict
        cfg = TrainConfig.from_dict(config)
        return cls(nets, cfg)

    def infer(
        self,
        model_img: ImageTensor,
        person_img: ImageTensor,
        model_iuv: IuvMap,
        person_iuv: IuvMap,
        parsing_mask: BinaryMask | None = None,
        passthrough: bool | None = None,
    ) -> TryonResult:
        return infer_tryon(
            self, model_img, person_img, model_iuv, person_iuv,
            parsing_mask=parsing_mask, passthrough=passthrough,
        )


def infer_tryon(
    pipeline: TryonPipeline,
    model_img: ImageTensor,
    person_img: ImageTensor,
    model_iuv: IuvMap,
    person_iuv: IuvMap,
    parsing_mask: BinaryMask | None = None,
    passthrough: bool | None = None,
) -> TryonResult:
    """Full try-on: warp, pose-align, merge, refine, RoI split, fit.

    With passthrough enabled (the default), person pixels outside the
    hard RoI are copied into the output verbatim, preserving identity
    exactly there.
    """
    cfg = pipeline.cfg
    res = cfg.resolution
    if passthrough is None:
        passthrough = cfg.passthrough

    def fit_img(img):
        return img if img.height == res and img.width == res else imagecore.resize_image(img, res)

    def fit_iuv(iuv):
        return iuv if iuv.height == res and iuv.width == res else imagecore.resize_iuv(iuv, res)

    model_img = fit_img(model_img)
    person_img = fit_img(person_img)
    model_iuv = fit_iuv(model_iuv)
    person_iuv = fit_iuv(person_iuv)

    warped, covered = uvwarp.warp(
        uvwarp.build_uv_index(model_img, model_iuv), person_iuv
    )
    region = uvwarp.texture_region(warped)

    with torch.no_grad():
        m = image_to_tensor(model_img)[None]
        md = iuv_to_tensor(model_iuv)[None]
        p = image_to_tensor(person_img)[None]
        pd = iuv_to_tensor(person_iuv)[None]
        mw = image_to_tensor(warped)[None]
        r = mask_to_tensor(region)[None]

        aligned = pipeline.nets["pan"](m, md, pd, mw)
        merged = mw * r + aligned * (1.0 - r)
        refined = pipeline.nets["trn"](merged, r)
        roi = (pipeline.nets["roi"](p, pd) >= 0.5).float()
        if parsing_mask is not None:
            if parsing_mask.values.shape[0] != res:
                parsing_mask = imagecore.resize_mask(parsing_mask, res)
            union = union_roi(parsing_mask.binarize(), person_iuv, cfg.upper_parts)
            roi = torch.maximum(roi, mask_to_tensor(union)[None])
        garment = refined * roi
        outside = p * (1.0 - roi)
        tryon = pipeline.nets["ftn"](garment, outside)
        if passthrough:
            tryon = tryon * roi + p * (1.0 - roi)

    return TryonResult(
        tryon=tensor_to_image(tryon[0]),
        warped=warped,
        covered=covered,
        aligned=tensor_to_image(aligned[0]),
        merged=tensor_to_image(merged[0]),
        refined=tensor_to_image(refined[0]),
        roi=tensor_to_mask(roi[0]),
    )
