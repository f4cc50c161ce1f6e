"""Two-stage training, evaluation metrics and classification-map rendering.

Stage one pretrains a per-modality encoder to reconstruct the clean patch from
its multi-step noised stack (half-MSE objective, fresh noise every epoch).
Stage two freezes both encoders, extracts features once per sample with
coordinate-seeded noise, and trains the reuse/classifier head with
cross-entropy. Everything is deterministic given the config seed.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .backbone import DecodeHead, Encoder, EncoderConfig, EncoderFeatures
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_FUSE_STEPS,
    DEFAULT_STEPS,
    NoiseSchedule,
    build_schedule,
    denoise_loss,
    fuse_steps,
    fuse_steps_seeded,
)
from .fusion import ClassifierHead, FrmParams, classify, fuse_modalities
from .tensor import Module, Param, Tensor, cross_entropy, no_grad

MODALITIES = ("hsi", "lidar")

# salts for the independent deterministic random streams
_SALT_INIT = 101
_SALT_SHUFFLE = 202
_SALT_NOISE = 303
_SALT_FEATURES = 404


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment buffers per parameter name, plus skip accounting."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0


def adam_step(params, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam with decoupled weight decay (lr * wd * theta)."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            warnings.warn(f"skipping update for {p.name}: non-finite gradient")
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.data, dtype=np.float64)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g, dtype=np.float64)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = lr * (m_hat / (np.sqrt(v_hat) + eps))
        if weight_decay:
            update = update + lr * weight_decay * p.data
        p.data[...] = (p.data - update).astype(p.dtype)


def lr_at(epoch: int, base_lr: float, step: int = 50, gamma: float = 0.9) -> float:
    """Step decay: base_lr * gamma ** floor(epoch / step)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * gamma ** (epoch // step)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    train_fraction: float = 0.05
    patch: int = 7
    width: int = 16
    depth: int = 2
    heads: int = 2
    hidden: int = 128
    lr: float = 1e-3
    weight_decay: float = 5e-3
    sched_step: int = 50
    sched_gamma: float = 0.9
    batch: int = 64
    epochs_diffusion: int = 60
    epochs_classifier: int = 80
    diffusion_steps: int = DEFAULT_STEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    fuse_steps: tuple[int, ...] = DEFAULT_FUSE_STEPS
    tau: float = 0.5
    use_freq_parser: bool = True
    use_frm: bool = True
    finetune_encoder: bool = False
    checkpoint_every: int = 25
    noise_draws: int = 4
    eval_draws: int = 4

    def __post_init__(self):
        self.fuse_steps = tuple(int(s) for s in self.fuse_steps)
        self.validate()

    def validate(self):
        positive = ("patch", "width", "depth", "heads", "hidden", "lr", "weight_decay", "sched_step",
                    "batch", "epochs_diffusion", "epochs_classifier", "diffusion_steps", "checkpoint_every",
                    "noise_draws", "eval_draws")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must be in (0,1), got {self.train_fraction}")
        if self.patch % 2 == 0:
            raise ValueError(f"patch must be odd, got {self.patch}")
        if not self.fuse_steps:
            raise ValueError("fuse_steps must not be empty")
        if max(self.fuse_steps) > self.diffusion_steps:
            raise ValueError(f"fuse step {max(self.fuse_steps)} exceeds diffusion_steps {self.diffusion_steps}")
        if list(self.fuse_steps) != sorted(self.fuse_steps):
            raise ValueError(f"fuse_steps must be ascending, got {self.fuse_steps}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0,1), got {self.tau}")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.diffusion_steps, self.beta_start, self.beta_end)


def _seed_rng(*ids) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(i) for i in ids]))


def _coord_seeds(seed: int, coords: np.ndarray, draw: int = 0) -> np.ndarray:
    """Stable per-pixel noise seeds so features are identical across calls.

    ``draw`` indexes independent noise realizations of the same pixel (used
    for stage-2 augmentation and draw-averaged prediction).
    """
    out = np.empty(len(coords), dtype=np.uint64)
    for i, (r, c) in enumerate(coords):
        ss = np.random.SeedSequence([seed, _SALT_FEATURES, int(r), int(c), int(draw)])
        out[i] = ss.generate_state(1, np.uint64)[0]
    return out


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


@dataclass
class Models:
    enc: dict[str, Encoder]
    dec: dict[str, DecodeHead]
    frm1: FrmParams | None
    frm2: FrmParams | None
    frm_cross: FrmParams | None
    head: ClassifierHead
    cfg: TrainConfig

    def all_modules(self) -> list[Module]:
        mods: list[Module] = list(self.enc.values()) + list(self.dec.values())
        mods += [m for m in (self.frm1, self.frm2, self.frm_cross) if m is not None]
        mods.append(self.head)
        return mods

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for mod in self.all_modules():
            out.update(mod.state())
        return out

    def load_state(self, state):
        for mod in self.all_modules():
            mod.load_state(state)

    def fuse_features(self, f1: EncoderFeatures, f2: EncoderFeatures) -> Tensor:
        if self.frm1 is not None:
            return fuse_modalities(f1, f2, self.frm1, self.frm2, self.frm_cross)
        return f1.deep + f2.deep  # reuse disabled: deep features only


def build_models(cfg: TrainConfig, c1: int, c2: int, num_classes: int) -> Models:
    rng = _seed_rng(cfg.seed, _SALT_INIT)
    s = len(cfg.fuse_steps)
    enc, dec = {}, {}
    for name, c in (("hsi", c1), ("lidar", c2)):
        econf = EncoderConfig(in_channels=c * s, width=cfg.width, depth=cfg.depth, heads=cfg.heads,
                              patch=cfg.patch, use_freq_filter=cfg.use_freq_parser)
        enc[name] = Encoder(f"enc_{name}", econf, rng)
        dec[name] = DecodeHead(f"dec_{name}", cfg.width, c * s, rng, zero_init=True)
    if cfg.use_frm:
        frm1 = FrmParams("frm_hsi", cfg.width, rng)
        frm2 = FrmParams("frm_lidar", cfg.width, rng)
        frm_cross = FrmParams("frm_cross", cfg.width, rng)
    else:
        frm1 = frm2 = frm_cross = None
    head = ClassifierHead("head", cfg.width, cfg.patch, num_classes, hidden=cfg.hidden, rng=rng, tau=cfg.tau)
    return Models(enc=enc, dec=dec, frm1=frm1, frm2=frm2, frm_cross=frm_cross, head=head, cfg=cfg)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"HFCK"


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    config: dict
    rng_state: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path) -> None:
        names = sorted(self.tensors)
        entries = [{"name": n, "dtype": self.tensors[n].dtype.name, "shape": list(self.tensors[n].shape)}
                   for n in names]
        header = json.dumps(
            {"stage": self.stage, "epoch": self.epoch, "config": self.config,
             "rng_state": self.rng_state, "tensors": entries},
            sort_keys=True,
        ).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for n in names:
                fh.write(np.ascontiguousarray(self.tensors[n]).tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        with open(path, "rb") as fh:
            if fh.read(4) != CKPT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen))
            tensors = {}
            for entry in header["tensors"]:
                dtype = np.dtype(entry["dtype"])
                count = int(np.prod(entry["shape"])) if entry["shape"] else 1
                buf = fh.read(count * dtype.itemsize)
                tensors[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
        return cls(stage=header["stage"], epoch=header["epoch"], config=header["config"],
                   rng_state=header["rng_state"], tensors=tensors)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)


def _make_checkpoint(stage, epoch, cfg, modules, opt: AdamState | None = None) -> Checkpoint:
    tensors = {}
    for mod in modules:
        tensors.update(mod.state())
    if opt is not None:
        for name, arr in opt.m.items():
            tensors[f"__opt_m__{name}"] = arr.copy()
        for name, arr in opt.v.items():
            tensors[f"__opt_v__{name}"] = arr.copy()
    return Checkpoint(
        stage=stage,
        epoch=epoch,
        config=asdict(cfg) | {"fuse_steps": list(cfg.fuse_steps)},
        rng_state={"seed": cfg.seed, "epoch": epoch, "opt_t": opt.t if opt else 0},
        tensors=tensors,
    )


def _restore_opt(state: AdamState, ckpt: Checkpoint) -> None:
    state.t = int(ckpt.rng_state.get("opt_t", 0))
    for name, arr in ckpt.tensors.items():
        if name.startswith("__opt_m__"):
            state.m[name[len("__opt_m__"):]] = arr.astype(np.float64).copy()
        elif name.startswith("__opt_v__"):
            state.v[name[len("__opt_v__"):]] = arr.astype(np.float64).copy()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    confusion: np.ndarray       # [K, K] int64, rows true, cols predicted
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray       # [K] recall per class, NaN when absent from test

    def to_json(self) -> str:
        per_class = [None if not np.isfinite(v) else float(v) for v in self.per_class]
        doc = {
            "oa": float(self.oa),
            "aa": float(self.aa),
            "kappa": float(self.kappa),
            "confusion": self.confusion.tolist(),
            "per_class": per_class,
        }
        return json.dumps(doc, sort_keys=True)


def confusion_matrix(true_labels, pred_labels, num_classes: int) -> np.ndarray:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    if true_labels.shape != pred_labels.shape:
        raise ValueError(f"label arrays disagree: {true_labels.shape} vs {pred_labels.shape}")
    idx = (true_labels - 1) * num_classes + (pred_labels - 1)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def compute_metrics(confusion: np.ndarray) -> MetricsReport:
    """OA = trace ratio, AA = mean recall over classes present, Cohen's kappa."""
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    oa = confusion.trace() / total
    row = confusion.sum(axis=1)
    col = confusion.sum(axis=0)
    per_class = np.full(len(confusion), np.nan)
    present = row > 0
    per_class[present] = np.diag(confusion)[present] / row[present]
    if not np.all(present):
        absent = np.nonzero(~present)[0] + 1
        warnings.warn(f"classes {absent.tolist()} absent from the test set; excluded from AA")
    aa = float(per_class[present].mean())
    pe = float((row * col).sum()) / float(total) ** 2
    kappa = 0.0 if pe >= 1.0 else (oa - pe) / (1.0 - pe)
    return MetricsReport(confusion=confusion, oa=float(oa), aa=aa, kappa=float(kappa), per_class=per_class)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def prepare_scene(scene: data_mod.Scene, cfg: TrainConfig):
    norm = data_mod.normalize_bands(scene)
    split = data_mod.split_samples(norm, cfg.train_fraction, cfg.seed)
    return norm, split


def _check_divergence(losses, stage):
    if len(losses) < 21:
        return
    initial = losses[0]
    recent = losses[-20:]
    if all((not np.isfinite(l)) or l > 10 * max(initial, 1e-12) for l in recent):
        raise TrainingDiverged(
            f"{stage}: loss stuck above 10x initial for 20 epochs "
            f"(initial {initial:.3e}, last {recent[-1]:.3e})"
        )


def loss_trend_ok(losses, window_fraction: float = 0.1) -> bool:
    """Moving-average check: mean of the final window <= mean of the one before it."""
    k = max(2, int(len(losses) * window_fraction))
    if len(losses) < 2 * k:
        return True
    tail = np.mean(losses[-k:])
    prev = np.mean(losses[-2 * k:-k])
    return bool(tail <= prev + 1e-12)


def train_diffusion(scene: data_mod.Scene, cfg: TrainConfig, out_dir=None, resume=False):
    """Stage 1: reconstruction pretraining of both modality encoders.

    Returns ({modality: Checkpoint}, {modality: history}); history carries the
    per-epoch loss curve and the final moving-average trend check.
    """
    norm, split = prepare_scene(scene, cfg)
    sched = cfg.schedule()
    batch_src = data_mod.extract_patches(norm, split.train_coords, cfg.patch)
    models = build_models(cfg, norm.hsi.shape[2], norm.lidar.shape[2], norm.num_classes)
    s = len(cfg.fuse_steps)

    ckpts: dict[str, Checkpoint] = {}
    histories: dict[str, dict] = {}
    for mi, modality in enumerate(MODALITIES):
        x0_all = (batch_src.patches1 if modality == "hsi" else batch_src.patches2).astype(np.float32)
        enc, dec = models.enc[modality], models.dec[modality]
        params = list(enc.params()) + list(dec.params())
        opt = AdamState()
        start_epoch = 0
        if resume and out_dir is not None:
            latest = _latest_checkpoint(out_dir, f"diffusion_{modality}")
            if latest is not None:
                ckpt = Checkpoint.load(latest)
                enc.load_state(ckpt.tensors)
                dec.load_state(ckpt.tensors)
                _restore_opt(opt, ckpt)
                start_epoch = ckpt.epoch + 1

        losses: list[float] = []
        epochs_run: list[int] = []
        for epoch in range(start_epoch, cfg.epochs_diffusion):
            lr = lr_at(epoch, cfg.lr, cfg.sched_step, cfg.sched_gamma)
            perm = _seed_rng(cfg.seed, _SALT_SHUFFLE, mi, epoch).permutation(len(x0_all))
            epoch_loss, n_batches = 0.0, 0
            for bi, lo in enumerate(range(0, len(perm), cfg.batch)):
                x0 = x0_all[perm[lo:lo + cfg.batch]]
                noise_rng = _seed_rng(cfg.seed, _SALT_NOISE, mi, epoch, bi)
                stack = fuse_steps(x0, cfg.fuse_steps, sched, noise_rng)
                target = np.tile(x0, (1, 1, 1, s))
                for p in params:
                    p.zero_grad()
                feats = enc(Tensor(stack.data))
                loss = denoise_loss(dec(feats.deep), Tensor(target))
                loss.backward()
                adam_step(params, opt, lr=lr, weight_decay=cfg.weight_decay)
                epoch_loss += loss.item()
                n_batches += 1
            losses.append(epoch_loss / n_batches)
            epochs_run.append(epoch)
            _check_divergence(losses, f"diffusion[{modality}]")
            if out_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0):
                _make_checkpoint("diffusion", epoch, cfg, [enc, dec], opt).save(
                    Path(out_dir) / f"diffusion_{modality}_e{epoch}.ckpt"
                )

        trend = loss_trend_ok(losses)
        if not trend:
            warnings.warn(f"diffusion[{modality}]: loss trend over the final epochs is not non-increasing")
        ckpt = _make_checkpoint("diffusion", cfg.epochs_diffusion - 1, cfg, [enc, dec], opt)
        if out_dir is not None:
            ckpt.save(Path(out_dir) / f"diffusion_{modality}.ckpt")
        ckpts[modality] = ckpt
        histories[modality] = {"epoch": epochs_run, "loss": losses, "trend_ok": trend}
    return ckpts, histories


def _encode_features(models: Models, x0: np.ndarray, modality: str, seeds, sched) -> EncoderFeatures:
    stack = fuse_steps_seeded(x0.astype(np.float32), models.cfg.fuse_steps, sched, seeds)
    return models.enc[modality](Tensor(stack.data))


def _cached_features(models: Models, batch_src: data_mod.PatchBatch, coords, cfg, sched, draw=0, chunk=256):
    """Frozen-encoder features with per-coordinate noise seeds, computed once per draw."""
    seeds = _coord_seeds(cfg.seed, coords, draw)
    out = {}
    for modality, x0_all in (("hsi", batch_src.patches1), ("lidar", batch_src.patches2)):
        shallow, deep = [], []
        with no_grad():
            for lo in range(0, len(coords), chunk):
                feats = _encode_features(models, x0_all[lo:lo + chunk], modality, seeds[lo:lo + chunk], sched)
                shallow.append(feats.shallow.data)
                deep.append(feats.deep.data)
        out[modality] = EncoderFeatures(
            shallow=np.concatenate(shallow), deep=np.concatenate(deep)
        )
    return out


def train_classifier(scene: data_mod.Scene, diffusion_ckpts, cfg: TrainConfig, out_dir=None, resume=False):
    """Stage 2: frozen encoders, trainable reuse units + classifier head.

    Returns (checkpoint, history, metrics) where metrics is the test-split
    report produced by the same path `evaluate` uses.
    """
    norm, split = prepare_scene(scene, cfg)
    sched = cfg.schedule()
    models = build_models(cfg, norm.hsi.shape[2], norm.lidar.shape[2], norm.num_classes)
    for modality in MODALITIES:
        if modality not in diffusion_ckpts:
            raise ValueError(f"missing diffusion checkpoint for modality {modality!r}")
        ckpt = diffusion_ckpts[modality]
        models.enc[modality].load_state(ckpt.tensors)

    trainable: list[Param] = list(models.head.params())
    for frm in (models.frm1, models.frm2, models.frm_cross):
        if frm is not None:
            trainable += list(frm.params())
    if cfg.finetune_encoder:
        for modality in MODALITIES:
            trainable += list(models.enc[modality].params())
    else:
        for modality in MODALITIES:
            models.enc[modality].freeze()

    batch_src = data_mod.extract_patches(norm, split.train_coords, cfg.patch)
    labels = batch_src.labels - 1
    # one feature table per noise draw; epochs cycle through them so the head
    # trains on several corruptions of each sample (noiseless stacks collapse
    # to a single draw). Fine-tuning cannot cache: encoders rerun with grads.
    n_draws = cfg.noise_draws if any(s > 0 for s in cfg.fuse_steps) else 1
    feat_draws = None
    if not cfg.finetune_encoder:
        feat_draws = [_cached_features(models, batch_src, split.train_coords, cfg, sched, draw=d)
                      for d in range(n_draws)]
    n = len(labels)

    opt = AdamState()
    start_epoch = 0
    if resume and out_dir is not None:
        latest = _latest_checkpoint(out_dir, "classifier")
        if latest is not None:
            prev = Checkpoint.load(latest)
            models.load_state(prev.tensors)
            _restore_opt(opt, prev)
            start_epoch = prev.epoch + 1

    history = {"epoch": [], "loss": [], "train_oa": []}
    draw_seeds = [_coord_seeds(cfg.seed, split.train_coords, d) for d in range(n_draws)]
    for epoch in range(start_epoch, cfg.epochs_classifier):
        lr = lr_at(epoch, cfg.lr, cfg.sched_step, cfg.sched_gamma)
        perm = _seed_rng(cfg.seed, _SALT_SHUFFLE, 9, epoch).permutation(n)
        draw = epoch % n_draws
        feats = feat_draws[draw] if feat_draws is not None else None
        epoch_loss, n_batches, hits = 0.0, 0, 0
        for lo in range(0, n, cfg.batch):
            sel = perm[lo:lo + cfg.batch]
            if feats is not None:
                f1 = EncoderFeatures(Tensor(feats["hsi"].shallow[sel]), Tensor(feats["hsi"].deep[sel]))
                f2 = EncoderFeatures(Tensor(feats["lidar"].shallow[sel]), Tensor(feats["lidar"].deep[sel]))
            else:
                f1 = _encode_features(models, batch_src.patches1[sel], "hsi", draw_seeds[draw][sel], sched)
                f2 = _encode_features(models, batch_src.patches2[sel], "lidar", draw_seeds[draw][sel], sched)
            for p in trainable:
                p.zero_grad()
            fused = models.fuse_features(f1, f2)
            logits = models.head.logits(fused)
            loss = cross_entropy(logits, labels[sel])
            loss.backward()
            adam_step(trainable, opt, lr=lr, weight_decay=cfg.weight_decay)
            epoch_loss += loss.item()
            n_batches += 1
            hits += int((np.argmax(logits.data, axis=-1) == labels[sel]).sum())
        history["epoch"].append(epoch)
        history["loss"].append(epoch_loss / n_batches)
        history["train_oa"].append(hits / n)
        _check_divergence(history["loss"], "classifier")
        if out_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0):
            _make_checkpoint("classifier", epoch, cfg, models.all_modules(), opt).save(
                Path(out_dir) / f"classifier_e{epoch}.ckpt"
            )

    metrics = _evaluate_models(models, norm, split.test_coords, sched)
    ckpt = _make_checkpoint("classifier", cfg.epochs_classifier - 1, cfg, models.all_modules(), opt)
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "classifier.ckpt")
    return ckpt, history, metrics


def _latest_checkpoint(out_dir, prefix):
    out = Path(out_dir)
    final = out / f"{prefix}.ckpt"
    candidates = sorted(out.glob(f"{prefix}_e*.ckpt"), key=lambda p: int(p.stem.rsplit("e", 1)[1]))
    if final.exists():
        return final
    return candidates[-1] if candidates else None


# ---------------------------------------------------------------------------
# evaluation and rendering
# ---------------------------------------------------------------------------


def _predict_labels(models: Models, norm: data_mod.Scene, coords, sched, chunk=256) -> np.ndarray:
    """Argmax prediction with probabilities averaged over the eval noise draws.

    Stack corruption is part of the model input, so predictions average the
    class probabilities over several seeded noise realizations per pixel;
    noiseless stacks reduce to a single pass. Deterministic per config seed.
    """
    cfg = models.cfg
    batch_src = data_mod.extract_patches(norm, coords, cfg.patch)
    n_draws = cfg.eval_draws if any(s > 0 for s in cfg.fuse_steps) else 1
    probs_sum = np.zeros((len(coords), models.head.w2.shape[1]))
    with no_grad():
        for draw in range(n_draws):
            seeds = _coord_seeds(cfg.seed, coords, draw)
            for lo in range(0, len(coords), chunk):
                f1 = _encode_features(models, batch_src.patches1[lo:lo + chunk], "hsi",
                                      seeds[lo:lo + chunk], sched)
                f2 = _encode_features(models, batch_src.patches2[lo:lo + chunk], "lidar",
                                      seeds[lo:lo + chunk], sched)
                probs = classify(models.fuse_features(f1, f2), models.head)
                probs_sum[lo:lo + chunk] += probs.data
    return np.argmax(probs_sum, axis=-1).astype(np.int64) + 1


def _evaluate_models(models: Models, norm: data_mod.Scene, coords, sched) -> MetricsReport:
    if len(coords) == 0:
        raise ValueError("no test coordinates")
    preds = _predict_labels(models, norm, coords, sched)
    truth = norm.labels[coords[:, 0], coords[:, 1]].astype(np.int64)
    return compute_metrics(confusion_matrix(truth, preds, norm.num_classes))


def models_from_checkpoint(ckpt: Checkpoint, scene: data_mod.Scene) -> Models:
    cfg = ckpt.train_config()
    s = len(cfg.fuse_steps)
    for modality, c in (("hsi", scene.hsi.shape[2]), ("lidar", scene.lidar.shape[2])):
        want = f"enc_{modality}.stem.w"
        if want in ckpt.tensors and ckpt.tensors[want].shape[0] != c * s:
            raise ValueError(
                f"checkpoint expects {ckpt.tensors[want].shape[0]} stem channels for {modality}, "
                f"scene provides {c * s} ({c} channels x {s} fuse steps)"
            )
    models = build_models(cfg, scene.hsi.shape[2], scene.lidar.shape[2], scene.num_classes)
    models.load_state(ckpt.tensors)
    return models


def evaluate(scene: data_mod.Scene, ckpt: Checkpoint, split: data_mod.SplitIndex | None = None) -> MetricsReport:
    """Metrics of a classifier checkpoint on the scene's test split."""
    cfg = ckpt.train_config()
    norm = data_mod.normalize_bands(scene)
    if split is None:
        split = data_mod.split_samples(norm, cfg.train_fraction, cfg.seed)
    models = models_from_checkpoint(ckpt, scene)
    return _evaluate_models(models, norm, split.test_coords, cfg.schedule())


def predict_raster(scene: data_mod.Scene, ckpt: Checkpoint) -> np.ndarray:
    """Predicted class id for every pixel of the scene."""
    norm = data_mod.normalize_bands(scene)
    models = models_from_checkpoint(ckpt, scene)
    h, w = norm.labels.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)
    # patch extraction requires labeled centers; predictions ignore the labels,
    # so borrow a labeled stand-in raster for unlabeled pixels
    stand_in = norm.labels.copy()
    stand_in[stand_in == 0] = 1
    proxy = data_mod.Scene(hsi=norm.hsi, lidar=norm.lidar, labels=stand_in, name=norm.name,
                           num_classes=norm.num_classes, class_names=norm.class_names)
    preds = _predict_labels(models, proxy, coords, ckpt.train_config().schedule())
    return preds.reshape(h, w)


DEFAULT_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def render_map(predictions: np.ndarray, palette, out_path) -> None:
    """Write a PNG of the class raster; class 0 (unlabeled) renders black."""
    from PIL import Image

    predictions = np.asarray(predictions)
    k = int(predictions.max())
    if len(palette) < k:
        raise ValueError(f"palette has {len(palette)} entries, need {k}")
    lut = np.zeros((k + 1, 3), dtype=np.uint8)
    for i in range(1, k + 1):
        lut[i] = palette[i - 1]
    rgb = lut[predictions]
    Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")


def write_log_csv(path, history: dict, base_lr: float, sched_step: int, sched_gamma: float) -> None:
    import csv

    keys = [k for k in ("loss", "train_oa") if k in history and isinstance(history[k], list)]
    epochs = history.get("epoch") or list(range(len(history[keys[0]])))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr"] + keys)
        for i, epoch in enumerate(epochs):
            row = [epoch, repr(lr_at(epoch, base_lr, sched_step, sched_gamma))]
            row += [repr(history[k][i]) for k in keys]
            writer.writerow(row)
