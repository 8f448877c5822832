"""Three-stage adaptation pipeline.

Stage 1 pretrains a conditional source-domain noise predictor and an
unconditional target-domain one. Stage 2 deterministically inverts source
images into partially noised latents and decodes them with the target
model, pairing the synthesized images with source masks to train a target
segmenter. Stage 3 alternates: segmenter pseudo-labels condition the
generator, and freshly synthesized labeled images retrain the segmenter.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import diffusion, losses, metrics
from .losses import Optimizer, TrainingError, VesselWeightConfig, segmentation_loss
from .ndtensor import Tensor, backward
from .nets import Denoiser, Segmenter, conditionalize
from .schedule import NoiseSchedule, ddim_subsequence, linear_schedule

__all__ = [
    "PipelineConfig",
    "PipelineState",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointDigestError",
    "pretrain_source",
    "pretrain_target",
    "mine_latents",
    "synthesize_target",
    "train_segmenter",
    "cooptimize",
    "save_checkpoint",
    "load_checkpoint",
    "evaluate_segmenter",
]

CHECKPOINT_MAGIC = b"VDCK"
CHECKPOINT_VERSION = 1


@dataclass
class PipelineConfig:
    """Desk-scale defaults; full-scale reference values are T=1000, S=50, t0=15, K=6."""

    T: int = 200
    ddim_steps: int = 20
    t0: int = 6
    K: int = 3
    lr_gen: float = 2e-3
    lr_seg: float = 1e-3
    batch_size: int = 8
    epochs_pretrain: int = 60
    epochs_pretrain_target: int = 150
    epochs_seg: int = 40
    epochs_gen_finetune: int = 12
    epochs_seg_finetune: int = 20
    pseudo_threshold: float = 0.5
    heldout_fraction: float = 0.2
    stochastic_synthesis: bool = True
    vessel_lambda: float = 1.0
    vessel_dilation: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.t0 <= self.ddim_steps <= self.T):
            raise ValueError(
                f"need t0 <= ddim_steps <= T, got {self.t0}, {self.ddim_steps}, {self.T}")
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.lr_gen <= 0 or self.lr_seg <= 0:
            raise ValueError("learning rates must be positive")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T)

    def subsequence(self):
        return ddim_subsequence(self.T, self.ddim_steps)


@dataclass
class PipelineState:
    """Checkpointable snapshot: models, iteration index, metric history."""

    config: PipelineConfig
    stage: str = "init"
    iteration: int = 0
    eps_a: Optional[Denoiser] = None
    eps_b: Optional[Denoiser] = None
    segmenter: Optional[Segmenter] = None
    history: List[dict] = field(default_factory=list)


# -- normalization ------------------------------------------------------------

def to_model_space(img: np.ndarray) -> np.ndarray:
    """Map [0,1] images to the [-1,1] range the diffusion models train in."""
    return img * 2.0 - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def _as_batch(images: np.ndarray) -> np.ndarray:
    """[K,H,W] -> [K,1,H,W]."""
    if images.ndim == 3:
        return images[:, None]
    return images


# -- stage 1: pretraining -----------------------------------------------------

def _diffusion_epoch(net: Denoiser, images: np.ndarray, masks: Optional[np.ndarray],
                     sched: NoiseSchedule, opt: Optimizer, rng: np.random.Generator,
                     batch_size: int,
                     vw: Optional[VesselWeightConfig] = None) -> float:
    """One pass over the data; returns the mean batch loss."""
    n = images.shape[0]
    order = rng.permutation(n)
    total, nb = 0.0, 0
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        x0 = images[idx]
        cond = masks[idx] if masks is not None else None
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(x0.shape)
        x_t = diffusion.forward_marginal(x0, t, eps, sched)
        try:
            pred = net.forward(x_t, t, cond)
            if vw is not None and cond is not None:
                loss = losses.vessel_weighted_noise_loss(eps, pred, cond, vw)
            else:
                loss = losses.noise_loss(eps, pred)
        except FloatingPointError as e:
            raise TrainingError(
                f"non-finite value in diffusion step {opt.step_count}: {e}") from e
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise TrainingError(f"non-finite diffusion loss at step {opt.step_count}")
        opt.zero_grad()
        backward(loss)
        opt.step()
        total += lv
        nb += 1
    return total / max(nb, 1)


def eval_noise_loss(net: Denoiser, images: np.ndarray, masks: Optional[np.ndarray],
                    sched: NoiseSchedule, seed: int = 1234) -> float:
    """Noise-prediction loss on a fixed (t, eps) draw, for before/after checks."""
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(images.shape)
    x_t = diffusion.forward_marginal(images, t, eps, sched)
    pred = net.predict(x_t, t, masks)
    return float(np.mean((pred - eps) ** 2))


def pretrain_source(cfg: PipelineConfig, images_a: np.ndarray,
                    masks_a: np.ndarray, epochs: Optional[int] = None,
                    log: Optional[list] = None) -> Denoiser:
    """Train the conditional source-domain noise predictor."""
    images_a = _as_batch(to_model_space(images_a))
    masks_a = _as_batch(masks_a)
    sched = cfg.schedule()
    net = Denoiser(conditional=True, seed=cfg.seed + 1)
    opt = Optimizer(net.params, kind="adamw", learning_rate=cfg.lr_gen)
    rng = np.random.default_rng(cfg.seed + 101)
    for _ in range(cfg.epochs_pretrain if epochs is None else epochs):
        mean_loss = _diffusion_epoch(net, images_a, masks_a, sched, opt, rng,
                                     cfg.batch_size)
        if log is not None:
            log.append(mean_loss)
    return net


def pretrain_target(cfg: PipelineConfig, images_b: np.ndarray,
                    epochs: Optional[int] = None,
                    log: Optional[list] = None) -> Denoiser:
    """Train the unconditional target-domain noise predictor."""
    images_b = _as_batch(to_model_space(images_b))
    sched = cfg.schedule()
    net = Denoiser(conditional=False, seed=cfg.seed + 2)
    opt = Optimizer(net.params, kind="adamw", learning_rate=cfg.lr_gen)
    rng = np.random.default_rng(cfg.seed + 102)
    for _ in range(cfg.epochs_pretrain_target if epochs is None else epochs):
        mean_loss = _diffusion_epoch(net, images_b, None, sched, opt, rng,
                                     cfg.batch_size)
        if log is not None:
            log.append(mean_loss)
    return net


# -- stage 2: latent mining and synthesis -------------------------------------

def mine_latents(eps_a: Denoiser, images_a: np.ndarray, masks_a: np.ndarray,
                 cfg: PipelineConfig) -> np.ndarray:
    """Deterministically noise source images through the first t0 subsequence steps.

    Input images are in [0,1]; the returned latents live in model space.
    """
    if not eps_a.conditional:
        raise losses.TrainingError("mine_latents requires the conditional source model")
    sched = cfg.schedule()
    taus = cfg.subsequence().steps
    x = _as_batch(to_model_space(images_a))
    cond = _as_batch(masks_a)
    t_cur = 0
    for i in range(cfg.t0):
        t_next = taus[i]
        eps_hat = eps_a.predict(x, max(t_cur, 1), cond)
        x = diffusion.ddim_invert_step(x, t_cur, t_next, eps_hat, sched)
        t_cur = t_next
    return x


def synthesize_target(eps_b: Denoiser, latent: np.ndarray, cfg: PipelineConfig,
                      condition: Optional[np.ndarray] = None,
                      start_pos: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Decode latents at subsequence position start_pos down to clean images.

    Unconditional at Iter-0 (latent path, start_pos = t0); conditional from
    pure noise at the full subsequence depth in later iterations. Returns
    images in [0,1].
    """
    sched = cfg.schedule()
    taus = cfg.subsequence().steps
    pos = cfg.t0 if start_pos is None else start_pos
    if not (0 <= pos <= len(taus)):
        raise losses.TrainingError(
            f"start position {pos} outside subsequence of length {len(taus)}")
    cond = _as_batch(condition) if condition is not None else None
    x = latent
    if cfg.stochastic_synthesis and pos > 0:
        if rng is None:
            rng = np.random.default_rng(cfg.seed + 404)
        for t in range(taus[pos - 1], 0, -1):
            eps_hat = eps_b.predict(x, t, cond)
            noise = rng.standard_normal(x.shape)
            x = diffusion.ddpm_sample_step(x, t, eps_hat, noise, sched)
    else:
        for i in range(pos, 0, -1):
            t_from = taus[i - 1]
            t_to = taus[i - 2] if i >= 2 else 0
            eps_hat = eps_b.predict(x, t_from, cond)
            x = diffusion.ddim_reverse_step(x, t_from, t_to, eps_hat, sched)
    return from_model_space(x)


def synthesize_from_noise(eps_b: Denoiser, condition: np.ndarray,
                          cfg: PipelineConfig, seed: int) -> np.ndarray:
    """Conditional synthesis from pure noise through the full subsequence.

    Always walks the deterministic DDIM subsequence; the stochastic flag
    only covers the Iter-0 latent-decode ambiguity.
    """
    rng = np.random.default_rng(seed)
    shape = _as_batch(condition).shape
    latent = rng.standard_normal(shape)
    cfg_det = dataclasses.replace(cfg, stochastic_synthesis=False)
    return synthesize_target(eps_b, latent, cfg_det, condition=condition,
                             start_pos=cfg.ddim_steps, rng=rng)


# -- segmentation training ----------------------------------------------------

def train_segmenter(seg: Segmenter, images: np.ndarray, masks: np.ndarray,
                    cfg: PipelineConfig, epochs: Optional[int] = None,
                    log: Optional[list] = None) -> Segmenter:
    """Dice + cross-entropy training with Adam; warm-starts from the given model."""
    if images.shape[0] == 0:
        raise ValueError("train_segmenter needs a nonempty pair set")
    x = _as_batch(images)
    y = _as_batch(masks)
    opt = Optimizer(seg.params, kind="adam", learning_rate=cfg.lr_seg)
    rng = np.random.default_rng(cfg.seed + 103)
    n = x.shape[0]
    for _ in range(cfg.epochs_seg if epochs is None else epochs):
        order = rng.permutation(n)
        total, nb = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                logits = seg.forward(x[idx])
                loss = segmentation_loss(logits, Tensor(y[idx]))
            except FloatingPointError as e:
                raise TrainingError(
                    f"non-finite value in segmentation step {opt.step_count}: {e}") from e
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingError(f"non-finite segmentation loss at step {opt.step_count}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += lv
            nb += 1
        if log is not None:
            log.append(total / max(nb, 1))
    return seg


def finetune_generator(eps_b: Denoiser, images_b: np.ndarray,
                       pseudo_masks: np.ndarray, cfg: PipelineConfig,
                       epochs: Optional[int] = None) -> Denoiser:
    """Fine-tune the conditional target generator on pseudo-labeled pairs."""
    if not eps_b.conditional:
        raise losses.TrainingError("finetune_generator requires a conditional model")
    x = _as_batch(to_model_space(images_b))
    y = _as_batch(pseudo_masks)
    sched = cfg.schedule()
    opt = Optimizer(eps_b.params, kind="adamw", learning_rate=cfg.lr_gen)
    rng = np.random.default_rng(cfg.seed + 104)
    vw = VesselWeightConfig(lam=cfg.vessel_lambda, dilation_radius=cfg.vessel_dilation)
    for _ in range(cfg.epochs_gen_finetune if epochs is None else epochs):
        _diffusion_epoch(eps_b, x, y, sched, opt, rng, cfg.batch_size, vw=vw)
    return eps_b


# -- evaluation ---------------------------------------------------------------

def evaluate_segmenter(seg: Segmenter, images: np.ndarray,
                       masks: np.ndarray,
                       threshold: float = 0.5) -> metrics.SegmentationScores:
    """Mean per-sample scores of a segmenter on labeled images."""
    x = _as_batch(images)
    scores = []
    for i in range(x.shape[0]):
        probs = seg.predict_probs(x[i:i + 1])[0, 0]
        scores.append(metrics.score_pair(probs, masks[i], threshold))
    return metrics.SegmentationScores(
        dsc=float(np.mean([s.dsc for s in scores])),
        auc=float(np.mean([s.auc for s in scores])),
        acc=float(np.mean([s.acc for s in scores])),
        ahd=float(np.mean([s.ahd for s in scores])),
    )


def mean_hist_distance(images_x: np.ndarray, images_y: np.ndarray):
    """Distances between the pooled intensity histograms of two image sets."""
    hx = metrics.histogram(np.concatenate([i.ravel() for i in images_x]))
    hy = metrics.histogram(np.concatenate([i.ravel() for i in images_y]))
    return metrics.hist_distance(hx, hy)


# -- stage 3: co-optimization -------------------------------------------------

def cooptimize(eps_b0: Denoiser, seg0: Segmenter, images_a: np.ndarray,
               masks_a: np.ndarray, images_b: np.ndarray,
               cfg: PipelineConfig,
               heldout_images_b: Optional[np.ndarray] = None,
               heldout_masks_b: Optional[np.ndarray] = None,
               on_iteration=None) -> Tuple[Denoiser, Segmenter, List[dict]]:
    """Alternate generator and segmenter refinement for K iterations.

    Returns the final models and a per-iteration history of held-out scores
    and generated-vs-real histogram distances.
    """
    history: List[dict] = []
    eps_b = eps_b0
    seg = seg0
    for k in range(cfg.K):
        try:
            # (a) pseudo-label the target images
            pseudo = []
            for i in range(images_b.shape[0]):
                probs = seg.predict_probs(_as_batch(images_b)[i:i + 1])[0, 0]
                pseudo.append((probs >= cfg.pseudo_threshold).astype(np.float64))
            pseudo = np.stack(pseudo)
            # (b) fine-tune the generator, converting it to conditional at k=0
            if not eps_b.conditional:
                eps_b = conditionalize(eps_b)
            eps_b = finetune_generator(eps_b, images_b, pseudo, cfg)
            # (c) synthesize labeled target-style images from source masks
            synth = synthesize_from_noise(eps_b, masks_a, cfg,
                                          seed=cfg.seed + 1000 + k)[:, 0]
            # (d) refine the segmenter on the synthesized pairs
            seg = train_segmenter(seg, synth, masks_a, cfg,
                                  epochs=cfg.epochs_seg_finetune)
        except (TrainingError, FloatingPointError) as e:
            raise TrainingError(f"iteration {k}: {e}") from e

        row = {"iteration": k + 1}
        if heldout_images_b is not None and heldout_masks_b is not None:
            s = evaluate_segmenter(seg, heldout_images_b, heldout_masks_b,
                                   cfg.pseudo_threshold)
            row.update(dsc=s.dsc, auc=s.auc, acc=s.acc, ahd=s.ahd)
        eu, co = mean_hist_distance(synth, images_b)
        row.update(hist_euclidean=eu, hist_cosine=co)
        history.append(row)
        if on_iteration is not None:
            on_iteration(k, eps_b, seg, synth, row)
    return eps_b, seg, history


# -- checkpointing ------------------------------------------------------------

class CheckpointError(RuntimeError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


def _digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def _model_entries(state: PipelineState):
    entries = []
    if state.eps_a is not None:
        entries.append(("eps_a", state.eps_a))
    if state.eps_b is not None:
        entries.append(("eps_b", state.eps_b))
    if state.segmenter is not None:
        entries.append(("segmenter", state.segmenter))
    return entries


def save_checkpoint(state: PipelineState, path: str) -> None:
    """Write a JSON header plus little-endian float64 parameter blob."""
    manifest = []
    chunks = []
    offset = 0
    for model_name, model in _model_entries(state):
        for pname in sorted(model.params):
            arr = model.params[pname].data
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            manifest.append({
                "name": f"{model_name}/{pname}",
                "shape": list(arr.shape),
                "offset": offset,
            })
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    sched = state.config.schedule()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "iteration": state.iteration,
        "config": dataclasses.asdict(state.config),
        "schedule": {"T": sched.T, "beta": sched.beta.tolist()},
        "models": {name: {"in_channels": m.in_channels,
                          "with_time": m.with_time}
                   for name, m in _model_entries(state)},
        "history": state.history,
        "params": manifest,
        "blob_bytes": len(blob),
        "digest": _digest(blob),
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)


def load_checkpoint(path: str) -> PipelineState:
    """Inverse of save_checkpoint; validates version, length and digest."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointTruncatedError(f"'{path}' is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + hlen:
        raise CheckpointTruncatedError(f"'{path}' header truncated")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointTruncatedError(f"'{path}' header unreadable: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"'{path}' has format version {header.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}")
    blob = raw[12 + hlen:]
    if len(blob) != header["blob_bytes"]:
        raise CheckpointTruncatedError(
            f"'{path}' blob truncated: {len(blob)} of {header['blob_bytes']} bytes")
    if _digest(blob) != header["digest"]:
        raise CheckpointDigestError(f"'{path}' parameter blob digest mismatch")

    cfg = PipelineConfig(**header["config"])
    state = PipelineState(config=cfg, stage=header["stage"],
                          iteration=header["iteration"],
                          history=header["history"])
    arrays: Dict[str, Dict[str, np.ndarray]] = {}
    for entry in header["params"]:
        model_name, pname = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=start).reshape(shape).copy()
        arrays.setdefault(model_name, {})[pname] = arr
    for model_name, meta in header["models"].items():
        if model_name == "segmenter":
            model = Segmenter(seed=0)
        else:
            model = Denoiser(conditional=meta["in_channels"] == 2, seed=0)
        model.load_state_arrays(arrays[model_name])
        setattr(state, {"eps_a": "eps_a", "eps_b": "eps_b",
                        "segmenter": "segmenter"}[model_name], model)
    return state
