"""
Latent diffusion: codec, noise schedule, depth adapter, latent fusion, the
semantic-conditioned DiT and the ancestral sampler.
"""
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Union

import numpy as np

from ..errors import ShapeMismatch, TOutOfRange, UntrainedModel
from ..models.config import ModelConfig
from ..numcore import array as ops
from ..numcore.array import Array, constant, no_grad
from ..numcore.nn import depth_to_space, linear, sinusoidal_embedding, space_to_depth
from ..numcore.params import ParameterStore, dense_init
from ..numcore.rng import Rng
from .attention import SemanticState, register_block, block_params, prenorm_block

if TYPE_CHECKING:
    from .model import SpatialFusionModel

LATENT_STRIDE = 8
DEPTH_SCALE = 0.1  # adapter input: meters -> roughly unit range


@dataclass
class NoiseSchedule:
    """Linear beta schedule; index t-1 holds the values of step t."""
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "NoiseSchedule":
        return cls.linear(cfg.T, cfg.beta_start, cfg.beta_end)

    @property
    def T(self) -> int:
        return len(self.betas)

    def check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size == 0 or t.min() < 1 or t.max() > self.T:
            raise TOutOfRange(f"timestep {t.tolist()} outside [1, {self.T}]")
        return t

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[self.check(t) - 1]

    def posterior_variance(self, t: int) -> float:
        """Variance of q(z_{t-1} | z_t, z_0); zero at t = 1."""
        t = int(self.check(t))
        if t == 1:
            return 0.0
        ab_t, ab_prev = self.alpha_bars[t - 1], self.alpha_bars[t - 2]
        return float(self.betas[t - 1] * (1.0 - ab_prev) / (1.0 - ab_t))


def q_sample(z0, t, eps, sched: NoiseSchedule) -> Array:
    """
    Forward noising z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.

    Args:
        z0: (B, h, w, c) clean latents
        t: One timestep, or one per batch item
        eps: Noise of z0's shape, supplied by the caller
    """
    z0 = z0 if isinstance(z0, Array) else constant(z0)
    eps = eps if isinstance(eps, Array) else constant(eps)
    if z0.shape != eps.shape:
        raise ShapeMismatch("q_sample", z0.shape, eps.shape)
    ab = np.asarray(sched.alpha_bar(t), dtype=np.float64)
    if ab.ndim == 1:
        if ab.shape[0] != z0.shape[0]:
            raise ShapeMismatch("q_sample", ab.shape, z0.shape, detail="one timestep per batch item")
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


class LatentCodec:
    """
    8x patch autoencoder standing in for a pretrained VAE.

    Fitted once on renderer output, then frozen. `shift`/`scale` normalise the
    latents to roughly unit variance and are set after fitting.
    """

    GROUP = "codec"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.cfg = cfg
        patch = LATENT_STRIDE * LATENT_STRIDE * 3
        hid, c = cfg.codec_hidden, cfg.c_latent
        g = self.GROUP
        self.enc_w1 = store.add(g, "enc_w1", dense_init(rng.child("enc_w1"), patch, hid))
        self.enc_b1 = store.add(g, "enc_b1", np.zeros(hid))
        self.enc_w2 = store.add(g, "enc_w2", dense_init(rng.child("enc_w2"), hid, c))
        self.enc_b2 = store.add(g, "enc_b2", np.zeros(c))
        self.dec_w1 = store.add(g, "dec_w1", dense_init(rng.child("dec_w1"), c, hid))
        self.dec_b1 = store.add(g, "dec_b1", np.zeros(hid))
        self.dec_w2 = store.add(g, "dec_w2", dense_init(rng.child("dec_w2"), hid, patch))
        self.dec_b2 = store.add(g, "dec_b2", np.full(patch, 0.5))
        self.shift = store.add(g, "shift", np.zeros(c))
        self.scale = store.add(g, "scale", np.ones(c))

    def _check_image(self, images) -> Array:
        images = images if isinstance(images, Array) else constant(np.asarray(images))
        if images.ndim != 4 or images.shape[1:] != (self.cfg.H, self.cfg.W, 3):
            raise ShapeMismatch("latent_encode", images.shape, (images.shape[0], self.cfg.H, self.cfg.W, 3))
        return images

    def encode_raw(self, images) -> Array:
        x = space_to_depth(self._check_image(images), LATENT_STRIDE)
        return linear(ops.gelu(linear(x, self.enc_w1, self.enc_b1)), self.enc_w2, self.enc_b2)

    def decode_raw(self, z: Array) -> Array:
        x = linear(ops.gelu(linear(z, self.dec_w1, self.dec_b1)), self.dec_w2, self.dec_b2)
        return depth_to_space(x, LATENT_STRIDE)

    def encode(self, images) -> Array:
        """(B, H, W, 3) -> (B, H/8, W/8, c_latent), normalised."""
        return (self.encode_raw(images) - self.shift) / self.scale

    def decode(self, z) -> Array:
        z = z if isinstance(z, Array) else constant(z)
        expected = (self.cfg.h, self.cfg.w, self.cfg.c_latent)
        if z.ndim != 4 or z.shape[1:] != expected:
            raise ShapeMismatch("latent_decode", z.shape, (z.shape[0], *expected))
        return self.decode_raw(z * self.scale + self.shift)

    def reconstruction_loss(self, images: np.ndarray) -> Array:
        recon = self.decode_raw(self.encode_raw(images))
        diff = recon - images
        return ops.mean(diff * diff)

    def set_normalisation(self, latents: np.ndarray) -> None:
        flat = latents.reshape(-1, latents.shape[-1]).astype(np.float64)
        self.shift.data = flat.mean(axis=0).astype(np.float32)
        self.scale.data = np.maximum(flat.std(axis=0), 1e-3).astype(np.float32)


class DepthAdapter:
    """
    E_phi: three stride-2 stages (space-to-depth + linear) from (B, H, W) depth to
    (B, H/8, W/8, c_latent). The final stage starts at zero.
    """

    GROUP = "adapter"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.cfg = cfg
        ch, c = cfg.adapter_channels, cfg.c_latent
        g = self.GROUP
        self.w1 = store.add(g, "w1", dense_init(rng.child("w1"), 4, ch))
        self.b1 = store.add(g, "b1", np.zeros(ch))
        self.w2 = store.add(g, "w2", dense_init(rng.child("w2"), 4 * ch, ch))
        self.b2 = store.add(g, "b2", np.zeros(ch))
        self.w3 = store.add(g, "w3", np.zeros((4 * ch, c)))
        self.b3 = store.add(g, "b3", np.zeros(c))
        self.calls = 0

    def __call__(self, depth) -> Array:
        depth = depth if isinstance(depth, Array) else constant(depth)
        if depth.ndim == 2:
            depth = ops.reshape(depth, (1, *depth.shape))
        if depth.ndim != 3 or depth.shape[1:] != (self.cfg.H, self.cfg.W):
            raise ShapeMismatch("depth_adapter", depth.shape, (depth.shape[0], self.cfg.H, self.cfg.W))
        self.calls += 1
        x = ops.reshape(depth * DEPTH_SCALE, (*depth.shape, 1))
        x = ops.gelu(linear(space_to_depth(x, 2), self.w1, self.b1))
        x = ops.gelu(linear(space_to_depth(x, 2), self.w2, self.b2))
        return linear(space_to_depth(x, 2), self.w3, self.b3)


class FusionProjection:
    """Re-projection of concatenated [z_t, F_depth] channels back to c_latent, starting at [I; 0]."""

    GROUP = "fusion"

    def __init__(self, cfg: ModelConfig, store: ParameterStore):
        c = cfg.c_latent
        self.w = store.add(self.GROUP, "w", np.concatenate([np.eye(c), np.zeros((c, c))], axis=0))
        self.b = store.add(self.GROUP, "b", np.zeros(c))


def fuse_latent(
    z_t: Array,
    f_depth: Optional[Array],
    mode: str,
    fusion: Optional[FusionProjection] = None,
) -> Array:
    """
    Inject depth features into the noisy latent.

    Args:
        z_t: (B, h, w, c) noisy latent
        f_depth: Adapter output; ignored when mode is "none"
        mode: "add" (element-wise sum), "concat" (channel concat + re-projection) or "none"
        fusion: Re-projection weights, required for "concat"
    """
    if mode == "none":
        return z_t
    if f_depth is None:
        raise ShapeMismatch("fuse_latent", z_t.shape, (), detail=f"mode '{mode}' needs depth features")
    if mode == "add":
        if z_t.shape != f_depth.shape:
            raise ShapeMismatch("fuse_latent", z_t.shape, f_depth.shape)
        return z_t + f_depth
    if mode == "concat":
        if z_t.shape[:-1] != f_depth.shape[:-1]:
            raise ShapeMismatch("fuse_latent", z_t.shape, f_depth.shape, detail="spatial extents differ")
        if fusion is None:
            raise ValueError("concat fusion needs a FusionProjection")
        return linear(ops.concat([z_t, f_depth], axis=-1), fusion.w, fusion.b)
    raise ValueError(f"unknown inject mode '{mode}'")


class DiT:
    """Latent tokens and projected semantic tokens in one sequence, full self-attention."""

    GROUP = "dit"

    def __init__(self, cfg: ModelConfig, store: ParameterStore, rng: Rng):
        self.cfg = cfg
        self.store = store
        d, c = cfg.d_dit, cfg.c_latent
        g = self.GROUP
        self.w_in = store.add(g, "w_in", dense_init(rng.child("w_in"), c, d))
        self.b_in = store.add(g, "b_in", np.zeros(d))
        self.pos = store.add(g, "pos", rng.child("pos").normal((cfg.h * cfg.w, d), scale=0.1))
        self.w_t1 = store.add(g, "w_t1", dense_init(rng.child("w_t1"), d, d))
        self.b_t1 = store.add(g, "b_t1", np.zeros(d))
        self.w_t2 = store.add(g, "w_t2", dense_init(rng.child("w_t2"), d, d))
        self.b_t2 = store.add(g, "b_t2", np.zeros(d))
        self.w_sem = store.add(g, "w_sem", dense_init(rng.child("w_sem"), cfg.d_model, d))
        self.b_sem = store.add(g, "b_sem", np.zeros(d))
        for k in range(1, cfg.n_dit_blocks + 1):
            register_block(store, g, f"b{k}", d, cfg.ffn_mult * d, rng.child(f"b{k}"), qkv_bias=True)
        self.lnf_g = store.add(g, "lnf_g", np.ones(d))
        self.lnf_b = store.add(g, "lnf_b", np.zeros(d))
        self.w_out = store.add(g, "w_out", dense_init(rng.child("w_out"), d, c))
        self.b_out = store.add(g, "b_out", np.zeros(c))

    def time_embedding(self, t: np.ndarray) -> Array:
        emb = constant(sinusoidal_embedding(t, self.cfg.d_dit))
        return linear(ops.gelu(linear(emb, self.w_t1, self.b_t1)), self.w_t2, self.b_t2)

    def __call__(self, z_hat: Array, t, sem_final: SemanticState) -> Array:
        """
        Predict the noise in z_hat.

        Args:
            z_hat: (B, h, w, c) fused noisy latent
            t: One timestep or one per batch item
            sem_final: Final semantic state H_sem^(M), hidden (B, S, d_model)

        Returns:
            (B, h, w, c) noise prediction at the latent positions
        """
        cfg = self.cfg
        expected = (cfg.h, cfg.w, cfg.c_latent)
        if z_hat.ndim != 4 or z_hat.shape[1:] != expected:
            raise ShapeMismatch("dit_forward", z_hat.shape, (z_hat.shape[0], *expected))
        b = z_hat.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (b,))
        if t.min() < 1 or t.max() > cfg.T:
            raise TOutOfRange(f"timestep {t.tolist()} outside [1, {cfg.T}]")
        sem = sem_final.hidden
        if sem.ndim != 3 or sem.shape[0] != b:
            raise ShapeMismatch("dit_forward", sem.shape, (b, -1, cfg.d_model), detail="semantic batch")
        n_lat = cfg.h * cfg.w
        lat = linear(ops.reshape(z_hat, (b, n_lat, cfg.c_latent)), self.w_in, self.b_in) + self.pos
        lat = lat + ops.reshape(self.time_embedding(t), (b, 1, cfg.d_dit))
        sem_tokens = linear(sem, self.w_sem, self.b_sem)
        x = ops.concat([sem_tokens, lat], axis=1)
        d_head = cfg.d_dit // cfg.n_heads
        for k in range(1, cfg.n_dit_blocks + 1):
            x, _, _ = prenorm_block(x, block_params(self.store, self.GROUP, f"b{k}"), cfg.n_heads, d_head)
        s = sem_tokens.shape[1]
        x = ops.slice_(x, (slice(None), slice(s, s + n_lat)))
        x = linear(ops.layer_norm(x, self.lnf_g, self.lnf_b), self.w_out, self.b_out)
        return ops.reshape(x, (b, cfg.h, cfg.w, cfg.c_latent))


def diffusion_loss(eps_pred: Array, eps: Union[Array, np.ndarray]) -> Array:
    """Mean squared error over every element."""
    eps = eps if isinstance(eps, Array) else constant(eps)
    if eps_pred.shape != eps.shape:
        raise ShapeMismatch("diffusion_loss", eps_pred.shape, eps.shape)
    diff = eps_pred - eps
    return ops.mean(diff * diff)


def ancestral_step(z_t: np.ndarray, eps_pred: np.ndarray, t: int, sched: NoiseSchedule,
                   noise: Optional[np.ndarray]) -> np.ndarray:
    """One reverse step z_t -> z_{t-1}; `noise` is unused at t = 1."""
    beta = sched.betas[t - 1]
    alpha = sched.alphas[t - 1]
    ab = sched.alpha_bars[t - 1]
    mean = (z_t.astype(np.float64) - beta / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(alpha)
    if t > 1 and noise is not None:
        mean = mean + np.sqrt(sched.posterior_variance(t)) * noise
    return mean.astype(np.float32)


@dataclass
class SampleResult:
    images: np.ndarray  # (B, H, W, 3) in [0, 1]
    depths: np.ndarray  # (B, H, W) meters
    steps: int


def sample(
    model: "SpatialFusionModel",
    prompts: np.ndarray,
    rng: Rng,
    source_images: Optional[np.ndarray] = None,
    depth_override: Optional[np.ndarray] = None,
) -> SampleResult:
    """
    Generate images for a batch of padded prompts.

    Semantics run once, D is derived once and F_depth is computed once; every
    one of the T ancestral steps fuses F_depth into the current latent.

    Args:
        model: A trained model
        prompts: (B, S) token ids
        rng: Noise stream; equal streams give bit-identical samples
        source_images: Optional (B, H, W, 3) edit sources
        depth_override: Optional (B, H, W) depth used in place of the derived one

    Raises:
        UntrainedModel: The model holds no trained parameters
    """
    if not model.trained:
        raise UntrainedModel("sampling needs a trained model; load a checkpoint first")
    cfg = model.cfg
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    b = prompts.shape[0]
    with no_grad():
        sem_states = model.semantic.forward(prompts)
        depth = model.derive_depth(sem_states, source_images)
        guide = depth if depth_override is None else constant(np.asarray(depth_override, dtype=np.float32))
        f_depth = model.adapter(guide) if cfg.inject_mode != "none" else None
        z = rng.normal((b, cfg.h, cfg.w, cfg.c_latent))
        steps = 0
        for t in range(model.schedule.T, 0, -1):
            z_hat = fuse_latent(constant(z), f_depth, cfg.inject_mode, model.fusion)
            eps_pred = model.dit(z_hat, t, sem_states[-1])
            noise = rng.normal(z.shape) if t > 1 else None
            z = ancestral_step(z, eps_pred.data, t, model.schedule, noise)
            steps += 1
        images = model.codec.decode(constant(z)).data
    return SampleResult(images=np.clip(images, 0.0, 1.0).astype(np.float32), depths=depth.data.copy(), steps=steps)
