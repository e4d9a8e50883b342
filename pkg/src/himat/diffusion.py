"""Flow-matching training and Euler sampling over map stacks.

The backbone is a stack of DiT blocks operating on one token per latent
pixel, per map: linear attention runs over the N = H*W tokens of each
map independently (maps ride in the batch axes), and the CrossStitch
stage is the only place information crosses maps. Conditioning (time +
prompt/instruction id) enters through per-block adaptive modulation.

Every block's modulation head, the CrossStitch parameters and the final
projection start at zero, so a freshly built model is the zero velocity
field and training moves away from a quiet start.

Latent stacks are [B, M, H, W, C]; single-stack convenience wrappers
add the batch axis. The noise path z_t = alpha(t) z0 + sigma(t) eps and
the velocity target eps - z0 follow the rectified-flow convention
alpha = 1 - t, sigma = t, under which the target is the exact constant
velocity of the straight path and one Euler step of an exact model
recovers z0 from eps.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import himat
from himat import tensor as T
from himat.attention import LINEAR, AttentionParams, linear_attention
from himat.crossstitch import CrossStitchParams, crossstitch_forward, crossstitch_init
from himat.errors import NaNLoss, NonFiniteValue, ShapeMismatch, TOutOfRange
from himat.himt import read_himt, write_himt
from himat.tensor import Tensor
from himat.wavelet import SubbandWeights, dwt_loss, load_basis, swt_loss


# -- schedule -----------------------------------------------------------------

@dataclass
class Schedule:
    """Noise mix coefficients on t in [0, 1]; alpha(0)=1, sigma(1)=1."""

    alpha: callable
    sigma: callable
    name: str = "rectified_flow"


def rectified_flow():
    return Schedule(alpha=lambda t: 1.0 - t, sigma=lambda t: t, name="rectified_flow")


def _t_values(t, schedule, batch):
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if tv.size == 1 and batch > 1:
        tv = np.repeat(tv, batch)
    if tv.min() < 0.0 or tv.max() > 1.0:
        raise TOutOfRange(f"t must lie in [0, 1], got range [{tv.min()}, {tv.max()}]")
    alpha = np.array([schedule.alpha(x) for x in tv])
    sigma = np.array([schedule.sigma(x) for x in tv])
    return tv, alpha, sigma


def add_noise(z0, t, eps, schedule):
    """z_t = alpha(t) * z0 + sigma(t) * eps (exact affine mix).

    t may be a scalar or one value per batch element.
    """
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
    batched = z0.ndim == 5
    batch = z0.shape[0] if batched else 1
    _, alpha, sigma = _t_values(t, schedule, batch)
    bshape = (batch,) + (1,) * (z0.ndim - 1) if batched else (1,) * z0.ndim
    a = Tensor(alpha.reshape(bshape).astype(z0.dtype))
    s = Tensor(sigma.reshape(bshape).astype(z0.dtype))
    return T.add(T.mul(z0, a), T.mul(eps, s))


def velocity_target(z0, eps):
    """The flow-matching regression target eps - z0."""
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
    return T.sub(eps, z0)


def roll_latent(z, dy, dx):
    """Circular shift of the spatial axes, same shift for all maps/channels."""
    if isinstance(z, Tensor):
        return T.roll(z, (int(dy), int(dx)), (-3, -2))
    return np.roll(np.asarray(z), (int(dy), int(dx)), (-3, -2))


# -- model ---------------------------------------------------------------------

@dataclass
class ModelConfig:
    n_blocks: int = 4
    channels: int = 32
    maps: int = 3
    latent_h: int = 16
    latent_w: int = 16
    cond_vocab: int = 8
    steps: int = 20
    cond_channels: int = 0  # widened input for concat conditioning
    pos_embed: bool = False  # off => exactly shift equivariant
    emb_dim: int = 64
    dtype: str = "float64"

    # reference scale of the published system, for orientation only;
    # never trained here: n_blocks=20 at C=32, latents from a 32x codec.

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def validate(self):
        for name in ("n_blocks", "channels", "maps", "latent_h", "latent_w", "cond_vocab", "steps", "emb_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be positive")
        if self.cond_channels not in (0, self.channels):
            raise ValueError("cond_channels must be 0 or equal to channels")


@dataclass
class DiTBlockParams:
    ln1_scale: Tensor
    ln1_shift: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    attn: AttentionParams
    cs: CrossStitchParams
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    w_mod: Tensor  # [emb_dim, 6C] -> shift/scale/gate x 2, zero-initialized
    b_mod: Tensor

    def named(self, prefix):
        out = {
            f"{prefix}.ln1_scale": self.ln1_scale,
            f"{prefix}.ln1_shift": self.ln1_shift,
            f"{prefix}.ln2_scale": self.ln2_scale,
            f"{prefix}.ln2_shift": self.ln2_shift,
            f"{prefix}.w_ff1": self.w_ff1,
            f"{prefix}.b_ff1": self.b_ff1,
            f"{prefix}.w_ff2": self.w_ff2,
            f"{prefix}.b_ff2": self.b_ff2,
            f"{prefix}.w_mod": self.w_mod,
            f"{prefix}.b_mod": self.b_mod,
            f"{prefix}.attn.w_q": self.attn.w_q,
            f"{prefix}.attn.w_k": self.attn.w_k,
            f"{prefix}.attn.w_v": self.attn.w_v,
            f"{prefix}.attn.w_o": self.attn.w_o,
        }
        for attr in ("depthwise", "pointwise", "pooled", "bias_depthwise", "bias_pointwise", "bias_pooled"):
            out[f"{prefix}.cs.{attr}"] = getattr(self.cs, attr)
        return out


def _param(rng, shape, scale, dtype):
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_block(cfg, rng):
    c, d = cfg.channels, cfg.emb_dim
    dt = cfg.np_dtype()
    return DiTBlockParams(
        ln1_scale=_ones((c,), dt),
        ln1_shift=_zeros((c,), dt),
        ln2_scale=_ones((c,), dt),
        ln2_shift=_zeros((c,), dt),
        attn=AttentionParams.init(c, rng, variant=LINEAR, dtype=dt),
        cs=crossstitch_init(cfg.maps, c, dtype=dt),
        w_ff1=_param(rng, (c, 4 * c), 1.0 / math.sqrt(c), dt),
        b_ff1=_zeros((4 * c,), dt),
        w_ff2=_param(rng, (4 * c, c), 1.0 / math.sqrt(4 * c), dt),
        b_ff2=_zeros((c,), dt),
        w_mod=_zeros((d, 6 * c), dt),
        b_mod=_zeros((6 * c,), dt),
    )


@dataclass
class ModelParams:
    w_time: Tensor
    b_time: Tensor
    cond_table: Tensor
    w_in: Tensor
    b_in: Tensor
    blocks: list
    w_modf: Tensor  # final-layer conditioning -> (shift, scale)
    b_modf: Tensor
    w_head: Tensor
    b_head: Tensor
    pos_table: np.ndarray | None = None  # constant, not trained

    def named(self):
        out = {
            "w_time": self.w_time,
            "b_time": self.b_time,
            "cond_table": self.cond_table,
            "w_in": self.w_in,
            "b_in": self.b_in,
            "w_modf": self.w_modf,
            "b_modf": self.b_modf,
            "w_head": self.w_head,
            "b_head": self.b_head,
        }
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"blocks.{i}"))
        return out

    def parameters(self):
        return list(self.named().values())


SIN_DIM = 32


def time_features(t_vec, dtype=np.float64):
    """Sinusoidal features of t in [0,1] (t scaled by 1000, standard freqs)."""
    t_vec = np.atleast_1d(np.asarray(t_vec, dtype=np.float64)) * 1000.0
    half = SIN_DIM // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t_vec[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


def _pos_table(cfg):
    n = cfg.latent_h * cfg.latent_w
    c = cfg.channels
    pos = np.arange(n)
    half = max(c // 2, 1)
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = pos[:, None] * freqs[None, :]
    tab = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)[:, :c]
    return tab.reshape(1, 1, n, c).astype(cfg.np_dtype())


def build_model(cfg, seed=0):
    cfg.validate()
    rng = np.random.default_rng(seed)
    c, d = cfg.channels, cfg.emb_dim
    dt = cfg.np_dtype()
    c_in = c + cfg.cond_channels
    params = ModelParams(
        w_time=_param(rng, (SIN_DIM, d), 1.0 / math.sqrt(SIN_DIM), dt),
        b_time=_zeros((d,), dt),
        cond_table=_param(rng, (cfg.cond_vocab, d), 0.02, dt),
        w_in=_param(rng, (c_in, c), 1.0 / math.sqrt(c_in), dt),
        b_in=_zeros((c,), dt),
        blocks=[init_block(cfg, rng) for _ in range(cfg.n_blocks)],
        w_modf=_zeros((d, 2 * c), dt),
        b_modf=_zeros((2 * c,), dt),
        w_head=_zeros((c, c), dt),
        b_head=_zeros((c,), dt),
        pos_table=_pos_table(cfg) if cfg.pos_embed else None,
    )
    return VelocityModel(cfg, params)


gelu = T.gelu
_layernorm = T.layernorm


def _chunk6(mod, c):
    parts = [T.slice_axis(mod, -1, i * c, (i + 1) * c) for i in range(6)]
    return parts  # shift1, scale1, gate1, shift2, scale2, gate2


def dit_block_forward(f, t_emb, cond_emb, p):
    """One block over a stack [B, M, H, W, C].

    modulated norm -> linear attention over the H*W tokens of each map
    (no cross-map attention) with output projection, gated residual ->
    CrossStitch (residual inside) -> modulated norm -> feed-forward,
    gated residual. Shape preserved.
    """
    if f.ndim != 5:
        raise ShapeMismatch(f"expected [B, M, H, W, C], got {f.shape}")
    b, m, h, w, c = f.shape
    e = T.add(t_emb, cond_emb)
    mod = T.add(T.matmul(e, p.w_mod), p.b_mod)
    # [B, C] chunks broadcast over the [B, M, N, C] token layout
    shift1, scale1, gate1, shift2, scale2, gate2 = [
        T.reshape(t, (b, 1, 1, c)) for t in _chunk6(mod, c)
    ]

    tokens = T.reshape(f, (b, m, h * w, c))
    normed = _layernorm(tokens, p.ln1_scale, p.ln1_shift)
    normed = T.add(T.mul(normed, T.add(scale1, 1.0)), shift1)
    attn_out = linear_attention(normed, p.attn)
    tokens = T.add(tokens, T.mul(attn_out, gate1))

    f = crossstitch_forward(T.reshape(tokens, (b, m, h, w, c)), p.cs)

    tokens = T.reshape(f, (b, m, h * w, c))
    normed = _layernorm(tokens, p.ln2_scale, p.ln2_shift)
    normed = T.add(T.mul(normed, T.add(scale2, 1.0)), shift2)
    ff = T.add(T.matmul(gelu(T.add(T.matmul(normed, p.w_ff1), p.b_ff1)), p.w_ff2), p.b_ff2)
    tokens = T.add(tokens, T.mul(ff, gate2))
    return T.reshape(tokens, (b, m, h, w, c))


class VelocityModel:
    """Callable velocity field v(z_t, t, cond) -> Tensor like z_t[..., :C]."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    def parameters(self):
        return self.params.parameters()

    def __call__(self, z_t, t, cond):
        cfg, p = self.cfg, self.params
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=cfg.np_dtype()))
        if z_t.ndim == 4:
            z_t = T.reshape(z_t, (1,) + z_t.shape)
        b, m, h, w, c_in = z_t.shape
        if c_in != cfg.channels + cfg.cond_channels:
            raise ShapeMismatch(f"input has {c_in} channels, model takes {cfg.channels + cfg.cond_channels}")
        cond = np.atleast_1d(np.asarray(cond, dtype=np.int64))
        if cond.size == 1 and b > 1:
            cond = np.repeat(cond, b)
        if cond.min() < 0 or cond.max() >= cfg.cond_vocab:
            raise ValueError(f"condition id out of vocabulary (size {cfg.cond_vocab})")

        t_feat = Tensor(time_features(np.broadcast_to(np.atleast_1d(t), (b,)), cfg.np_dtype()))
        t_emb = gelu(T.add(T.matmul(t_feat, p.w_time), p.b_time))
        cond_emb = T.embedding(p.cond_table, cond)

        tokens = T.reshape(z_t, (b, m, h * w, c_in))
        tokens = T.add(T.matmul(tokens, p.w_in), p.b_in)
        if p.pos_table is not None:
            tokens = T.add(tokens, Tensor(p.pos_table))
        f = T.reshape(tokens, (b, m, h, w, cfg.channels))
        for blk in p.blocks:
            f = dit_block_forward(f, t_emb, cond_emb, blk)
        tokens = T.reshape(f, (b, m, h * w, cfg.channels))
        # final layer: conditioning-modulated affine on the raw tokens
        # (no norm here: the head must see true magnitudes so that
        # t-dependent gains can realize exact velocity fields)
        modf = T.add(T.matmul(T.add(t_emb, cond_emb), p.w_modf), p.b_modf)
        c = cfg.channels
        shift_f = T.reshape(T.slice_axis(modf, -1, 0, c), (b, 1, 1, c))
        scale_f = T.reshape(T.slice_axis(modf, -1, c, 2 * c), (b, 1, 1, c))
        tokens = T.add(T.mul(tokens, T.add(scale_f, 1.0)), shift_f)
        tokens = T.add(T.matmul(tokens, p.w_head), p.b_head)
        return T.reshape(tokens, (b, m, h, w, cfg.channels))


# -- optimizer -------------------------------------------------------------------

class Adam:
    """Adaptive-moment updates on leaf tensors (data updated in place)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- training ---------------------------------------------------------------------

@dataclass
class LossSpec:
    kind: str = "mse"  # mse | dwt | swt
    basis: str = "sym19"
    dwt_weight: float = 1.0
    swt_weights: SubbandWeights = field(default_factory=SubbandWeights)
    levels: int = 1


def compute_loss(pred, target, spec):
    if spec.kind == "mse":
        d = T.sub(pred, target)
        return T.tmean(T.mul(d, d))
    basis = load_basis(spec.basis)
    if spec.kind == "dwt":
        return dwt_loss(pred, target, spec.dwt_weight, basis, levels=spec.levels)
    if spec.kind == "swt":
        return swt_loss(pred, target, spec.swt_weights, basis, levels=spec.levels)
    raise ValueError(f"unknown loss kind {spec.kind!r}")


def train_step(batch, model, schedule, loss_spec, opt, rng):
    """One optimizer update; returns the scalar loss.

    Samples t ~ U[0,1] per element and eps ~ N(0,1), mixes z_t, regresses
    the model output onto eps - z0 under the configured loss.
    """
    z0 = np.asarray(batch["z0"], dtype=model.cfg.np_dtype())
    cond = np.asarray(batch["cond"], dtype=np.int64)
    b = z0.shape[0]
    t = rng.uniform(0.0, 1.0, size=b)
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    try:
        z_t = add_noise(Tensor(z0), t, Tensor(eps), schedule)
        target = velocity_target(Tensor(z0), Tensor(eps))
        pred = model(z_t, t, cond)
        loss = compute_loss(pred, target, loss_spec)
        value = loss.item()
        loss.backward()
        opt.step()
        opt.zero_grad()
    except NonFiniteValue as exc:
        raise NaNLoss(
            f"non-finite value during step (loss={loss_spec.kind}, batch={b}): {exc}"
        ) from exc
    if not math.isfinite(value):
        raise NaNLoss(f"loss is {value}")
    return value


# -- sampling -----------------------------------------------------------------------

def _check_boundaries(schedule):
    """Sampling starts at pure noise, so the schedule must satisfy
    alpha(0)=1, sigma(0)=0, alpha(1)=0, sigma(1)=1."""
    ok = (
        abs(schedule.alpha(0.0) - 1.0) < 1e-12
        and abs(schedule.sigma(0.0)) < 1e-12
        and abs(schedule.alpha(1.0)) < 1e-12
        and abs(schedule.sigma(1.0) - 1.0) < 1e-12
    )
    if not ok:
        raise ValueError(f"schedule {schedule.name!r} violates the boundary convention")


def sample(model, cond, steps, schedule=None, noise_rolling=False, seed=0):
    """Euler integration of the learned velocity from t=1 noise to t=0.

    z <- z - dt * v(z, t); with noise_rolling every model call sees a
    freshly rolled latent (offsets from the seeded sequence) and the
    predicted velocity is rolled back, which keeps textures tileable.
    Fixed (seed, steps, cond) gives bit-identical output.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    schedule = schedule or rectified_flow()
    _check_boundaries(schedule)
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, cfg.maps, cfg.latent_h, cfg.latent_w, cfg.channels)).astype(
        cfg.np_dtype()
    )
    dt = 1.0 / steps
    with T.no_grad():
        for k in range(steps):
            t_now = 1.0 - k * dt
            if noise_rolling:
                dy = int(rng.integers(cfg.latent_h))
                dx = int(rng.integers(cfg.latent_w))
                v = roll_latent(model(roll_latent(z, dy, dx), t_now, cond).data, -dy, -dx)
            else:
                v = model(z, t_now, cond).data
            z = z - dt * v
    return z[0]


def decompose(model, cond_latent, instruction, steps, schedule=None, seed=0):
    """Conditional sampling: the condition latent is concatenated onto the
    noisy latent channel-wise at every step; the instruction id picks the
    output quantity."""
    cfg = model.cfg
    if cfg.cond_channels != cfg.channels:
        raise ShapeMismatch("model was not built with concat conditioning")
    if not (0 <= int(instruction) < cfg.cond_vocab):
        raise ValueError(f"instruction id {instruction} out of vocabulary ({cfg.cond_vocab})")
    cond_latent = np.asarray(cond_latent, dtype=cfg.np_dtype())
    ok = (
        cond_latent.ndim == 4
        and cond_latent.shape[0] == cfg.maps
        and cond_latent.shape[3] == cfg.channels
    )
    # without positional embeddings the model is size-agnostic
    if cfg.pos_embed:
        ok = ok and cond_latent.shape[1:3] == (cfg.latent_h, cfg.latent_w)
    if not ok:
        raise ShapeMismatch(f"condition latent has shape {cond_latent.shape}")
    schedule = schedule or rectified_flow()
    _check_boundaries(schedule)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(cond_latent.shape).astype(cfg.np_dtype())
    cond_b = cond_latent[None]
    dt = 1.0 / steps
    with T.no_grad():
        for k in range(steps):
            t_now = 1.0 - k * dt
            inp = np.concatenate([cond_b, z[None]], axis=-1)
            v = model(inp, t_now, int(instruction)).data[0]
            z = z - dt * v
    return z


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(directory, model, step=0, seed=0, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = model.params.named()
    files = {}
    for name, tensor in named.items():
        fname = name.replace("/", "_") + ".himt"
        write_himt(directory / fname, tensor.data)
        files[name] = fname
    manifest = {
        "format": 1,
        "library_version": himat.__version__,
        "config": asdict(model.cfg),
        "step": int(step),
        "seed": int(seed),
        "tensors": files,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return manifest


def _json_default(obj):
    if isinstance(obj, SubbandWeights):
        return asdict(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = ModelConfig(**manifest["config"])
    model = build_model(cfg, seed=manifest.get("seed", 0))
    named = model.params.named()
    for name, fname in manifest["tensors"].items():
        named[name].data = read_himt(directory / fname).astype(cfg.np_dtype())
    return model, manifest
