"""Desk-scale end-to-end pipelines tying dataset, codec, model and
training together; the CLI is a thin shell over these.

A training run produces a checkpoint directory holding the model
tensors, the codec projections, the latent normalization constants and
a manifest (config, hashes, seeds, loss curve), which is everything
needed to regenerate its outputs.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

import himat
from himat import tensor as T
from himat.config import stage_dims
from himat.diffusion import (
    Adam,
    LossSpec,
    ModelConfig,
    build_model,
    load_checkpoint,
    rectified_flow,
    sample,
    save_checkpoint,
    train_step,
)
from himat.diffusion import decompose as decompose_latent
from himat.himt import read_himt, write_himt
from himat.material import (
    ToyCodec,
    augment,
    decode,
    encode,
    pack_maps,
    synth_dataset,
    train_codec,
    unpack_maps,
)
from himat.tensor import Tensor
from himat.wavelet import SubbandWeights

INSTRUCTIONS = ("albedo", "normal", "irradiance")


def loss_spec_from(cfg, override_kind=None):
    return LossSpec(
        kind=override_kind or cfg.loss.kind,
        basis=cfg.loss.basis,
        dwt_weight=cfg.loss.dwt_weight,
        swt_weights=SubbandWeights(cfg.loss.swt_ll, cfg.loss.swt_lh, cfg.loss.swt_hl, cfg.loss.swt_hh),
        levels=cfg.loss.levels,
    )


def make_codec(cfg, stacks, seed):
    if cfg.codec.mode == "lossless":
        return ToyCodec.lossless(factor=cfg.codec.factor, seed=seed)
    codec = ToyCodec.lossy(factor=cfg.codec.factor, channels=cfg.codec.channels, seed=seed)
    train_codec(codec, stacks, steps=cfg.codec.train_steps, lr=cfg.codec.lr, seed=seed)
    for t in codec.parameters():
        t.requires_grad = False
    return codec


def _gen_stacks(cfg, pixels_h, pixels_w, seed, count, augmented=False):
    items = synth_dataset(seed, count, pixels_h, pixels_w)
    if augmented:
        aug_rng = np.random.default_rng(seed + 1)
        items = items + [(augment(m, aug_rng), fam) for m, fam in items]
    stacks = np.stack([pack_maps(m) for m, _ in items])
    conds = np.array([fam for _, fam in items], dtype=np.int64)
    return stacks, conds, items


def _identity_stack(img):
    """A single-map stack around one 3-channel image."""
    return img[None]


def _decomposition_arrays(cfg, items):
    """(condition stack, target stack, instruction id) triples.

    The condition is always the basecolor image; instruction 0 asks it
    back (identity), 1 asks for the normal map, 2 for a height-lit gray.
    """
    conds, targets, instr = [], [], []
    n_instr = cfg.train.instructions
    for m, _ in items:
        shading = np.repeat(m.height[..., None], 3, axis=-1)
        target_by_instruction = {0: m.basecolor, 1: m.normal, 2: shading}
        for i in range(n_instr):
            conds.append(_identity_stack(m.basecolor))
            targets.append(_identity_stack(target_by_instruction[i]))
            instr.append(i)
    return np.stack(conds), np.stack(targets), np.array(instr, dtype=np.int64)


def train_run(cfg, loss_kind=None, seed=0, out_dir=None, log_every=0):
    """Train per the run config; returns (model, info dict)."""
    cfg.validate()
    schedule = rectified_flow()
    spec = loss_spec_from(cfg, loss_kind)
    t_start = time.perf_counter()

    stages = cfg.stages()
    model = None
    codec = None
    norm = None
    all_losses = []
    rng = np.random.default_rng(seed)

    for stage_idx, (latent_spec, steps) in enumerate(stages):
        lh, lw = stage_dims(latent_spec)
        ph, pw = lh * cfg.codec.factor, lw * cfg.codec.factor
        if cfg.task == "generation":
            stacks, conds, items = _gen_stacks(
                cfg, ph, pw, cfg.dataset.seed, cfg.dataset.count, augmented=cfg.train.augment
            )
            data_stacks, data_conds = stacks, conds
            cond_latents = None
        else:
            _, _, items = _gen_stacks(cfg, ph, pw, cfg.dataset.seed, cfg.dataset.count)
            cond_px, target_px, instr = _decomposition_arrays(cfg, items)
            data_conds = instr

        if codec is None:
            fit_on = data_stacks if cfg.task == "generation" else target_px
            codec = make_codec(cfg, fit_on, seed=cfg.dataset.seed)

        with T.no_grad():
            if cfg.task == "generation":
                latents = encode(Tensor(data_stacks), codec).data
                cond_latents = None
            else:
                latents = encode(Tensor(target_px), codec).data
                cond_latents = encode(Tensor(cond_px), codec).data

        if norm is None:
            if cfg.train.normalize_latents:
                norm = (float(latents.mean()), float(latents.std() or 1.0))
            else:
                norm = (0.0, 1.0)
        mu, sd = norm
        latents = (latents - mu) / sd
        if cond_latents is not None:
            cond_latents = (cond_latents - mu) / sd

        if model is None:
            mc = ModelConfig(
                n_blocks=cfg.model.blocks,
                channels=cfg.model.channels,
                maps=cfg.model.maps,
                latent_h=lh,
                latent_w=lw,
                cond_vocab=cfg.model.cond_vocab,
                cond_channels=cfg.model.channels if cfg.task == "decomposition" else 0,
                pos_embed=cfg.model.pos_embed,
                emb_dim=cfg.model.emb_dim,
            )
            model = build_model(mc, seed=seed)
            opt = Adam(model.parameters(), lr=cfg.optimizer.lr, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2))
        else:
            model.cfg.latent_h, model.cfg.latent_w = lh, lw

        for step in range(steps):
            idx = rng.integers(0, latents.shape[0], cfg.train.batch)
            z0 = latents[idx]
            if cfg.task == "decomposition":
                widened = np.concatenate([cond_latents[idx], z0], axis=-1)
                batch = {"z0": widened, "cond": data_conds[idx]}
                loss = _train_step_conditioned(batch, model, schedule, spec, opt, rng)
            else:
                batch = {"z0": z0, "cond": data_conds[idx]}
                loss = train_step(batch, model, schedule, spec, opt, rng)
            all_losses.append(loss)
            if log_every and (step + 1) % log_every == 0:
                print(f"stage {stage_idx} step {step + 1}/{steps} loss {loss:.5f}")

    info = {
        "losses": all_losses,
        "latent_mu": norm[0],
        "latent_sd": norm[1],
        "elapsed_s": round(time.perf_counter() - t_start, 3),
        "loss_kind": spec.kind,
    }
    if out_dir is not None:
        save_run(out_dir, cfg, model, codec, norm, info, seed)
    return model, codec, norm, info


def _train_step_conditioned(batch, model, schedule, spec, opt, rng):
    """train_step for widened inputs: noise only the target half,
    keep the condition half clean."""
    from himat.diffusion import add_noise, compute_loss, velocity_target
    from himat.errors import NaNLoss, NonFiniteValue

    z0_full = np.asarray(batch["z0"], dtype=model.cfg.np_dtype())
    c = model.cfg.channels
    cond_lat, z0 = z0_full[..., :c], z0_full[..., c:]
    b = z0.shape[0]
    t = rng.uniform(0.0, 1.0, size=b)
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    try:
        z_t = add_noise(Tensor(z0), t, Tensor(eps), schedule)
        target = velocity_target(Tensor(z0), Tensor(eps))
        inp = T.concat([Tensor(cond_lat), z_t], axis=-1)
        pred = model(inp, t, batch["cond"])
        loss = compute_loss(pred, target, spec)
        value = loss.item()
        loss.backward()
        opt.step()
        opt.zero_grad()
    except NonFiniteValue as exc:
        raise NaNLoss(f"non-finite value during conditioned step: {exc}") from exc
    return value


def save_run(out_dir, cfg, model, codec, norm, info, seed):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = save_checkpoint(
        out_dir,
        model,
        step=len(info["losses"]),
        seed=seed,
        extra={
            "run_config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "latent_mu": norm[0],
            "latent_sd": norm[1],
            "codec": {"factor": codec.factor, "mode": codec.mode},
            "loss_kind": info["loss_kind"],
            "final_loss": info["losses"][-1] if info["losses"] else None,
            "elapsed_s": info["elapsed_s"],
        },
    )
    write_himt(out_dir / "codec.enc.himt", codec.enc.data)
    write_himt(out_dir / "codec.dec.himt", codec.dec.data)
    (out_dir / "losses.json").write_text(json.dumps(info["losses"]))
    return manifest


def load_run(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    model, manifest = load_checkpoint(ckpt_dir)
    codec = ToyCodec(
        factor=manifest["codec"]["factor"],
        enc=Tensor(read_himt(ckpt_dir / "codec.enc.himt")),
        dec=Tensor(read_himt(ckpt_dir / "codec.dec.himt")),
        mode=manifest["codec"]["mode"],
    )
    norm = (manifest["latent_mu"], manifest["latent_sd"])
    return model, codec, norm, manifest


def generate_material(model, codec, norm, prompt_id, steps, tileable=False, seed=0):
    """Sample a latent stack, decode to pixels, clip to [0,1]."""
    mu, sd = norm
    z = sample(model, cond=prompt_id, steps=steps, noise_rolling=tileable, seed=seed)
    with T.no_grad():
        px = decode(Tensor((z * sd + mu)[None]), codec).data[0]
    return unpack_maps(np.clip(px, 0.0, 1.0))


def decompose_image(model, codec, norm, image, instruction, steps, seed=0):
    """image: [H, W, 3] in [0,1]; returns the requested map, same shape."""
    mu, sd = norm
    with T.no_grad():
        cond_lat = (encode(Tensor(_identity_stack(image)), codec).data - mu) / sd
    z = decompose_latent(model, cond_lat, instruction, steps, seed=seed)
    with T.no_grad():
        out = decode(Tensor((z * sd + mu)[None]), codec).data[0, 0]
    return np.clip(out, 0.0, 1.0)
