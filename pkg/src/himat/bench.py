"""Inference-cost comparison harness: analytic FLOP/param/memory models
and measured wall-time scaling for three realizations of the cross-map
mechanism.

Variants (identical backbone, different cross-map stage):
  attention    softmax attention over all M*H*W tokens
  linear       linear attention over the same token set
  crossstitch  per-map backbone + the per-pixel CrossStitch module

Conventions:
  * analytic FLOPs bill multiply+add as 2 everywhere; the attention
    module's polynomials count one unit per multiply-accumulate, so they
    are doubled here before entering any comparison;
  * projections (QKVO) are charged to the attention variants separately
    from the core polynomials, which exclude them;
  * memory figures are analytic element counts of the largest
    simultaneously live intermediates, not allocator measurements;
  * measured time covers one forward pass of the mechanism itself at a
    total token count N (the backbone is identical across variants and
    would only dilute the scaling signal); the CrossStitch variant lays
    N tokens out as M maps x ceil(N/M) pixels. Timing runs in float32;
    the softmax path blocks its score rows so the N x N matrix never
    exceeds a bounded working set.

Ratio columns are normalized by the CrossStitch row, whose ratio is
exactly 1.0 by construction.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass

import numpy as np

import himat
from himat import kernels
from himat.attention import (
    LINEAR,
    SOFTMAX,
    AttentionParams,
    attention_blocked,
    attention_cost,
    linear_attention_infer,
)
from himat.crossstitch import crossstitch_cost, crossstitch_infer, crossstitch_init
from himat.errors import InsufficientPoints

VARIANTS = ("attention", "linear", "crossstitch")


@dataclass
class BenchConfig:
    n_blocks: int = 4
    channels: int = 32
    maps: int = 3
    trials: int = 9
    block_rows: int = 512  # score-row block for the softmax timing path
    seed: int = 0


def _backbone_cost(n_tokens, c):
    """Per-block backbone terms shared by every variant (mul+add = 2):
    per-map linear attention with QKVO projections plus the C->4C->C
    feed-forward."""
    proj = 8 * n_tokens * c * c
    core = 2 * attention_cost(n_tokens, c, LINEAR)["time_flops"]
    ff = 16 * n_tokens * c * c
    return proj + core + ff


def _mechanism_cost(n_tokens, c, maps, variant):
    """Cross-map stage cost at a total token count (mul+add = 2)."""
    if variant == "attention":
        flops = 8 * n_tokens * c * c + 2 * attention_cost(n_tokens, c, SOFTMAX)["time_flops"]
        params = 4 * c * c
        space = attention_cost(n_tokens, c, SOFTMAX)["space_units"]
    elif variant == "linear":
        flops = 8 * n_tokens * c * c + 2 * attention_cost(n_tokens, c, LINEAR)["time_flops"]
        params = 4 * c * c
        space = attention_cost(n_tokens, c, LINEAR)["space_units"]
    elif variant == "crossstitch":
        pixels = -(-n_tokens // maps)  # ceil
        cs = crossstitch_cost(maps, 1, pixels, c)
        flops, params, space = cs["time_flops"], cs["params"], cs["space_units"]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return flops, params, space


def analytic_cost(cfg, variant, n_tokens):
    """Whole-model analytic cost at a total token count N = M*H*W.

    flops = n_blocks * (backbone + mechanism); params likewise plus the
    shared embedding/head weights (identical across variants, charged
    once); memory = token activations + the mechanism's peak.
    """
    c, m = cfg.channels, cfg.maps
    mech_flops, mech_params, mech_space = _mechanism_cost(n_tokens, c, m, variant)
    per_map_tokens = -(-n_tokens // m)
    backbone = m * _backbone_cost(per_map_tokens, c)
    backbone_params = 4 * c * c + 8 * c * c + 2 * c
    shared_params = 2 * c * c  # input/head projections
    flops = cfg.n_blocks * (backbone + mech_flops)
    params = cfg.n_blocks * (backbone_params + mech_params) + shared_params
    memory = 4 * n_tokens * c + mech_space
    return {"variant": variant, "n_tokens": n_tokens, "flops": flops, "params": params, "memory": memory}


# -- measured timing ----------------------------------------------------------

def _make_inputs(n_tokens, c, maps, variant, rng):
    x = rng.standard_normal((n_tokens, c)).astype(np.float32)
    if variant == "attention":
        p = AttentionParams.init(c, rng, variant=SOFTMAX, dtype=np.float32)
        return x, p
    if variant == "linear":
        p = AttentionParams.init(c, rng, variant=LINEAR, dtype=np.float32)
        return x, p
    pixels = -(-n_tokens // maps)
    p = crossstitch_init(maps, c, dtype=np.float32)
    for t in p.parameters():
        t.data = rng.standard_normal(t.shape).astype(np.float32) * 0.1
    stack = rng.standard_normal((maps, 1, pixels, c)).astype(np.float32)
    return stack, p


def _forward(variant, inputs, p, block_rows):
    if variant == "attention":
        return attention_blocked(inputs, p, block=block_rows)
    if variant == "linear":
        return linear_attention_infer(inputs, p)
    return crossstitch_infer(inputs, p)


def measure_step_time(cfg, variant, n_tokens, trials=None, warmup=2):
    """Median and IQR of the mechanism's forward wall time (seconds)."""
    trials = trials if trials is not None else cfg.trials
    if trials < 5:
        raise ValueError("need at least 5 trials")
    rng = np.random.default_rng(cfg.seed)
    inputs, p = _make_inputs(n_tokens, cfg.channels, cfg.maps, variant, rng)
    for _ in range(warmup):
        _forward(variant, inputs, p, cfg.block_rows)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        _forward(variant, inputs, p, cfg.block_rows)
        times.append(time.perf_counter() - t0)
    q25, q50, q75 = np.percentile(times, [25, 50, 75])
    return {"median_s": float(q50), "iqr_s": float(q75 - q25), "times": [float(t) for t in times]}


def fit_scaling_exponent(sizes, times):
    """Least-squares slope of log(time) against log(size)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if sizes.size < 3:
        raise InsufficientPoints(f"need >= 3 points, got {sizes.size}")
    if (sizes <= 0).any() or (times <= 0).any():
        raise ValueError("sizes and times must be positive")
    x = np.log(sizes)
    y = np.log(times)
    design = np.vstack([x, np.ones_like(x)]).T
    slope, _ = np.linalg.lstsq(design, y, rcond=None)[0]
    return float(slope)


def platform_metadata():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
        "processor": platform.processor() or "unknown",
        "kernel_backend": kernels.backend_name(),
        "library_version": himat.__version__,
    }


def run_bench(cfg, variants, sizes, measure=True):
    """Full report: one row per (variant, size) with analytic columns,
    optional measured timings, and ratios normalized by the CrossStitch
    row at the same size (exactly 1.0 on the CrossStitch rows)."""
    rows = []
    for n in sizes:
        for v in variants:
            row = analytic_cost(cfg, v, n)
            if measure:
                row.update(measure_step_time(cfg, v, n))
            rows.append(row)
    by_key = {(r["variant"], r["n_tokens"]): r for r in rows}
    for r in rows:
        base = by_key.get(("crossstitch", r["n_tokens"]))
        if base is not None:
            for col in ("flops", "params", "memory", "median_s"):
                if col in r and col in base and base[col]:
                    r[f"{col}_ratio"] = r[col] / base[col]
    report = {
        "schema": "himat.bench.report/1",
        "config": {
            "n_blocks": cfg.n_blocks,
            "channels": cfg.channels,
            "maps": cfg.maps,
            "trials": cfg.trials,
            "seed": cfg.seed,
        },
        "sizes": list(map(int, sizes)),
        "variants": list(variants),
        "platform": platform_metadata(),
        "rows": rows,
    }
    return report


def validate_report(report):
    """Schema check used by tests and the CLI."""
    if report.get("schema") != "himat.bench.report/1":
        raise ValueError("wrong schema tag")
    for key in ("config", "sizes", "variants", "platform", "rows"):
        if key not in report:
            raise ValueError(f"missing key {key}")
    for row in report["rows"]:
        for key in ("variant", "n_tokens", "flops", "params", "memory"):
            if key not in row:
                raise ValueError(f"row missing {key}")
        if row["variant"] not in VARIANTS:
            raise ValueError(f"unknown variant {row['variant']}")
        if row["variant"] == "crossstitch":
            for col in ("flops_ratio", "params_ratio", "memory_ratio"):
                if col in row and abs(row[col] - 1.0) > 1e-12:
                    raise ValueError("crossstitch ratios must be exactly 1.0")
    return True


def report_to_csv(report):
    cols = ["variant", "n_tokens", "flops", "params", "memory", "median_s", "iqr_s",
            "flops_ratio", "params_ratio", "memory_ratio", "median_s_ratio"]
    lines = [",".join(cols)]
    for row in report["rows"]:
        lines.append(",".join(str(row.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


# -- kernel backend comparison ---------------------------------------------------

def bench_kernels(sizes=(64, 128, 256), trials=7, taps=38, seed=0):
    """Times the compiled kernels against the numpy fallback on the same
    inputs; one row per (kernel, size, backend)."""
    rng = np.random.default_rng(seed)
    backends = kernels.available_backends()
    taps_arr = rng.standard_normal(taps)
    rows = []
    for n in sizes:
        img = rng.standard_normal((n, n))
        q = rng.integers(0, 16, size=(n, n)).astype(np.int32)
        for bname, impl in backends.items():
            for kname, fn in (
                ("filter_periodic", lambda: kernels.filter_periodic(img, taps_arr, dilation=2, axis=-1, impl=impl)),
                ("glcm_counts", lambda: kernels.glcm_counts(q, 0, 1, 16, impl=impl)),
            ):
                fn()
                times = []
                for _ in range(trials):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
                rows.append(
                    {"kernel": kname, "size": int(n), "backend": bname, "median_s": float(np.median(times))}
                )
    return {"schema": "himat.bench.kernels/1", "platform": platform_metadata(), "rows": rows}
