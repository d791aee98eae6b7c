"""Command-line surface: encode, decode, eval, bench, train.

Reports are JSON on stdout; artifacts (streams, images, CSV tables, figures)
go to files. Every command is deterministic given --seed: identical
invocations produce byte-identical artifacts. GSIR_THREADS caps internal
corpus-level parallelism (results are merged in fixed corpus order either
way).

Exit codes: 0 ok, 2 usage, 3 I/O, 4 format, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .core import GaussianSet
from .imageio import ImageFormatError, load_image, save_pgm, save_png
from .optim import fit_from_scratch, write_loss_curve_csv
from .quant import (
    BitstreamError,
    RangeStrategy,
    StreamMeta,
    decode_bitstream,
    default_global_spec,
    derive_ranges,
    encode_bitstream,
    quantize_roundtrip,
    storage_spec,
    uniform_spec,
)
from .render import RenderConfig, render
from .report import (
    bar_comparison_figure,
    loss_curves_figure,
    quality_heatmap_figure,
    stage_progress_figure,
    write_csv,
)
from .rng import named_rng
from .stagewise import (
    FinetuneConfig,
    HeuristicPredictor,
    LinearPredictor,
    PODConfig,
    StageControlConfig,
    WeightsFormatError,
    compute_stage_mask,
    encode_image,
    finetune_train,
    init_pipeline,
    load_weights,
    pod_train,
    predict_increment,
    quality_maps,
    save_weights,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5

_STRATEGIES = {
    "per-image": RangeStrategy.PER_IMAGE,
    "global": RangeStrategy.GLOBAL,
    "adaptive": RangeStrategy.ADAPTIVE,
}


class UsageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericFailureError(RuntimeError):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GSIR_THREADS", "1")))
    except ValueError:
        return 1


def _corpus_map(fn, items):
    """Apply fn over corpus items, parallel up to GSIR_THREADS, results in
    submission order so output is independent of scheduling."""
    n = _threads()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _load_corpus(directory) -> list[tuple[str, np.ndarray]]:
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"corpus directory not found: {directory}")
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise UsageError(f"empty corpus: no .png/.ppm files in {directory}")
    return [(p.name, load_image(p)) for p in paths]


def _predictor_from_flag(flag: str, control: StageControlConfig):
    if flag == "heuristic":
        return HeuristicPredictor()
    if flag.startswith("tiny:"):
        model, _, _ = load_weights(flag[5:])
        if model.patch_size != control.patch_size:
            raise UsageError(
                f"weights built for patch size {model.patch_size}, requested {control.patch_size}"
            )
        return model
    raise UsageError(f"unknown predictor {flag!r} (use 'heuristic' or 'tiny:<weights>')")


def _assert_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFailureError(f"non-finite values in {what}")


def _emit(report: dict) -> None:
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# --- encode -------------------------------------------------------------------


def _prefix_renders(gset: GaussianSet, n_stages: int, width: int, height: int, cfg: RenderConfig):
    out = []
    img = np.zeros((height, width, 3))
    for stage in range(1, n_stages + 1):
        delta = gset.select(gset.stage_id == stage)
        if delta.count:
            img = img + render(delta, width, height, cfg)
        out.append(img.copy())
    return out


def cmd_encode(args) -> int:
    t0 = time.perf_counter()
    target = load_image(args.input)
    height, width = target.shape[:2]
    control = StageControlConfig(
        tau_psnr=args.tau_psnr, tau_ssim=args.tau_ssim,
        patch_size=args.patch_size, n_stages=args.stages,
    )
    if args.patch_size > min(width, height):
        raise UsageError(f"patch size {args.patch_size} exceeds min(W, H) = {min(width, height)}")
    model = _predictor_from_flag(args.predictor, control)
    render_cfg = RenderConfig()

    state = encode_image(target, model, control, refine_steps=args.refine_steps, render_cfg=render_cfg)
    _assert_finite(state.render_acc, "accumulated render")

    strategy = _STRATEGIES[args.quant]
    base = default_global_spec()
    if state.accumulated.count == 0 and strategy is not RangeStrategy.GLOBAL:
        strategy = RangeStrategy.GLOBAL  # data-dependent ranges need primitives
    spec = derive_ranges(state.accumulated, strategy, base, width, height)
    counts = tuple(int(np.sum(state.accumulated.stage_id == s)) for s in range(1, control.n_stages + 1))
    meta = StreamMeta(width=width, height=height, n_stages=control.n_stages,
                      strategy=strategy, stage_counts=counts)
    blob = encode_bitstream(state.accumulated, spec, meta)
    Path(args.output).write_bytes(blob)

    prefixes = _prefix_renders(state.accumulated, control.n_stages, width, height, render_cfg)
    stage_rows = []
    for record, prefix in zip(state.records, prefixes):
        stage_rows.append({
            "stage": record.stage,
            "added": record.added,
            "mask_count": record.mask_count,
            "total": int(sum(r.added for r in state.records[: record.stage])),
            "psnr": round(record.psnr, 4),
            "ms_ssim": round(metrics.ms_ssim(prefix, target), 6),
        })

    qset = quantize_roundtrip(state.accumulated, storage_spec(spec), width, height)
    q_psnr = metrics.psnr(render(qset, width, height, render_cfg), target)
    capacity = control.candidate_capacity(height, width)
    report = {
        "input": str(args.input),
        "output": str(args.output),
        "width": width,
        "height": height,
        "patch_size": control.patch_size,
        "n_stages": control.n_stages,
        "tau_psnr": control.tau_psnr,
        "tau_ssim": control.tau_ssim,
        "predictor": args.predictor,
        "refine_steps": args.refine_steps,
        "quant_strategy": args.quant,
        "seed": args.seed,
        "stages": stage_rows,
        "total_gaussians": state.accumulated.count,
        "candidate_capacity": capacity,
        "utilization": round(state.accumulated.count / capacity, 6),
        "quantized_psnr": round(q_psnr, 4),
        "stream_bytes": len(blob),
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    if args.report_dir:
        outdir = Path(args.report_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        maps = quality_maps(target, state.render_acc, control.patch_size)
        write_csv(outdir / "stages.csv",
                  ["stage", "added", "mask_count", "total", "psnr", "ms_ssim"],
                  [[r["stage"], r["added"], r["mask_count"], r["total"], r["psnr"], r["ms_ssim"]]
                   for r in stage_rows])
        np.savetxt(outdir / "quality_psnr.csv", maps.psnr_map, fmt="%.4f", delimiter=",")
        np.savetxt(outdir / "quality_ssim.csv", maps.ssim_map, fmt="%.6f", delimiter=",")
        save_pgm(outdir / "quality_psnr.pgm", maps.psnr_map)
        save_pgm(outdir / "quality_ssim.pgm", maps.ssim_map, vmin=0.0, vmax=1.0)
        quality_heatmap_figure(outdir / "quality_maps.png", maps.psnr_map, maps.ssim_map)
        stage_progress_figure(outdir / "stage_progress.png", stage_rows)
        from .report import density_figure
        from .stagewise import density_map

        counts_grid = density_map(state.accumulated, args.density_cell, width, height)
        np.savetxt(outdir / "density.csv", counts_grid, fmt="%d", delimiter=",")
        save_pgm(outdir / "density.pgm", counts_grid)
        density_figure(outdir / "density.png", counts_grid)
    _emit(report)
    return EXIT_OK


# --- decode -------------------------------------------------------------------


def cmd_decode(args) -> int:
    blob = Path(args.input).read_bytes()
    gset, spec, meta = decode_bitstream(blob)
    cfg = RenderConfig()
    out = render(gset, meta.width, meta.height, cfg)
    _assert_finite(out, "decoded render")
    save_png(args.output, out)
    report = {
        "input": str(args.input),
        "output": str(args.output),
        "width": meta.width,
        "height": meta.height,
        "n_stages": meta.n_stages,
        "stage_counts": list(meta.stage_counts),
        "total_gaussians": gset.count,
        "strategy": meta.strategy.name.lower().replace("_", "-"),
    }
    if args.prefix:
        outdir = Path(args.prefix)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = []
        for stage, prefix in enumerate(
            _prefix_renders(gset, meta.n_stages, meta.width, meta.height, cfg), start=1
        ):
            path = outdir / f"stage_{stage:02d}.png"
            save_png(path, prefix)
            paths.append(str(path))
        report["prefixes"] = paths
    _emit(report)
    return EXIT_OK


# --- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    recon = load_image(args.recon)
    reference = load_image(args.reference)
    if recon.shape != reference.shape:
        raise UsageError(f"dimension mismatch: {recon.shape} vs {reference.shape}")
    height, width = recon.shape[:2]
    maps = quality_maps(reference, recon, args.patch_size)
    outdir = Path(args.out_dir) if args.out_dir else Path(args.recon).resolve().parent
    outdir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.recon).stem
    psnr_csv = outdir / f"{stem}.psnr_map.csv"
    ssim_csv = outdir / f"{stem}.ssim_map.csv"
    psnr_pgm = outdir / f"{stem}.psnr_map.pgm"
    ssim_pgm = outdir / f"{stem}.ssim_map.pgm"
    figure = outdir / f"{stem}.quality.png"
    np.savetxt(psnr_csv, maps.psnr_map, fmt="%.4f", delimiter=",")
    np.savetxt(ssim_csv, maps.ssim_map, fmt="%.6f", delimiter=",")
    save_pgm(psnr_pgm, maps.psnr_map)
    save_pgm(ssim_pgm, maps.ssim_map, vmin=0.0, vmax=1.0)
    quality_heatmap_figure(figure, maps.psnr_map, maps.ssim_map)
    _emit({
        "recon": str(args.recon),
        "reference": str(args.reference),
        "width": width,
        "height": height,
        "psnr": round(metrics.psnr(recon, reference), 4),
        "ssim": round(metrics.ssim(recon, reference), 6),
        "ms_ssim": round(metrics.ms_ssim(recon, reference), 6),
        "patch_size": args.patch_size,
        "psnr_map_csv": str(psnr_csv),
        "ssim_map_csv": str(ssim_csv),
        "psnr_map_pgm": str(psnr_pgm),
        "ssim_map_pgm": str(ssim_pgm),
        "quality_figure": str(figure),
    })
    return EXIT_OK


# --- bench --------------------------------------------------------------------


def _bench_stagewise_vs_oneshot(corpus, outdir: Path, args) -> None:
    control = StageControlConfig(patch_size=args.patch_size, n_stages=args.stages)
    oneshot = StageControlConfig(patch_size=max(2, args.patch_size // 2), n_stages=1)

    def run_one(item):
        name, img = item
        rows = []
        t0 = time.perf_counter()
        state = encode_image(img, HeuristicPredictor(), oneshot, refine_steps=args.refine_steps)
        ms = (time.perf_counter() - t0) * 1000
        rows.append([name, "one-shot", 1, round(state.records[0].psnr, 4),
                     round(metrics.ms_ssim(state.render_acc, img), 6), state.accumulated.count, round(ms, 1)])
        t0 = time.perf_counter()
        state = encode_image(img, HeuristicPredictor(), control, refine_steps=args.refine_steps)
        ms = (time.perf_counter() - t0) * 1000
        height, width = img.shape[:2]
        for record, prefix in zip(state.records, _prefix_renders(state.accumulated, control.n_stages, width, height, RenderConfig())):
            rows.append([name, "stage-wise", record.stage, round(record.psnr, 4),
                         round(metrics.ms_ssim(prefix, img), 6),
                         int(sum(r.added for r in state.records[: record.stage])), round(ms, 1)])
        return rows

    all_rows = [row for rows in _corpus_map(run_one, corpus) for row in rows]
    write_csv(outdir / "stagewise_vs_oneshot.csv",
              ["image", "mode", "stage", "psnr", "ms_ssim", "n_gaussians", "time_ms"], all_rows)
    curves = {}
    for mode in ("one-shot", "stage-wise"):
        pts = [(r[5], r[3]) for r in all_rows if r[1] == mode]
        pts.sort()
        curves[mode] = (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
    loss_curves_figure(outdir / "stagewise_vs_oneshot.png", curves,
                       xlabel="primitives", ylabel="PSNR (dB)", logy=False)


def _bench_thresholds(corpus, outdir: Path, args) -> None:
    grid = [(30.0, 0.90), (35.0, 0.95), (40.0, 0.98)]

    def run_one(item):
        name, img = item
        rows = []
        for tau_psnr, tau_ssim in grid:
            control = StageControlConfig(tau_psnr=tau_psnr, tau_ssim=tau_ssim,
                                         patch_size=args.patch_size, n_stages=args.stages)
            state = encode_image(img, HeuristicPredictor(), control, refine_steps=args.refine_steps)
            capacity = control.candidate_capacity(*img.shape[:2])
            rows.append([name, tau_psnr, tau_ssim, state.accumulated.count,
                         round(state.accumulated.count / capacity, 6),
                         round(state.records[-1].psnr, 4)])
        return rows

    all_rows = [row for rows in _corpus_map(run_one, corpus) for row in rows]
    write_csv(outdir / "thresholds.csv",
              ["image", "tau_psnr", "tau_ssim", "activated", "utilization", "psnr"], all_rows)
    labels = [f"{tp:g}/{ts:g}" for tp, ts in grid]
    means = [float(np.mean([r[4] for r in all_rows if (r[1], r[2]) == pair])) for pair in grid]
    bar_comparison_figure(outdir / "thresholds.png", labels, means, "mean utilization")


def _bench_quant_variants(corpus, outdir: Path, args) -> None:
    from .quant import ABLATION_BITS

    base = default_global_spec(ABLATION_BITS)

    def run_one(item):
        name, img = item
        height, width = img.shape[:2]
        control = StageControlConfig(patch_size=args.patch_size, n_stages=args.stages)
        state = encode_image(img, HeuristicPredictor(), control, refine_steps=args.refine_steps)
        rows = [[name, "unquantized", round(metrics.psnr(state.render_acc, img), 4),
                 round(metrics.ms_ssim(state.render_acc, img), 6), ""]]
        for label, strategy in _STRATEGIES.items():
            spec = derive_ranges(state.accumulated, strategy, base, width, height)
            counts = tuple(int(np.sum(state.accumulated.stage_id == s)) for s in range(1, control.n_stages + 1))
            blob = encode_bitstream(state.accumulated, spec,
                                    StreamMeta(width, height, control.n_stages, strategy, counts))
            decoded, _, _ = decode_bitstream(blob)
            out = render(decoded, width, height)
            rows.append([name, label, round(metrics.psnr(out, img), 4),
                         round(metrics.ms_ssim(out, img), 6), len(blob)])
        return rows

    all_rows = [row for rows in _corpus_map(run_one, corpus) for row in rows]
    write_csv(outdir / "quant_variants.csv",
              ["image", "quantizer", "psnr", "ms_ssim", "stream_bytes"], all_rows)
    labels = ["unquantized", "per-image", "global", "adaptive"]
    means = [float(np.mean([r[2] for r in all_rows if r[1] == label])) for label in labels]
    bar_comparison_figure(outdir / "quant_variants.png", labels, means, "mean PSNR (dB)")


def _direct_train(model, corpus, steps, control, lr):
    """Direct residual-render supervision of each stage (the unstable
    baseline POD replaces); logged for comparison, no refinement involved."""
    from .optim import ArrayAdam
    from .render import render_backward

    optimizers = [ArrayAdam(w.shape, lr) for w in model.weights]
    rows = []
    for step in range(steps):
        img = corpus[step % len(corpus)][1]
        height, width = img.shape[:2]
        state = init_pipeline(img)
        total = 0.0
        for stage in range(1, control.n_stages + 1):
            maps = quality_maps(state.target, state.render_acc, control.patch_size)
            mask = compute_stage_mask(maps, control)
            delta, cache = predict_increment(model, state.residual, mask, stage, control.patch_size)
            inc = render(delta, width, height) if delta.count else np.zeros_like(img)
            if delta.count:
                breakdown, grad_img = metrics.loss_render(inc, state.residual, with_grad=True)
                grads = render_backward(delta, grad_img, width, height)
                dw = model.backprop_tokens(cache, cache["token_idx"], grads.d_mu,
                                           grads.d_log_scale, grads.d_theta, grads.d_color)
                optimizers[stage - 1].step(model.weights[stage - 1], dw)
                total += breakdown.total
            state.accumulated = state.accumulated
            state.render_acc = state.render_acc + inc
            state.residual = state.residual - inc
            state.stage = stage
        rows.append((step, total))
    return rows


def _bench_pod_vs_direct(corpus, outdir: Path, args) -> None:
    control = StageControlConfig(patch_size=args.patch_size, n_stages=min(2, args.stages))
    steps = args.pod_steps
    milestones = (0, max(1, steps // 2))[: control.n_stages]
    cfg = PODConfig(steps=steps, milestones=milestones, refine_method="gd",
                    refine_steps=args.refine_steps)
    images = [img for _, img in corpus]

    model, log, _ = pod_train(LinearPredictor(args.patch_size, control.n_stages),
                              images, cfg, control, seed=args.seed)
    write_csv(outdir / "pod_curve.csv", ["step", "loss"],
              [[r.step, f"{r.total:.8f}"] for r in log])

    direct_model = LinearPredictor(args.patch_size, control.n_stages)
    for k in range(1, control.n_stages):
        direct_model.weights[k] = direct_model.weights[0].copy()
    direct_rows = _direct_train(direct_model, corpus, steps, control, cfg.predictor_lr)
    write_csv(outdir / "direct_curve.csv", ["step", "loss"],
              [[s, f"{v:.8f}"] for s, v in direct_rows])

    pod_xs = np.array([r.step for r in log])
    pod_ys = np.array([max(r.total, 1e-12) for r in log])
    dir_xs = np.array([s for s, _ in direct_rows])
    dir_ys = np.array([max(v, 1e-12) for _, v in direct_rows])
    loss_curves_figure(outdir / "pod_vs_direct.png",
                       {"distill (refined targets)": (pod_xs, pod_ys),
                        "direct residual loss": (dir_xs, dir_ys)})


def _bench_fit_baseline(corpus, outdir: Path, args) -> None:
    def run_one(indexed):
        idx, (name, img) = indexed
        rng = named_rng(args.seed, "fit-baseline", idx)
        gset, history = fit_from_scratch(img, args.fit_gaussians, args.fit_iters, rng,
                                         record_every=max(1, args.fit_iters // 50))
        curve_path = outdir / f"fit_{Path(name).stem}.csv"
        write_loss_curve_csv(history, curve_path)
        return name, history, gset.count

    results = _corpus_map(run_one, list(enumerate(corpus)))
    summary = [[name, history[-1].iteration, f"{history[-1].total:.6f}", f"{history[-1].psnr:.4f}", count]
               for name, history, count in results]
    write_csv(outdir / "fit_baseline.csv",
              ["image", "iterations", "final_loss", "final_psnr", "n_gaussians"], summary)
    curves = {
        name: (np.array([r.iteration for r in history]), np.array([max(r.total, 1e-12) for r in history]))
        for name, history, _ in results
    }
    loss_curves_figure(outdir / "fit_baseline.png", curves, xlabel="iteration")


_SUITES = {
    "stagewise-vs-oneshot": _bench_stagewise_vs_oneshot,
    "thresholds": _bench_thresholds,
    "quant-variants": _bench_quant_variants,
    "pod-vs-direct": _bench_pod_vs_direct,
    "fit-baseline": _bench_fit_baseline,
}


def cmd_bench(args) -> int:
    corpus = _load_corpus(args.corpus)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _SUITES[args.suite](corpus, outdir, args)
    _emit({"suite": args.suite, "corpus": str(args.corpus), "images": len(corpus),
           "output_dir": str(outdir), "seed": args.seed})
    return EXIT_OK


# --- train --------------------------------------------------------------------

_CONFIG_KEYS = {
    "patch_size": int, "n_stages": int, "steps": int, "milestones": list,
    "refine_steps": int, "refine_method": str, "predictor_lr": float,
    "tau_psnr": float, "tau_ssim": float, "checkpoint_every": int, "seed": int,
    "stage_weights": list, "distill_weight": float, "quant_bits": int,
    "quant_gamma": float,
}


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}:1:1: top-level value must be an object")
    for key, value in cfg.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        expect = _CONFIG_KEYS[key]
        if expect in (int, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}: key {key!r} must be a number")
        elif not isinstance(value, expect):
            raise ConfigError(f"{path}: key {key!r} must be {expect.__name__}")
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args.config) if args.config else {}
    control = StageControlConfig(
        tau_psnr=cfg.get("tau_psnr", 35.0),
        tau_ssim=cfg.get("tau_ssim", 0.95),
        patch_size=cfg.get("patch_size", 14),
        n_stages=cfg.get("n_stages", 4),
    )
    seed = cfg.get("seed", args.seed)
    steps = cfg.get("steps", 0)
    checkpoint_every = cfg.get("checkpoint_every", 0)
    corpus = [img for _, img in _load_corpus(args.corpus)]

    if args.resume and args.init:
        raise UsageError("--resume and --init are mutually exclusive")
    if args.resume:
        model, start_step, optimizers = load_weights(args.resume, cfg.get("predictor_lr", 1e-3))
    elif args.init:
        model, _, _ = load_weights(args.init, cfg.get("predictor_lr", 1e-3))
        start_step, optimizers = 0, None
    else:
        model = LinearPredictor(control.patch_size, control.n_stages)
        start_step, optimizers = 0, None
    if model.patch_size != control.patch_size or model.n_stages < control.n_stages:
        raise UsageError(
            f"weights ({model.patch_size}px, {model.n_stages} stages) do not fit the "
            f"configured pipeline ({control.patch_size}px, {control.n_stages} stages)"
        )

    out_path = Path(args.output)
    log_path = Path(args.log) if args.log else out_path.with_suffix(out_path.suffix + ".log.csv")
    ckpt_path = out_path.with_suffix(out_path.suffix + ".ckpt")

    def checkpoint(step, model_, optimizers_, row):
        if not np.isfinite(row.total):
            raise NumericFailureError(f"non-finite training loss at step {step}")
        if checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_weights(model_, ckpt_path, step=step + 1, optimizers=optimizers_)

    if args.mode == "pod":
        pod_cfg = PODConfig(
            steps=steps,
            refine_steps=cfg.get("refine_steps", 10),
            distill_weight=cfg.get("distill_weight", 100.0),
            stage_weights=tuple(cfg["stage_weights"]) if "stage_weights" in cfg else None,
            milestones=tuple(cfg.get("milestones", (0, 500, 1000, 1500))),
            predictor_lr=cfg.get("predictor_lr", 1e-3),
            refine_method=cfg.get("refine_method", "adam"),
        )
        model, log, optimizers = pod_train(model, corpus, pod_cfg, control, seed=seed,
                                           start_step=start_step, optimizers=optimizers,
                                           on_step=checkpoint)
    else:
        quant_spec = uniform_spec(cfg["quant_bits"]) if "quant_bits" in cfg else None
        ft_cfg = FinetuneConfig(
            steps=steps,
            stage_weights=tuple(cfg["stage_weights"]) if "stage_weights" in cfg else None,
            predictor_lr=cfg.get("predictor_lr", 1e-3),
            quant_spec=quant_spec,
            quant_gamma=cfg.get("quant_gamma", 0.1),
        )
        model, log, optimizers = finetune_train(model, corpus, ft_cfg, control, seed=seed,
                                                start_step=start_step, optimizers=optimizers,
                                                on_step=checkpoint)

    save_weights(model, out_path, step=steps, optimizers=optimizers)
    from .stagewise import write_train_log_csv

    write_train_log_csv(log, log_path)
    _emit({
        "mode": args.mode,
        "weights": str(out_path),
        "log": str(log_path),
        "steps_run": len(log),
        "start_step": start_step,
        "final_loss": (round(log[-1].total, 6) if log else None),
        "seed": seed,
    })
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsir",
        description="Gaussian-splat image representation: encode, decode, evaluate, bench, train.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="encode an image into a .gsir stream")
    enc.add_argument("input")
    enc.add_argument("-o", "--output", required=True)
    enc.add_argument("--patch-size", type=int, default=14)
    enc.add_argument("--stages", type=int, default=4)
    enc.add_argument("--tau-psnr", type=float, default=35.0)
    enc.add_argument("--tau-ssim", type=float, default=0.95)
    enc.add_argument("--predictor", default="heuristic", help="'heuristic' or 'tiny:<weights path>'")
    enc.add_argument("--refine-steps", type=int, default=10)
    enc.add_argument("--quant", choices=sorted(_STRATEGIES), default="adaptive")
    enc.add_argument("--seed", type=int, default=0)
    enc.add_argument("--report-dir", default=None)
    enc.add_argument("--density-cell", type=int, default=8, help="cell size (px) for the density map")
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help="decode a .gsir stream to PNG")
    dec.add_argument("input")
    dec.add_argument("-o", "--output", required=True)
    dec.add_argument("--prefix", default=None, help="directory for per-stage prefix PNGs")
    dec.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="compare a reconstruction against a reference")
    ev.add_argument("recon")
    ev.add_argument("reference")
    ev.add_argument("--patch-size", type=int, default=14)
    ev.add_argument("--out-dir", default=None)
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="run a benchmark suite over a corpus directory")
    be.add_argument("suite", choices=sorted(_SUITES))
    be.add_argument("corpus")
    be.add_argument("-o", "--output", required=True)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--patch-size", type=int, default=14)
    be.add_argument("--stages", type=int, default=4)
    be.add_argument("--refine-steps", type=int, default=10)
    be.add_argument("--pod-steps", type=int, default=2000)
    be.add_argument("--fit-gaussians", type=int, default=500)
    be.add_argument("--fit-iters", type=int, default=2000)
    be.set_defaults(func=cmd_bench)

    tr = sub.add_parser("train", help="train the linear increment predictor")
    tr.add_argument("--mode", choices=("pod", "finetune"), required=True)
    tr.add_argument("corpus")
    tr.add_argument("--config", default=None, help="JSON config path")
    tr.add_argument("-o", "--output", required=True)
    tr.add_argument("--resume", default=None, help="checkpoint to resume the same run from")
    tr.add_argument("--init", default=None, help="weights to initialize a fresh run from")
    tr.add_argument("--log", default=None, help="log CSV path")
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gsir: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BitstreamError, ImageFormatError, WeightsFormatError, ConfigError) as exc:
        print(f"gsir: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericFailureError as exc:
        print(f"gsir: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"gsir: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
