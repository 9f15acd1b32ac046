"""Command-line entry points.

Subcommands: gen-scenes, gen-pairs, train, eval, stability, flow-curve,
gradcheck. Every subcommand takes --seed, --config <path> (line-oriented
key=value overrides) and --out <dir>. Exit codes: 0 success, 1 validation
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .errors import SceneFlowError
from .evalbench import (
    flow_metrics,
    magnitude_binned_error,
    make_report,
    stability_benchmark,
    write_csv,
    write_report,
)
from .geometry import PointCloud
from .network import (
    NetworkConfig,
    SegConfig,
    flow_forward,
    flow_loss,
    init_flow_parameters,
    train,
)
from .nn import ParameterStore, gradient_check
from .synthdata import (
    SceneSpec,
    generate_pair,
    generate_scene,
    load_pairs,
    random_subsample,
    write_manifest,
    write_pair,
    write_scene_cloud,
)


def parse_config_file(path) -> dict:
    """Line-oriented key=value file; '#' starts a comment line."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SceneFlowError(f"config line without '=': {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _get(cfg: dict, key: str, default, cast=None):
    if key not in cfg:
        return default
    v = cfg[key]
    if cast is bool:
        return v.lower() in ("1", "true", "yes", "on")
    if cast is None:
        cast = type(default)
    if cast is list:
        return [x.strip() for x in v.split(",")]
    return cast(v)


def _int_list(cfg, key, default):
    if key not in cfg:
        return list(default)
    return [int(x) for x in cfg[key].split(",")]


def _float_list(cfg, key, default):
    if key not in cfg:
        return list(default)
    return [float(x) for x in cfg[key].split(",")]


def _load_common(args) -> tuple[dict, str]:
    cfg = parse_config_file(args.config) if args.config else {}
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    return cfg, out_dir


def _network_config(cfg: dict) -> NetworkConfig:
    base = NetworkConfig()
    return NetworkConfig(
        n_points=_get(cfg, "n_points", base.n_points),
        down_ratios=tuple(_int_list(cfg, "down_ratios", base.down_ratios)),
        k=_get(cfg, "k", base.k),
        radius1=_get(cfg, "radius1", base.radius1),
        radius2=_get(cfg, "radius2", base.radius2),
        ta_cap=_get(cfg, "ta_cap", base.ta_cap),
        interp_k=_get(cfg, "interp_k", base.interp_k),
        spatial_width=_get(cfg, "spatial_width", base.spatial_width),
        temporal_width=_get(cfg, "temporal_width", base.temporal_width),
        encoder_widths=tuple(_int_list(cfg, "encoder_widths", base.encoder_widths)),
        upconv_width=_get(cfg, "upconv_width", base.upconv_width),
        pointwise_width=_get(cfg, "pointwise_width", base.pointwise_width),
        mu=_get(cfg, "mu", base.mu),
        lam=_get(cfg, "lam", base.lam),
        iterations=_get(cfg, "iterations", base.iterations),
        use_spatial_attention=_get(cfg, "use_spatial_attention", base.use_spatial_attention, bool),
        use_second_pass=_get(cfg, "use_second_pass", base.use_second_pass, bool),
        use_mask_head=_get(cfg, "use_mask_head", base.use_mask_head, bool),
    )


def _scene_spec(cfg: dict, seed: int) -> SceneSpec:
    base = SceneSpec()
    return SceneSpec(
        object_count_range=tuple(_int_list(cfg, "object_count_range", base.object_count_range)),
        container_radius=_get(cfg, "container_radius", base.container_radius),
        object_radius=_get(cfg, "object_radius", base.object_radius),
        min_separation=_get(cfg, "min_separation", base.min_separation),
        points_per_scene=_get(cfg, "points_per_scene", base.points_per_scene),
        seed=seed,
    )


def _spawn_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in
            np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64) >> 1]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args) -> int:
    cfg, out_dir = _load_common(args)
    count = _get(cfg, "scenes", 10)
    seeds = _spawn_seeds(args.seed, count)
    entries = []
    for i, s in enumerate(seeds):
        scene = generate_scene(_scene_spec(cfg, s))
        name = f"scene_{i:04d}.txt"
        write_scene_cloud(os.path.join(out_dir, name), scene.cloud, seed=s)
        entries.append({"path": name, "seed": s, "points": len(scene.cloud)})
    write_manifest(os.path.join(out_dir, "scenes.manifest"),
                   entries, header={"kind": "scenes", "seed": args.seed})
    print(f"wrote {count} scenes to {out_dir}")
    return 0


def cmd_gen_pairs(args) -> int:
    cfg, out_dir = _load_common(args)
    count = _get(cfg, "pairs", 20)
    n_points = _get(cfg, "n_points", 2048)
    motion_scale = _get(cfg, "motion_scale", 0.5)
    dropout = _get(cfg, "dropout_prob", 0.1)
    seeds = _spawn_seeds(args.seed, count * 3)
    entries = []
    for i in range(count):
        scene_seed, pair_seed, sub_seed = seeds[3 * i : 3 * i + 3]
        pair = None
        for retry in range(10):
            scene = generate_scene(_scene_spec(cfg, scene_seed + retry))
            candidate = generate_pair(scene, motion_scale, pair_seed,
                                      dropout_prob=dropout)
            if len(candidate.cloud1) >= n_points and len(candidate.cloud2) >= n_points:
                pair = random_subsample(candidate, n_points, sub_seed)
                break
        if pair is None:
            raise SceneFlowError(f"could not generate pair {i} at {n_points} points")
        name = f"pair_{i:04d}.fpcp"
        write_pair(os.path.join(out_dir, name), pair,
                   spec_echo=f"motion_scale={motion_scale} n_points={n_points}")
        entries.append({"path": name, "seed": pair.seed,
                        "motion_scale": motion_scale, "points": n_points})
    write_manifest(os.path.join(out_dir, "pairs.manifest"), entries,
                   header={"kind": "pairs", "seed": args.seed,
                           "motion_scale": motion_scale, "n_points": n_points})
    print(f"wrote {count} pairs to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg, out_dir = _load_common(args)
    epochs = _get(cfg, "epochs", 10)
    batch_size = _get(cfg, "batch_size", 8)
    lr = _get(cfg, "lr", 0.001)
    if args.task == "flow":
        if not args.data:
            raise SceneFlowError("train --task flow requires --data <manifest>")
        pairs = load_pairs(args.data)
        net_cfg = _network_config(cfg)
        result = train("flow", pairs, net_cfg, args.seed, epochs=epochs,
                       batch_size=batch_size, lr=lr)
        config_dict = {"task": "flow", "network": net_cfg.to_dict()}
    else:
        scenes_n = _get(cfg, "scenes", 40)
        n_points = _get(cfg, "n_points", 512)
        seg_cfg = SegConfig(
            n_points=n_points,
            num_classes=_get(cfg, "num_classes", 6),
            k=_get(cfg, "k", 16),
            use_spatial_attention=_get(cfg, "use_spatial_attention", True, bool),
        )
        seeds = _spawn_seeds(args.seed, scenes_n * 2)
        clouds = []
        for i in range(scenes_n):
            scene = generate_scene(_scene_spec(cfg, seeds[i]))
            sub = np.random.default_rng(seeds[scenes_n + i]).choice(
                len(scene.cloud), size=n_points, replace=False)
            clouds.append(PointCloud(points=scene.cloud.points[sub],
                                     labels=scene.cloud.labels[sub]))
        result = train("segmentation", clouds, seg_cfg, args.seed, epochs=epochs,
                       batch_size=batch_size, lr=lr)
        config_dict = {"task": "segmentation", "network": seg_cfg.to_dict()}

    ckpt = os.path.join(out_dir, "checkpoint.bin")
    result.params.save(ckpt, config=config_dict)
    report = make_report("train", config_dict,
                         {"seed": args.seed}, {"log": result.log})
    write_report(os.path.join(out_dir, "train_log.json"), report)
    print(f"checkpoint: {ckpt}; final loss {result.log[-1]['loss']:.6f}"
          if result.log else f"checkpoint: {ckpt} (no epochs run)")
    return 0


def _load_flow_checkpoint(path):
    params, config = ParameterStore.load(path)
    if not config or config.get("task") != "flow":
        raise SceneFlowError("checkpoint does not hold a flow network")
    return params, NetworkConfig.from_dict(config["network"])


def cmd_eval(args) -> int:
    cfg, out_dir = _load_common(args)
    if not args.checkpoint or not args.data:
        raise SceneFlowError("eval requires --checkpoint and --data")
    params, net_cfg = _load_flow_checkpoint(args.checkpoint)
    pairs = load_pairs(args.data)
    seeds = _spawn_seeds(args.seed, len(pairs))
    rows = []
    agg = {"model": [], "zero": []}
    for i, pair in enumerate(pairs):
        outs, _ = flow_forward(pair.cloud1, pair.cloud2, params, net_cfg, seeds[i])
        pred = outs[-1].to_field()
        m_model = flow_metrics(pred, pair.gt_flow, pair.gt_mask)
        m_zero = flow_metrics(np.zeros_like(pair.gt_flow), pair.gt_flow, pair.gt_mask)
        agg["model"].append(m_model)
        agg["zero"].append(m_zero)
        rows.append([i, "model", m_model.epe, m_model.acc_strict, m_model.acc_relax])
        rows.append([i, "zero_flow", m_zero.epe, m_zero.acc_strict, m_zero.acc_relax])

    def summarize(ms):
        return {
            "epe": float(np.mean([m.epe for m in ms])),
            "acc_strict": float(np.mean([m.acc_strict for m in ms])),
            "acc_relax": float(np.mean([m.acc_relax for m in ms])),
        }

    metrics = {"model": summarize(agg["model"]),
               "zero_flow_baseline": summarize(agg["zero"]),
               "pair_count": len(pairs)}
    report = make_report("eval", net_cfg.to_dict(), {"seed": args.seed}, metrics)
    write_report(os.path.join(out_dir, "eval_report.json"), report)
    write_csv(os.path.join(out_dir, "eval_report.csv"),
              ["pair", "method", "epe", "acc_strict", "acc_relax"], rows)
    print(f"model EPE {metrics['model']['epe']:.4f} over {len(pairs)} pairs")
    return 0


def cmd_stability(args) -> int:
    cfg, out_dir = _load_common(args)
    scenes_n = _get(cfg, "scenes", 30)
    n_grid = _int_list(cfg, "n_grid", (256, 512, 1024, 2048))
    resamples = _get(cfg, "resamples", 100)
    down_to = _get(cfg, "down_to", 64)
    k = _get(cfg, "k", 16)
    seeds = _spawn_seeds(args.seed, scenes_n)
    specs = [_scene_spec(cfg, s) for s in seeds]
    ap_params = None
    ap_prefix = "ap"
    if args.checkpoint:
        ap_params, ck_cfg = ParameterStore.load(args.checkpoint)
        ap_prefix = "s1/ap" if "s1/ap/0" in ap_params else "sa/ap"
    report_obj = stability_benchmark(specs, n_grid, resamples, down_to,
                                     args.seed, k=k, ap_params=ap_params,
                                     ap_prefix=ap_prefix)
    report = make_report("stability",
                         {"scenes": scenes_n, "n_grid": n_grid,
                          "resamples": resamples, "down_to": down_to, "k": k,
                          "checkpoint": args.checkpoint},
                         {"seed": args.seed}, report_obj.to_dict())
    write_report(os.path.join(out_dir, "stability_report.json"), report)
    rows = []
    for name, vals in report_obj.methods.items():
        for n, v in zip(report_obj.n_grid, vals):
            rows.append([n, name, "" if v is None else v])
    write_csv(os.path.join(out_dir, "stability_report.csv"),
              ["n", "method", "avg_pairwise_chamfer"], rows)
    print("stability benchmark written to", out_dir)
    return 0


def cmd_flow_curve(args) -> int:
    cfg, out_dir = _load_common(args)
    if not args.checkpoint or not args.data:
        raise SceneFlowError("flow-curve requires --checkpoint and --data")
    params, net_cfg = _load_flow_checkpoint(args.checkpoint)
    pairs = load_pairs(args.data)
    edges = _float_list(cfg, "bin_edges", (0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0))
    seeds = _spawn_seeds(args.seed, len(pairs))
    preds, gts = [], []
    for i, pair in enumerate(pairs):
        outs, _ = flow_forward(pair.cloud1, pair.cloud2, params, net_cfg, seeds[i])
        preds.append(outs[-1].flow.numpy())
        gts.append(pair.gt_flow)
    stats = magnitude_binned_error(np.concatenate(preds), np.concatenate(gts), edges)
    metrics = {"bins": [{"lower": s.lower, "upper": s.upper,
                         "mean_relative_error": s.mean_relative_error,
                         "count": s.count} for s in stats]}
    report = make_report("flow-curve", net_cfg.to_dict(),
                         {"seed": args.seed}, metrics)
    write_report(os.path.join(out_dir, "flow_curve.json"), report)
    write_csv(os.path.join(out_dir, "flow_curve.csv"),
              ["bin_lower", "bin_upper", "mean_relative_error", "count"],
              [[s.lower, s.upper,
                "" if s.mean_relative_error is None else s.mean_relative_error,
                s.count] for s in stats])
    print("flow curve written to", out_dir)
    return 0


def cmd_gradcheck(args) -> int:
    from .geometry import PointCloud as PC

    cfg, _ = _load_common(args)
    rng = np.random.default_rng(args.seed)
    config = NetworkConfig(
        n_points=64, down_ratios=(4, 2, 2), k=4, ta_cap=4,
        radius1=2.0, radius2=1.0, spatial_width=8, temporal_width=8,
        encoder_widths=(8, 8), upconv_width=8, pointwise_width=8,
    )
    cloud1 = PC(points=rng.normal(size=(64, 3)))
    cloud2 = PC(points=cloud1.points + 0.1 * rng.normal(size=(64, 3)))
    gt_flow = rng.normal(size=(64, 3)) * 0.1
    gt_mask = rng.uniform(size=64) > 0.3
    params = init_flow_parameters(config, args.seed)
    # jitter every parameter (biases start at zero) so no pre-activation
    # sits exactly on a ReLU kink, where central differences are undefined
    for _, t in params.tensors():
        t.data += 0.05 * rng.normal(size=t.data.shape)

    def build_loss():
        outs, _ = flow_forward(cloud1, cloud2, params, config, args.seed)
        loss, _ = flow_loss(outs, gt_flow, gt_mask, config.mu, config.lam)
        return loss

    worst = gradient_check(build_loss, params.tensors(), sample_limit=2, rng=rng)
    print(f"max relative gradient error: {worst:.3e}")
    return 0 if worst < 1e-4 else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sceneflow",
        description="Point-cloud scene flow: data generation, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None,
                       help="key=value config file")
        p.add_argument("--out", type=str, default=None, help="output directory")
        for flag, kwargs in extra.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=fn)
        return p

    add("gen-scenes", cmd_gen_scenes)
    add("gen-pairs", cmd_gen_pairs)
    add("train", cmd_train, **{
        "--task": {"choices": ["flow", "segmentation"], "default": "flow"},
        "--data": {"type": str, "default": None},
    })
    add("eval", cmd_eval, **{
        "--checkpoint": {"type": str, "default": None},
        "--data": {"type": str, "default": None},
    })
    add("stability", cmd_stability, **{
        "--checkpoint": {"type": str, "default": None},
    })
    add("flow-curve", cmd_flow_curve, **{
        "--checkpoint": {"type": str, "default": None},
        "--data": {"type": str, "default": None},
    })
    add("gradcheck", cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SceneFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
