"""patientmesh command line.

Exit codes: 0 ok, 1 unexpected error, 2 configuration, 3 data format,
4 numeric abort (non-finite loss, failed gradient check), 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .body_model import load_model, make_mini_model, model_digest, pose, save_model
from .errors import (ConfigError, DataFormatError, NumericAbortError, PatientMeshError,
                     VisibilityRejectionError)
from .fusion import run_simulation, save_classifier
from .heatmap import HeatmapStack
from .isocenter import estimate, load_calibration, region_mask
from .regressor import (JointFK, evaluate, fit_input_normalization, grad_check, infer_mesh, init_net,
                        jitter_augment, load_checkpoint, predict, record_transform, save_checkpoint,
                        spec_for, train, write_loss_curve)
from .metrics import write_reports_csv
from .synthgen import (build_pose_bank, generate_dataset, load_dataset, read_manifest, record_rng,
                       sample_pair)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4, 5


def say(msg):
    print(msg, flush=True)


def warn(msg):
    print(f"warning: {msg}", file=sys.stderr, flush=True)


def get_model(doc):
    src = doc["model"]["source"]
    return make_mini_model(int(doc["model"]["seed"])) if src == "mini" else load_model(src)


def get_bank(doc, model):
    b = doc["pose_bank"]
    return build_pose_bank(b["source"], int(b["seed"]), int(b["n"]), model)


def _out_dir(doc, given, default):
    path = Path(given) if given else C.output_root(doc) / default
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(doc, out=None):
    model = get_model(doc)
    bank = get_bank(doc, model)
    cfg = C.gen_config(doc)
    out = _out_dir(doc, out, "data")
    manifest = generate_dataset(model, bank, cfg, out, extra={"pipeline_config_hash": C.hash_of(doc)})
    say(f"dataset: {manifest['total']} records in {len(manifest['shards'])} shard(s) -> {out}")
    say(f"dataset hash: {manifest['config_hash']}  seed: {manifest['seed']}")
    return out / "manifest.json"


def _load_training_data(doc, data, model, tcfg):
    _, manifest = read_manifest(data)
    h = manifest["heatmap"]
    spec = spec_for(tcfg, manifest["n_keypoints"], tuple(h["resolution"]), h["stride"], h["origin"])
    ds = load_dataset(data, model, record_transform(spec))
    return spec, ds, h


def cmd_train(doc, data, out=None, heldout=None):
    model = get_model(doc)
    tcfg = C.train_config(doc)
    spec, ds, h = _load_training_data(doc, data, model, tcfg)
    say(f"training on {len(ds.ids)} records, input {spec['kind']}")
    net = init_net(spec, tcfg.hidden, tcfg.seed)
    fit_input_normalization(net, ds.heatmaps)
    fk = JointFK(model)
    eval_fn = None
    if heldout:
        _, hd, _ = _load_training_data(doc, heldout, model, tcfg)
        intr = C.intrinsics(doc)

        def eval_fn(n, epoch):
            th, be = predict(n, hd.heatmaps)
            rep = evaluate(model, th, be, hd.theta, hd.beta, hd.extrinsics, intr, doc["eval"]["pck_alpha"])
            return {"heldout_pa_mpjpe_mm": rep.pa_mpjpe, "heldout_mpjpe_3d_mm": rep.mpjpe_3d}
    augment = None
    if tcfg.augment and tcfg.jitter_px > 0:
        augment = jitter_augment(spec, ds.keypoints, float(h["sigma"]), tcfg.jitter_px)
    res = train(net, ds.heatmaps, ds.theta, ds.beta, fk, tcfg, eval_fn=eval_fn, augment=augment,
                log=lambda r: say("  " + "  ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}"
                                                   for k, v in r.items())))
    out = _out_dir(doc, out, "train")
    ckpt = out / "regressor.ckpt"
    save_checkpoint(net, ckpt, C.hash_of(doc, "train"),
                    extra={"model_digest": model_digest(model), "dataset": str(data)})
    write_loss_curve(out / "loss_curve.csv", res.rows)
    if tcfg.lr == 0 or res.losses[-1] >= res.losses[0]:
        warn("training loss did not decrease (flat loss curve)")
    say(f"checkpoint: {ckpt}  ({res.seconds:.1f} s)")
    return ckpt


def cmd_eval(doc, checkpoint, data, out=None, oracle=False):
    model = get_model(doc)
    root, manifest = read_manifest(data)
    h = manifest["heatmap"]
    if oracle:
        ds = load_dataset(data, model, lambda g: np.zeros(0, np.float32))
        th, be = ds.theta, ds.beta
    else:
        net, header = load_checkpoint(checkpoint)
        spec = net.input_spec
        if spec["n_keypoints"] != manifest["n_keypoints"] or list(spec["resolution"]) != list(h["resolution"]):
            raise DataFormatError(
                f"checkpoint expects N_J={spec['n_keypoints']} at {spec['resolution']}, dataset has "
                f"N_J={manifest['n_keypoints']} at {h['resolution']}")
        ds = load_dataset(data, model, record_transform(spec))
        th, be = predict(net, ds.heatmaps)
    rep = evaluate(model, th, be, ds.theta, ds.beta, ds.extrinsics, C.intrinsics(doc),
                   doc["eval"]["pck_alpha"])
    out = _out_dir(doc, out, "eval")
    path = out / "metrics.csv"
    write_reports_csv(path, rep.rows(str(root)))
    for r in rep.rows():
        say(f"  {r['metric']:>9s} = {r['value']:.4f} {r['units']}")
    return path


def simulation_keypoints(doc, model, frames):
    bank = get_bank(doc, model)
    cfg = C.gen_config(doc)
    seed = int(doc["fusion"]["pose_seed"])
    pairs = [sample_pair(model, bank, cfg, record_rng(seed, i), i) for i in range(frames)]
    return (np.array([p.keypoints_2d.coords for p in pairs]),
            np.array([p.keypoints_2d.visibility for p in pairs]))


def cmd_fuse_sim(doc, out=None):
    model = get_model(doc)
    fcfg = C.fusion_config(doc)
    coords, vis = simulation_keypoints(doc, model, fcfg.frames)
    report, clf = run_simulation(coords, vis, fcfg)
    report["config_hash"] = C.hash_of(doc, "fusion", "heatmap", "gen", "camera", "pose_bank", "model")
    out = _out_dir(doc, out, "fusion")
    (out / "fusion_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    save_classifier(clf, out / "fusion_classifier.json")
    for k in ("classifier_accuracy", "mpjpe_first_px", "mpjpe_second_px", "mpjpe_fused_px"):
        say(f"  {k} = {report[k]:.4f}")
    return out / "fusion_report.json"


def load_heatmap_file(path):
    """``.npz`` with ``grids`` (N_J, H, W) and optional ``stride``/``origin``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"heatmap file not found: {path}")
    try:
        with np.load(path) as z:
            grids = np.asarray(z["grids"], float)
            stride = float(z["stride"]) if "stride" in z else 10.0
            origin = tuple(np.asarray(z["origin"], float)) if "origin" in z else (0.0, -80.0)
    except (ValueError, KeyError, OSError) as exc:
        raise DataFormatError(f"{path}: unreadable heatmap file ({exc})") from exc
    if grids.ndim != 3:
        raise DataFormatError(f"{path}: grids must be (N_J, H, W), got {grids.shape}")
    return HeatmapStack(grids, stride, origin)


def cmd_isocenter(doc, checkpoint, heatmaps, calibration, region, params=None, rest=True):
    model = get_model(doc)
    calib_path = calibration or doc["isocenter"]["calibration"]
    if not calib_path:
        raise ConfigError("no calibration file given (--calibration or isocenter.calibration)")
    calib = load_calibration(calib_path)
    reg = region_mask(model, region or doc["isocenter"]["region"])
    if params:
        with np.load(params) as z:
            body = pose(model, z["theta"], z["beta"])
    else:
        if not checkpoint or not heatmaps:
            raise ConfigError("isocenter needs --checkpoint and --heatmaps (or --params)")
        net, _ = load_checkpoint(checkpoint)
        body = infer_mesh(net, load_heatmap_file(heatmaps), model)
    res = estimate(body, reg, calib, rest=rest)
    say(f"region: {res.region}")
    say(f"thickness_mm: {res.thickness_mm:.3f}")
    say(f"center_height_mm: {res.center_height_mm:.3f}")
    say(f"isocenter_height_mm: {res.isocenter_height_mm:.3f}")
    say(f"table_displacement_mm: {res.displacement_mm:.3f}")
    return res


def cmd_grad_check(doc, checkpoint=None, samples=10, tolerance=1e-4, seed=0):
    model = get_model(doc)
    tcfg = C.train_config(doc)
    if checkpoint:
        net, _ = load_checkpoint(checkpoint)
    else:
        h = C.heatmap_params(doc)
        net = init_net(spec_for(tcfg, model.num_keypoints, h.resolution, h.stride, h.origin),
                       tcfg.hidden, tcfg.seed)
    bank = get_bank(doc, model)
    gcfg = C.gen_config(doc)
    fk = JointFK(model)
    from .regressor import encode_inputs
    worst = 0.0
    for i in range(samples):
        p = sample_pair(model, bank, gcfg, record_rng(seed, i), i)
        x = encode_inputs(p.heatmaps.grids, net.input_spec, np.float64)
        rep = grad_check(net, (x, p.theta[None], p.beta[None]), fk, tolerance, tcfg.weights, seed=i)
        say(f"  sample {i}: max rel error {rep.max_rel_error:.3e} over {rep.n_checked} entries")
        worst = max(worst, rep.max_rel_error)
    say(f"max relative error: {worst:.3e} (tolerance {tolerance:g})")
    if worst >= tolerance:
        raise NumericAbortError(f"gradient check failed: {worst:.3e} >= {tolerance:g}")
    return worst


def cmd_make_mini_model(doc, out=None, seed=None):
    model = make_mini_model(int(doc["model"]["seed"] if seed is None else seed))
    path = Path(out) if out else _out_dir(doc, None, "model") / "mini_model.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    say(f"model: V={model.num_vertices} F={len(model.faces)} digest={model_digest(model)} -> {path}")
    return path


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="patientmesh", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.lr=0.01 (repeatable)")
    common.add_argument("--out", help="output directory (default: <output root>/<command>)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate synthetic training shards")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)

    t = sub.add_parser("train", parents=[common], help="train the regressor")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--heldout", help="dataset evaluated after every epoch")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--oracle", action="store_true", help="use ground-truth parameters as predictions")

    f = sub.add_parser("fuse-sim", parents=[common], help="two-branch fusion simulation")
    f.add_argument("--frames", type=int)
    f.add_argument("--seed", type=int)

    i = sub.add_parser("isocenter", parents=[common], help="thickness and table displacement")
    i.add_argument("--checkpoint")
    i.add_argument("--heatmaps", help=".npz with grids (N_J, H, W), stride, origin")
    i.add_argument("--params", help=".npz with theta and beta (bypasses the network)")
    i.add_argument("--calibration")
    i.add_argument("--region")
    i.add_argument("--no-rest", action="store_true", help="do not lower the body onto the table")

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    c.add_argument("--checkpoint")
    c.add_argument("--samples", type=int, default=10)
    c.add_argument("--tolerance", type=float, default=1e-4)

    m = sub.add_parser("make-mini-model", parents=[common], help="write the MiniBody model file")
    m.add_argument("--seed", type=int)
    return p


def _overrides(args):
    ov = [C.parse_override(s) for s in args.set]
    shortcuts = {
        "gen-data": {"count": "gen.count", "seed": "gen.seed", "workers": "gen.workers"},
        "train": {"lr": "train.lr", "epochs": "train.epochs", "seed": "train.seed"},
        "fuse-sim": {"frames": "fusion.frames", "seed": "fusion.seed"},
    }.get(args.command, {})
    for attr, key in shortcuts.items():
        v = getattr(args, attr, None)
        if v is not None:
            ov.append((key, v))
    return ov


def run(argv=None):
    args = build_parser().parse_args(argv)
    doc = C.load_config(args.config, _overrides(args))
    say(f"{args.command}: config hash {C.hash_of(doc)}")
    cmd = args.command
    if cmd == "gen-data":
        return cmd_gen_data(doc, args.out)
    if cmd == "train":
        return cmd_train(doc, args.data, args.out, args.heldout)
    if cmd == "eval":
        if not args.oracle and not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        return cmd_eval(doc, args.checkpoint, args.data, args.out, args.oracle)
    if cmd == "fuse-sim":
        return cmd_fuse_sim(doc, args.out)
    if cmd == "isocenter":
        return cmd_isocenter(doc, args.checkpoint, args.heatmaps, args.calibration, args.region,
                             args.params, rest=not args.no_rest)
    if cmd == "grad-check":
        return cmd_grad_check(doc, args.checkpoint, args.samples, args.tolerance)
    if cmd == "make-mini-model":
        return cmd_make_mini_model(doc, args.out, args.seed)
    raise ConfigError(f"unknown command {cmd}")


def main(argv=None):
    try:
        run(argv)
    except (ConfigError, VisibilityRejectionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbortError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PatientMeshError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
