"""Command-line surface: generate, prepare, pretrain, evaluate, export, plot.

Every command writes into a run directory (default: runs/<cmd>-<timestamp>,
override with --out) and serializes its merged configuration there, so a run
is reproducible from its own output.  Exit codes: 0 success, 1 usage error,
2 data/format error, 3 numerical failure.
"""

import argparse
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from terralign import contrastive, encoders, synthdrive, tasks
from terralign import trajectory as tj
from terralign.errors import DataError, NumericalError, UsageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _log(msg):
    print(msg, flush=True)


def _run_dir(args, command):
    if args.out:
        out = Path(args.out)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"config file is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise DataError("config file must hold a JSON object")
    return doc


def _section(doc, name):
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise DataError(f"config section {name!r} must be an object")
    return dict(section)


def _write_run_config(out_dir, command, sections):
    doc = {"command": command, **sections}
    (Path(out_dir) / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _require_path(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _build_synth_config(args, file_doc):
    kw = _section(file_doc, "synth")
    if args.seed is not None:
        kw["seed"] = args.seed
    for flag in ("duration", "classes"):
        v = getattr(args, flag, None)
        if v is not None:
            kw["duration_s" if flag == "duration" else "classes"] = v
    return synthdrive.SynthConfig(**kw)


def _build_train_config(args, file_doc):
    kw = _section(file_doc, "train")
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        kw["epochs"] = args.epochs
    if getattr(args, "batch", None) is not None:
        kw["batch_size"] = args.batch
    return contrastive.TrainConfig(**kw)


def _build_predictor_config(args, file_doc):
    kw = _section(file_doc, "predictor")
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        kw["epochs"] = args.epochs
    return tasks.PredictorConfig(**kw)


def _model_config(file_doc, dataset, mask_action=False):
    kw = _section(file_doc, "model")
    obs_shape = dataset.manifest.obs_shape
    loco_shape = dataset.manifest.loco_shape
    act_shape = dataset.manifest.act_shape
    obs = encoders.ObsEncoderConfig(height=obs_shape[0], width=obs_shape[1])
    loco = encoders.SeqEncoderConfig(in_channels=loco_shape[1])
    act = encoders.SeqEncoderConfig(in_channels=act_shape[1], channels=(16, 32, 64, 64))
    return encoders.ModelConfig(
        obs=obs, loco=loco, act=act, window=loco_shape[0], mask_action=mask_action, **kw
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    file_doc = _load_config_file(args.config)
    cfg = _build_synth_config(args, file_doc)
    out = _run_dir(args, "synth")
    _write_run_config(out, "synth", {"synth": asdict(cfg), "n_traj": args.n_traj,
                                     "train_frac": args.train_frac})
    data = synthdrive.generate_dataset(
        cfg, args.n_traj, split_ratios=(args.train_frac, 1.0 - args.train_frac),
        out_dir=out, log=_log,
    )
    _log(f"wrote {len(data['train'])} train / {len(data['test'])} test triplets to {out}")
    return EXIT_OK


def cmd_prepare(args):
    raw_root = _require_path(args.raw, "raw trajectory directory")
    out = _run_dir(args, "prepare")
    _write_run_config(out, "prepare", {"raw": str(raw_root), "split": args.split})
    samples = []
    rates = {"hi_hz": 400.0, "lo_hz": 40.0, "cam_hz": 10.0}
    traj_dirs = sorted(p.parent for p in raw_root.glob("*/trajectory.json"))
    if not traj_dirs:
        raise UsageError(f"no */trajectory.json found under {raw_root}")
    for tdir in traj_dirs:
        traj = load_raw_trajectory(tdir)
        synced = tj.synchronize(traj, **rates)
        samples.extend(tj.window_triplets(synced))
    dataset = tj.TripletDataset.from_samples(samples, rates, split=args.split, seed=0)
    tj.save_dataset(dataset, out / args.split)
    _log(f"prepared {len(dataset)} triplets from {len(traj_dirs)} trajectories into {out / args.split}")
    return EXIT_OK


def load_raw_trajectory(tdir):
    """Read one raw trajectory directory (trajectory.json + stream blobs)."""
    tdir = Path(tdir)
    doc = json.loads((tdir / "trajectory.json").read_text())
    streams = {}
    for name in ("obs", "loco", "act"):
        meta = doc["streams"][name]
        values = np.fromfile(tdir / f"{name}.f32", dtype="<f4")
        times = np.fromfile(tdir / f"{name}_t.f64", dtype="<f8")
        channels = int(meta["channels"])
        if len(times) * channels != values.size:
            raise DataError(f"{tdir}/{name}: blob size inconsistent with timestamps")
        streams[name] = tj.ModalityStream(
            name, float(meta["rate_hz"]), times, values.reshape(len(times), channels)
        )
    return tj.Trajectory(
        obs=streams["obs"],
        loco=streams["loco"],
        action=streams["act"],
        image_shape=tuple(doc["image_shape"]),
        source_id=doc.get("source_id", tdir.name),
    )


def cmd_pretrain(args):
    data_dir = _require_path(args.data, "dataset directory")
    dataset = tj.load_dataset(data_dir)
    file_doc = _load_config_file(args.config)
    train_cfg = _build_train_config(args, file_doc)
    model_cfg = _model_config(file_doc, dataset, mask_action=args.mask_action)
    out = _run_dir(args, "pretrain")
    _write_run_config(out, "pretrain", {
        "data": str(data_dir), "train": asdict(train_cfg), "model": asdict(model_cfg),
    })
    _log(f"pretraining on {len(dataset)} triplets ({'masked actions' if args.mask_action else 'full'})")
    ckpt, curve = contrastive.pretrain(dataset, model_cfg, train_cfg, out_dir=out, log=_log)
    _log(f"final normalized loss {curve[-1]['loss_norm']:.4f}; checkpoints under {out}")
    return EXIT_OK


def cmd_eval_retrieval(args):
    ckpt = encoders.load_checkpoint(_require_path(args.ckpt, "checkpoint"))
    dataset = tj.load_dataset(_require_path(args.data, "dataset directory"))
    ks = tuple(int(k) for k in args.ks.split(","))
    directions = ("m2s", "s2m") if args.direction == "both" else (args.direction,)
    out = _run_dir(args, "eval-retrieval")
    _write_run_config(out, "eval-retrieval", {
        "ckpt": str(args.ckpt), "data": str(args.data), "ks": list(ks),
        "direction": args.direction,
    })
    rows = []
    for direction in directions:
        report = tasks.eval_retrieval(ckpt, dataset, direction=direction, ks=ks)
        rows.extend(report.rows())
        accs = ", ".join(f"rank-{k} {report.accuracies[k]:.2%}" for k in report.ks)
        _log(f"{direction}: {accs} (gallery {report.gallery_size})")
    tasks.write_report(rows, out / "retrieval.jsonl", out / "retrieval_summary.csv")
    return EXIT_OK


def cmd_eval_dynamics(args):
    data_root = _require_path(args.data, "dataset root")
    train_set = tj.load_dataset(data_root / "train")
    test_set = tj.load_dataset(data_root / "test")
    file_doc = _load_config_file(args.config)
    pcfg = _build_predictor_config(args, file_doc)
    out = _run_dir(args, "eval-dynamics")
    _write_run_config(out, "eval-dynamics", {
        "data": str(data_root), "baseline": args.baseline, "predictor": asdict(pcfg),
        "ckpt": args.ckpt,
    })
    if args.baseline == "kbm":
        synth_path = data_root / "synth_config.json"
        if synth_path.exists():
            params = tasks.KBMParams.from_synth_config(json.loads(synth_path.read_text()))
        else:
            params = tasks.KBMParams()
            _log("no synth_config.json next to the dataset; using default vehicle constants")
        report = tasks.eval_kbm_dynamics(test_set, pcfg, params)
    else:
        if args.baseline == "pretrained":
            if not args.ckpt:
                raise UsageError("--baseline pretrained requires --ckpt")
            ckpt = encoders.load_checkpoint(_require_path(args.ckpt, "checkpoint"))
        else:  # scratch: randomly initialized, frozen encoder
            model_cfg = _model_config(file_doc, train_set)
            ckpt = encoders.init_params(model_cfg, pcfg.seed + 1)
        params, _curve = tasks.train_dynamics_predictor(ckpt, train_set, pcfg, log=_log)
        report = tasks.eval_learned_dynamics(params, ckpt, test_set, pcfg, baseline=args.baseline)
    _log(
        f"{report.baseline}: RMSE {report.rmse:.4f} "
        f"(position {report.rmse_position:.4f}, quaternion {report.rmse_quaternion:.4f})"
    )
    tasks.write_report(report.rows(), out / "dynamics.jsonl", out / "dynamics_summary.csv")
    return EXIT_OK


def cmd_export(args):
    ckpt = encoders.load_checkpoint(_require_path(args.ckpt, "checkpoint"))
    dataset = tj.load_dataset(_require_path(args.data, "dataset directory"))
    out = _run_dir(args, "export")
    _write_run_config(out, "export", {"ckpt": str(args.ckpt), "data": str(args.data)})
    tasks.export_embeddings(ckpt, dataset, out)
    _log(f"exported {len(dataset)} embedding rows to {out}")
    return EXIT_OK


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = _require_path(args.run, "run directory")
    made = []
    curve_path = run / "loss_curve.csv"
    if curve_path.exists():
        import csv as _csv

        with open(curve_path) as fh:
            rows = list(_csv.DictReader(fh))
        steps = [int(r["step"]) for r in rows]
        fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
        axes[0].plot(steps, [float(r["loss_norm"]) for r in rows])
        axes[0].set_ylabel("normalized loss")
        axes[1].plot(steps, [float(r["lr"]) for r in rows])
        axes[1].set_ylabel("learning rate")
        axes[2].plot(steps, [float(r["tau"]) for r in rows])
        axes[2].set_ylabel("temperature")
        axes[2].set_xlabel("step")
        fig.tight_layout()
        fig.savefig(run / "loss_curve.png", dpi=120)
        plt.close(fig)
        made.append("loss_curve.png")
    dyn_path = run / "dynamics.jsonl"
    if dyn_path.exists():
        per_step = {}
        for line in dyn_path.read_text().splitlines():
            row = json.loads(line)
            if row.get("metric") == "rmse_step":
                per_step.setdefault(row["baseline"], []).append((row["step"], row["value"]))
        if per_step:
            fig, ax = plt.subplots(figsize=(7, 4))
            for baseline, pts in sorted(per_step.items()):
                pts.sort()
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=baseline)
            ax.set_xlabel("horizon step")
            ax.set_ylabel("RMSE")
            ax.legend()
            fig.tight_layout()
            fig.savefig(run / "dynamics_error.png", dpi=120)
            plt.close(fig)
            made.append("dynamics_error.png")
    if not made:
        raise UsageError(f"nothing to plot under {run}")
    _log(f"wrote {', '.join(made)} in {run}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="terralign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory (default: runs/<cmd>-<timestamp>)")

    p = sub.add_parser("synth", help="generate a synthetic driving dataset")
    common(p)
    p.add_argument("--n-traj", type=int, default=200)
    p.add_argument("--duration", type=float, default=None, help="seconds per trajectory")
    p.add_argument("--classes", type=int, default=None, help="terrain class count")
    p.add_argument("--train-frac", type=float, default=0.75)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="synchronize and window raw trajectories")
    common(p)
    p.add_argument("--raw", required=True, help="directory of raw trajectory subdirectories")
    p.add_argument("--split", default="train", help="split tag for the output dataset")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    common(p)
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--mask-action", action="store_true",
                   help="zero the action input (simple observation<->locomotion ablation)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval-retrieval", help="cross-modal retrieval accuracy")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--direction", choices=("m2s", "s2m", "both"), default="both")
    p.add_argument("--ks", default="1,10,50")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-dynamics", help="dynamics prediction RMSE")
    common(p)
    p.add_argument("--ckpt", default=None, help="checkpoint directory (for --baseline pretrained)")
    p.add_argument("--data", required=True, help="dataset root containing train/ and test/")
    p.add_argument("--baseline", choices=("pretrained", "scratch", "kbm"), default="pretrained")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_eval_dynamics)

    p = sub.add_parser("export", help="export embedding table for a dataset")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("plot", help="render loss/error curves from a run directory")
    common(p)
    p.add_argument("--run", required=True, help="run directory holding loss_curve.csv / dynamics.jsonl")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
