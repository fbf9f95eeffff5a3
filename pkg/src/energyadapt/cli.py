"""Command-line front end: ``gen | train | eval | sweep | trace``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("energyadapt")

CHECKPOINT_NAME = "model.eadapt"
LOSS_FIELDS = ["step", "iteration", "domain", "classification", "kl", "pos_energy", "neg_energy", "adapted", "total"]


class UsageError(Exception):
    pass


def _limit_threads(n):
    # Only effective before numpy loads its BLAS; the CLI imports numpy lazily for this reason.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


class Manifest:
    """Run record written next to the outputs as ``manifest.json``."""

    def __init__(self, command, out_dir, cfg, seed):
        self.out_dir = Path(out_dir)
        self.data = {
            "command": command,
            "seed": seed,
            "config": cfg.to_dict() if cfg is not None else None,
            "config_hash": cfg.hash() if cfg is not None else None,
            "inputs": {},
            "outputs": [],
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
        }

    def input(self, path):
        self.data["inputs"][str(path)] = _sha256(path)

    def output(self, path):
        p = str(path)
        if p not in self.data["outputs"]:
            self.data["outputs"].append(p)

    def close(self, status):
        self.data["status"] = status
        self.data["finished_at"] = _now()
        path = self.out_dir / f"manifest-{self.data['command']}.json"
        self.output(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --------------------------------------------------------------------------
# argument parsing

def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_strs(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.iterations=10")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="energyadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="write the synthetic benchmark as CSV files")

    p = sub.add_parser("train", parents=[common], help="train a model bundle")
    p.add_argument("--data", help="directory with sources_train.csv (default: generate from the config)")
    p.add_argument("--iterations", type=int, help="training iterations M")
    p.add_argument("--resume", help="checkpoint to continue training from")

    def add_eval_inputs(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", help="feature CSV to evaluate (default: regenerate from the checkpoint's config)")
        q.add_argument("--split", choices=("targets", "heldout"), default="targets",
                       help="which generated split to use when --data is not given")
        q.add_argument("--limit", type=int, help="evaluate only the first N rows")
        q.add_argument("--chains", type=int, help="chains per source domain (N)")

    p = sub.add_parser("eval", parents=[common], help="adapt and classify a target set")
    add_eval_inputs(p)
    p.add_argument("--steps", type=int, help="Langevin steps K")
    p.add_argument("--latent", choices=("none", "prior", "oracle"))
    p.add_argument("--aggregation", action="append", help="aggregation mode (repeatable)")

    p = sub.add_parser("sweep", parents=[common], help="energy and accuracy against step count")
    add_eval_inputs(p)
    p.add_argument("--steps", type=_csv_ints, help="comma-separated step counts")
    p.add_argument("--modes", type=_csv_strs, help="comma-separated latent modes")

    p = sub.add_parser("trace", parents=[common], help="export per-step chains of chosen samples")
    add_eval_inputs(p)
    p.add_argument("--sample-ids", type=_csv_ints, required=True, help="comma-separated row indices")
    p.add_argument("--steps", type=int, help="Langevin steps K")
    p.add_argument("--latent", choices=("none", "prior", "oracle"))
    return parser


# --------------------------------------------------------------------------
# config assembly

def _run_config(args, base=None):
    from . import config as C
    if args.config:
        data = C.load(args.config)
    else:
        data = base or {}
    data = C.apply_overrides(data, args.set)
    if args.seed is not None:
        data["seed"] = args.seed
    return C.from_dict(data)


def _load_bundle(path):
    from .checkpoint import ContainerError
    from .trainer import ModelBundle
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return ModelBundle.load(path)
    except (ContainerError, KeyError) as exc:
        raise RuntimeError(f"{path}: unreadable checkpoint: {exc}") from None


def _eval_inputs(args, bundle, cfg, manifest):
    """Features, labels, per-row domain ids and angles for eval-style commands."""
    import numpy as np

    from .data import load_feature_csv, make_benchmark
    if args.data:
        if not Path(args.data).is_file():
            raise UsageError(f"data file not found: {args.data}")
        manifest.input(args.data)
        sets = load_feature_csv(args.data)
    else:
        bm = make_benchmark(cfg.benchmark, cfg.seed, cfg.holdout)
        sets = bm.targets if args.split == "targets" else bm.held_out
    x = np.concatenate([d.features for d in sets])
    y = np.concatenate([d.labels for d in sets])
    dom = np.concatenate([np.full(len(d), d.domain) for d in sets])
    angles = {int(d.domain): d.angle for d in sets}
    if x.shape[1] != bundle.config.input_dim:
        raise RuntimeError(f"data has {x.shape[1]} features but the checkpoint expects {bundle.config.input_dim}")
    if len(y) and (y.min() < 0 or y.max() >= bundle.num_classes):
        raise RuntimeError(f"labels must lie in [0, {bundle.num_classes})")
    if args.limit is not None:
        x, y, dom = x[:args.limit], y[:args.limit], dom[:args.limit]
    return x, y, dom, angles


# --------------------------------------------------------------------------
# commands

def cmd_gen(args, out):
    from .data import make_benchmark, save_feature_csv
    cfg = _run_config(args)
    manifest = Manifest("gen", out, cfg, cfg.seed)
    try:
        if args.config:
            manifest.input(args.config)
        bm = make_benchmark(cfg.benchmark, cfg.seed, cfg.holdout)
        for name, sets in (("sources_train", bm.sources), ("sources_heldout", bm.held_out), ("targets", bm.targets)):
            path = out / f"{name}.csv"
            save_feature_csv(path, sets)
            manifest.output(path)
        status = "ok"
    except BaseException:
        status = "failed"
        raise
    finally:
        manifest.close(status)
    print(f"wrote {len(bm.sources)} source and {len(bm.targets)} target domains to {out}")


def cmd_train(args, out):
    from .data import load_feature_csv, make_benchmark
    from .trainer import ModelBundle, TrainingDiverged, train

    if args.iterations is not None:
        args.set = [*args.set, f"train.iterations={args.iterations}"]
    base = None
    if args.resume and not args.config:
        prev = _load_bundle(args.resume)
        base = prev.meta.get("run_config")
    cfg = _run_config(args, base)
    manifest = Manifest("train", out, cfg, cfg.seed)
    ckpt = out / CHECKPOINT_NAME
    loss_path = out / "losses.csv"
    status = "failed"
    try:
        if args.config:
            manifest.input(args.config)
        if args.data:
            path = Path(args.data) / "sources_train.csv"
            if not path.is_file():
                raise UsageError(f"missing training file {path}")
            manifest.input(path)
            sources = sorted(load_feature_csv(path), key=lambda d: d.domain)
        else:
            sources = make_benchmark(cfg.benchmark, cfg.seed, cfg.holdout).sources
        dim = sources[0].dim
        num_classes = int(max(d.labels.max() for d in sources if len(d)) + 1)
        cfg.model.input_dim = dim
        cfg.model.num_classes = max(cfg.model.num_classes, num_classes)

        if args.resume:
            manifest.input(args.resume)
            bundle = _load_bundle(args.resume)
            if bundle.num_domains != len(sources) or bundle.config.input_dim != dim:
                raise RuntimeError("checkpoint does not match the training data (domain count or feature dim)")
        else:
            bundle = ModelBundle(cfg.model, len(sources), seed=cfg.seed,
                                 buffer_capacity=cfg.train.buffer_capacity,
                                 buffer_probability=cfg.train.buffer_probability)
        bundle.source_ids = [int(d.domain) for d in sources]
        meta = {"run_config": cfg.to_dict(), "source_angles": [d.angle for d in sources]}

        manifest.output(loss_path)
        with open(loss_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_FIELDS)
            step = [bundle.iteration * bundle.num_domains]

            def on_step(rec):
                w.writerow([step[0], rec["iteration"], rec["domain"],
                            *[repr(float(rec[k])) for k in LOSS_FIELDS[3:]]])
                step[0] += 1
                if rec["domain"] == bundle.num_domains - 1 and args.verbose:
                    log.info("iteration %d total %.4f", rec["iteration"], rec["total"])

            try:
                train(bundle, sources, cfg.train, on_step=on_step)
            except TrainingDiverged:
                fh.flush()
                raise
        bundle.save(ckpt, meta)
        manifest.output(ckpt)
        status = "ok"
    finally:
        manifest.close(status)
    print(f"trained {bundle.num_domains} domain models for {bundle.iteration} iterations -> {ckpt}")


def _metrics(preds, dom, angles, aggregations, centroids):
    import numpy as np
    out = {"num_samples": int(len(preds)), "overall": {}, "per_domain": {}}

    def accs(mask):
        sub = {}
        for stage, adapted in (("pre", False), ("post", True)):
            probs = preds.post if adapted else preds.pre
            sub[stage] = {}
            for a in aggregations:
                from .inference import aggregate
                p = aggregate(probs[mask], a, preds.features[mask], centroids)
                sub[stage][a] = float(np.mean(p.argmax(axis=-1) == preds.labels[mask])) if mask.any() else None
        return sub

    out["overall"] = accs(np.ones(len(preds), dtype=bool))
    for d in sorted(set(int(v) for v in dom)):
        mask = dom == d
        out["per_domain"][str(d)] = {"angle": angles.get(d), "num_samples": int(mask.sum()), **accs(mask)}
    out["per_source"] = {"pre": [float(v) for v in preds.per_source_accuracy(False)],
                         "post": [float(v) for v in preds.per_source_accuracy(True)]}
    out["energy"] = {"pre": float(preds.energy_pre.mean()), "post": float(preds.energy_post.mean())}
    return out


def cmd_eval(args, out):
    import numpy as np

    from .inference import NotTrained, predict, write_predictions_csv
    bundle = _load_bundle(args.checkpoint)
    overrides = []
    if args.steps is not None:
        overrides.append(f"eval.num_steps={args.steps}")
    if args.chains is not None:
        overrides.append(f"eval.num_chains={args.chains}")
    if args.latent:
        overrides.append(f"eval.latent_mode={args.latent}")
    if args.aggregation:
        overrides.append("eval.aggregations=" + json.dumps(args.aggregation))
    args.set = [*args.set, *overrides]
    cfg = _run_config(args, bundle.meta.get("run_config"))
    manifest = Manifest("eval", out, cfg, cfg.seed)
    status = "failed"
    try:
        manifest.input(args.checkpoint)
        x, y, dom, angles = _eval_inputs(args, bundle, cfg, manifest)
        sgld = cfg.sgld_for_eval()
        try:
            preds = predict(bundle, x, sgld, cfg.eval.num_chains, cfg.eval.latent_mode, cfg.seed,
                            labels=y, sample_ids=np.arange(len(y)))
        except NotTrained as exc:
            raise RuntimeError(str(exc)) from None
        metrics = {
            "checkpoint_sha256": _sha256(args.checkpoint),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "num_steps": sgld.num_steps,
            "num_chains": cfg.eval.num_chains,
            "latent_mode": cfg.eval.latent_mode,
            "source_ids": [int(s) for s in bundle.source_ids],
            **_metrics(preds, dom, angles, cfg.eval.aggregations, bundle.domain_centroids),
        }
        mpath, ppath = out / "metrics.json", out / "predictions.csv"
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.output(mpath)
        write_predictions_csv(ppath, preds)
        manifest.output(ppath)
        status = "ok"
    finally:
        manifest.close(status)
    print(_summary(metrics))


def _summary(m):
    lines = [f"{'domain':>8} {'angle':>6} {'n':>6} {'aggregation':>16} {'pre':>7} {'post':>7}"]
    rows = [("all", None, m["num_samples"], m["overall"])]
    rows += [(k, v["angle"], v["num_samples"], v) for k, v in m["per_domain"].items()]
    for name, angle, n, acc in rows:
        for a in acc["pre"]:
            ang = "" if angle is None else f"{angle:g}"
            lines.append(f"{name:>8} {ang:>6} {n:>6} {a:>16} {acc['pre'][a]:7.4f} {acc['post'][a]:7.4f}")
    lines.append("per-source post: " + " ".join(f"{v:.4f}" for v in m["per_source"]["post"]))
    return "\n".join(lines)


def cmd_sweep(args, out):
    import numpy as np

    from .inference import NotTrained, step_sweep, write_sweep_csv
    bundle = _load_bundle(args.checkpoint)
    overrides = []
    if args.steps is not None:
        overrides.append("sweep.steps=" + json.dumps(args.steps))
    if args.modes is not None:
        overrides.append("sweep.modes=" + json.dumps(args.modes))
    if args.chains is not None:
        overrides.append(f"eval.num_chains={args.chains}")
    args.set = [*args.set, *overrides]
    cfg = _run_config(args, bundle.meta.get("run_config"))
    manifest = Manifest("sweep", out, cfg, cfg.seed)
    status = "failed"
    try:
        manifest.input(args.checkpoint)
        x, y, _, _ = _eval_inputs(args, bundle, cfg, manifest)
        try:
            rows = step_sweep(x, y, bundle, cfg.sweep.steps, cfg.sweep.modes, cfg.train.sgld,
                              cfg.eval.num_chains, cfg.seed, np.arange(len(y)))
        except NotTrained as exc:
            raise RuntimeError(str(exc)) from None
        path = out / "sweep.csv"
        write_sweep_csv(path, rows)
        manifest.output(path)
        status = "ok"
    finally:
        manifest.close(status)
    for r in rows:
        print(f"{r['mode']:>7} {r['steps']:>5} energy {r['mean_energy']:.4f} accuracy {r['accuracy']:.4f}")


def cmd_trace(args, out):
    from .inference import NotTrained, predict_sample
    from .sgld import AdaptationTrace
    bundle = _load_bundle(args.checkpoint)
    overrides = []
    if args.steps is not None:
        overrides.append(f"eval.num_steps={args.steps}")
    if args.latent:
        overrides.append(f"eval.latent_mode={args.latent}")
    args.set = [*args.set, *overrides]
    cfg = _run_config(args, bundle.meta.get("run_config"))
    manifest = Manifest("trace", out, cfg, cfg.seed)
    status = "failed"
    try:
        manifest.input(args.checkpoint)
        x, y, _, _ = _eval_inputs(args, bundle, cfg, manifest)
        sgld = cfg.sgld_for_eval()
        for sid in args.sample_ids:
            if not 0 <= sid < len(y):
                raise UsageError(f"sample id {sid} out of range [0, {len(y)})")
            try:
                rec = predict_sample(x[sid], bundle, sgld, 1, cfg.eval.latent_mode, cfg.seed,
                                     sample_id=sid, label=int(y[sid]), record_trace=True)
            except NotTrained as exc:
                raise RuntimeError(str(exc)) from None
            for i, tr in enumerate(rec.traces):
                path = out / f"trace_s{sid}_src{i}.csv"
                AdaptationTrace(list(tr["features"]), list(tr["energy"]), list(tr["probs"])).to_csv(path)
                manifest.output(path)
        status = "ok"
    finally:
        manifest.close(status)
    print(f"wrote traces for {len(args.sample_ids)} sample(s) to {out}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "trace": cmd_trace}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        _limit_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .config import ConfigError
    from .data import FeatureFileError
    from .trainer import TrainingDiverged

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (FeatureFileError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
