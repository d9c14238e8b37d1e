"""Command-line entry point: ``btd <command> [options]``.

Every command accepts ``--config FILE`` (YAML or JSON); its keys are option
names (dashes or underscores), either flat or nested under the command name,
and act as defaults that explicit flags override. An optional top-level
``schema_version`` must equal 1. The fully resolved options are written to
``<out>/configs/<command>.json``.

Output layout under ``--out``::

    checkpoints/  scores/  reports/  samples/  configs/

Exit codes: 0 success, 1 usage/config error, 2 partial data failure,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from btd import __version__
from btd.errors import BTDError, ConfigError, ValidationError

log = logging.getLogger("btd")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_NUMERIC = 0, 1, 2, 3
ABLATION_GRID = (1, 10, 50, 100, 200)
CONFIG_SCHEMA_VERSION = 1


def _out_dir(args, sub: str) -> Path:
    d = Path(args.out) / sub
    d.mkdir(parents=True, exist_ok=True)
    return d


def _record_config(args) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg["version"] = __version__
    path = _out_dir(args, "configs") / f"{args.command}.json"
    path.write_text(json.dumps(cfg, indent=2, default=str) + "\n")


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from btd.data import Manifest, SampleRecord, save_patch, write_manifest
    from btd.tamper import FingerprintSpec, directional_kernel, foreign_fingerprint, make_corpus, synth_benign

    out = Path(args.out)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    hosts = [
        FingerprintSpec(f"SYN-{chr(ord('A') + i)}", directional_kernel(3, "horizontal", args.host_falloff),
                        args.noise_sigma * (1.0 + 0.25 * i))
        for i in range(args.scanners)
    ]
    size = args.size
    center = (size // 2, size // 2)
    if args.kind == "benign":
        patches, labels, scanners = [], [], []
        for i, host in enumerate(hosts):
            n_host = args.n // len(hosts) + (1 if i < args.n % len(hosts) else 0)
            p = synth_benign(host, n_host, seed=args.seed + i, size=size, tumor_fraction=args.tumor_fraction)
            patches.extend(p)
            scanners += [host.device_id] * n_host
        rng = np.random.default_rng(args.seed)
        labels = ["TM" if rng.random() < args.tumor_fraction else "TB" for _ in patches]
        recipes = [None] * len(patches)
    else:
        foreign = foreign_fingerprint(args.kind, noise_sigma=args.noise_sigma, falloff=args.foreign_falloff)
        corpus = make_corpus(args.kind, hosts, args.n, args.n_fake if args.n_fake is not None else args.n,
                             seed=args.seed, size=size, foreign=foreign, side=args.side)
        patches, labels, scanners, recipes = corpus.patches, corpus.labels, corpus.scanner_ids, corpus.recipes
    records = []
    for i, (p, lab, sc) in enumerate(zip(patches, labels, scanners)):
        name = f"{args.kind}_{i:06d}"
        save_patch(img_dir / f"{name}.npy", p, preview=args.preview)
        patient = f"{sc}-P{i // args.per_patient:05d}"
        records.append(SampleRecord(f"images/{name}.npy", lab, patient, sc, args.modality, center, sample_id=name))
    write_manifest(Manifest(records, args.modality), out / "manifest.jsonl")
    if any(r is not None for r in recipes):
        with (out / "recipes.jsonl").open("w") as fh:
            for rec, recipe in zip(records, recipes):
                fh.write(json.dumps({"sample_id": rec.sample_id, "recipe": recipe}) + "\n")
    print(f"wrote {len(records)} records to {out / 'manifest.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------- split


def cmd_split(args) -> int:
    from btd.data import read_manifest, split_by_patient, write_manifest

    manifest = read_manifest(args.manifest)
    train, val = split_by_patient(manifest, args.train_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in (("train", train), ("val", val)):
        m.records = m.resolved_records()
        write_manifest(m, out / f"{name}.jsonl")
    print(f"train: {len(train)} records / {len(train.patients)} patients; "
          f"val: {len(val)} records / {len(val.patients)} patients")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    from btd.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
    from btd.data import check_training_labels, load_patches, read_manifest, save_patch
    from btd.diffusion import make_schedule
    from btd.model import ModelConfig, build_model
    from btd.training import TrainConfig, init_state, train

    manifest = read_manifest(args.manifest)
    check_training_labels(manifest.records)
    tcfg = TrainConfig(args.steps, args.batch_size, args.lr, args.seed, args.log_every, args.sample_every)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.modality and ckpt.modality != manifest.modality:
            raise ValidationError(f"checkpoint modality {ckpt.modality} does not match manifest {manifest.modality}")
        model, schedule = ckpt.model, ckpt.schedule
        tcfg.seed = int(ckpt.metadata.get("seed", tcfg.seed))
        state = init_state(model, tcfg, ckpt.optimizer_state, ckpt.rng_state)
        patients = set(ckpt.metadata.get("train_patients", [])) | manifest.patients
        prior = list(ckpt.metadata.get("loss_curve", []))
    else:
        mcfg = ModelConfig(args.init_features, args.depth, 1, args.batch_size, args.patch_size)
        model = build_model(mcfg, seed=args.seed)
        schedule = make_schedule(args.T, args.beta_start, args.beta_end)
        state = init_state(model, tcfg)
        patients = manifest.patients
        prior = []
    patches = load_patches(manifest, model.config.patch_size)
    samples = _out_dir(args, "samples")

    def dump(step, x):
        for i, s in enumerate(x[:, 0].numpy()):
            save_patch(samples / f"step{step:07d}_{i}.npy", np.clip(s, 0, 1), preview=True)

    train(model, patches, schedule, tcfg, state, on_sample=dump)
    curve = prior + [[s, v] for s, v in state.losses]
    meta = {
        "seed": tcfg.seed,
        "modality": manifest.modality,
        "learning_rate": tcfg.learning_rate,
        "batch_size": tcfg.batch_size,
        "train_patients": sorted(patients),
        "loss_curve": curve,
        "version": __version__,
    }
    ckpt = Checkpoint(model, schedule, meta, state.optimizer.state_dict(), state.generator.get_state())
    path = _out_dir(args, "checkpoints") / args.name
    cid = save_checkpoint(path, ckpt)
    with (_out_dir(args, "reports") / "loss.csv").open("w") as fh:
        fh.write("step,loss\n")
        for s, v in curve:
            fh.write(f"{s},{v:.8g}\n")
    print(f"checkpoint {cid} at step {model.training_steps}: {path}")
    return EXIT_OK


# ---------------------------------------------------------------- score


def _load_scoring_inputs(args):
    from btd.checkpoint import load_checkpoint
    from btd.data import read_manifest

    ckpt = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if ckpt.modality and ckpt.modality != manifest.modality:
        raise ValidationError(
            f"checkpoint was trained on {ckpt.modality}, manifest {args.manifest} is {manifest.modality}"
        )
    return ckpt, manifest


def _detector_config(args, mode=None):
    from btd.detector import DetectorConfig

    return DetectorConfig(mode or args.mode, use_roi=args.roi, roi_side=args.roi_side, seed=args.seed,
                          batch_size=args.batch_size)


def write_scores(path, scores, failures, checkpoint_id) -> None:
    with Path(path).open("w") as fh:
        for s in scores:
            fh.write(json.dumps(s.to_record(checkpoint_id)) + "\n")
        for f in failures:
            fh.write(json.dumps({**f.to_record(), "checkpoint_id": checkpoint_id}) + "\n")


def read_scores(path) -> list[dict]:
    rows = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
    return [r for r in rows if "error" not in r]


def cmd_score(args) -> int:
    from btd.detector import score_batch

    ckpt, manifest = _load_scoring_inputs(args)
    config = _detector_config(args)
    result = score_batch(ckpt.model, manifest.resolved_records(), config, ckpt.schedule)
    out = _out_dir(args, "scores") / args.name
    write_scores(out, result.scores, result.failures, ckpt.checkpoint_id)
    print(f"scored {len(result.scores)} records ({len(result.failures)} failed) -> {out}")
    if result.failures:
        for f in result.failures:
            print(f"  failed: {f.sample_id}: {f.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------- calibrate


def cmd_calibrate(args) -> int:
    from btd.calibration import fit_threshold
    from btd.data import read_manifest
    from btd.detector import score_batch

    ckpt, manifest = _load_scoring_inputs(args)
    train_patients = set(ckpt.metadata.get("train_patients", []))
    if args.train_manifest:
        train_patients |= read_manifest(args.train_manifest).patients
    overlap = sorted(train_patients & manifest.patients)
    if overlap:
        raise ValidationError(f"calibration patients overlap the training set: {', '.join(overlap[:20])}")
    fake = [r.sample_id for r in manifest if r.is_fake]
    if fake:
        raise ValidationError(f"calibration manifest contains fake records: {', '.join(fake[:20])}")
    result = score_batch(ckpt.model, manifest.resolved_records(), _detector_config(args), ckpt.schedule)
    if result.failures:
        for f in result.failures:
            print(f"  failed: {f.sample_id}: {f.error}", file=sys.stderr)
    threshold = fit_threshold(result.scores, args.target_fpr, checkpoint_id=ckpt.checkpoint_id)
    path = _out_dir(args, "reports") / args.name
    threshold.save(path)
    print(f"tau={threshold.tau:.6g} (target FPR {threshold.target_fpr}, n={threshold.n_benign}) -> {path}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_classify(args) -> int:
    from btd.calibration import Threshold, check_binding, classify

    threshold = Threshold.load(args.threshold)
    rows = read_scores(args.scores)
    out = _out_dir(args, "reports") / args.name
    with out.open("w") as fh:
        for r in rows:
            check_binding(threshold, r.get("checkpoint_id"), override=args.allow_checkpoint_mismatch)
            fh.write(json.dumps({"sample_id": r["sample_id"], "score": r["score"],
                                 "decision": classify(r["score"], threshold)}) + "\n")
    print(f"classified {len(rows)} scores -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    from btd.metrics import bootstrap_eval

    rows = read_scores(args.scores)
    if not rows:
        raise ConfigError(f"no scores in {args.scores}")
    labelled = [r for r in rows if r.get("label")]
    report = bootstrap_eval([r["score"] for r in labelled], [r["label"] for r in labelled],
                            [r.get("scanner_id") or "unknown" for r in labelled],
                            iterations=args.iterations, seed=args.seed)
    reports = _out_dir(args, "reports")
    report.save(reports / f"{args.name}.json")
    table = report.table()
    (reports / f"{args.name}.txt").write_text(table + "\n")
    if args.plot:
        report.plot_roc(reports / f"{args.name}_roc.png")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------- ablate


def run_ablation(model, schedule, patches, labels, centers, grid, use_roi=True, roi_side=32, seed=0,
                 batch_size=64, sample_ids=None) -> dict:
    """AUC of BackwardOnly(d) and ForwardBackward(d) for each ``d`` in ``grid``."""
    from btd.detector import BackwardOnly, DetectorConfig, ForwardBackward, score_patches
    from btd.metrics import roc_auc

    rows = []
    for d in grid:
        schedule.check_step(d)
    for d in grid:
        row = {"steps": d}
        for key, mode in (("B", BackwardOnly(d)), ("F&B", ForwardBackward(d))):
            cfg = DetectorConfig(mode, use_roi=use_roi, roi_side=roi_side, seed=seed, batch_size=batch_size)
            scores = score_patches(model, patches, cfg, schedule, sample_ids, centers)
            row[key] = roc_auc([s.value for s in scores], labels)
        rows.append(row)
    return {"grid": list(grid), "rows": rows, "modes": ["F&B", "B"]}


def ablation_table(result: dict) -> str:
    from btd.metrics import format_table

    rows = [("steps", "F&B", "B")]
    rows += [(str(r["steps"]), f"{r['F&B']:.4f}", f"{r['B']:.4f}") for r in result["rows"]]
    return format_table(rows)


def cmd_ablate(args) -> int:
    from btd.data import load_record_patch

    ckpt, manifest = _load_scoring_inputs(args)
    grid = _int_list(args.grid)
    for d in grid:
        if d > ckpt.schedule.T:
            raise ConfigError(f"step count {d} exceeds the checkpoint's T={ckpt.schedule.T}")
    loaded = [load_record_patch(r, ckpt.model.config.patch_size) for r in manifest.resolved_records()]
    patches = np.stack([p for p, _ in loaded]) if loaded else np.empty((0,))
    result = run_ablation(ckpt.model, ckpt.schedule, patches, [r.label for r in manifest],
                          [c for _, c in loaded], grid, args.roi, args.roi_side, args.seed, args.batch_size,
                          [r.sample_id for r in manifest])
    result["checkpoint_id"] = ckpt.checkpoint_id
    reports = _out_dir(args, "reports")
    (reports / f"{args.name}.json").write_text(json.dumps(result, indent=2) + "\n")
    table = ablation_table(result)
    (reports / f"{args.name}.txt").write_text(table + "\n")
    with (reports / f"{args.name}_sweep.csv").open("w") as fh:
        fh.write("steps,mode,auc\n")
        for r in result["rows"]:
            for mode in ("B", "F&B"):
                fh.write(f"{r['steps']},{mode},{r[mode]:.6f}\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_common(p, out_required=True):
    p.add_argument("--config", help="YAML/JSON file of option defaults")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)


def _add_detector(p, mode=True):
    if mode:
        p.add_argument("--mode", default="btd", help="btd | backward:D | fb:K")
    p.add_argument("--roi", action=argparse.BooleanOptionalAction, default=False,
                   help="average the residual over a window at each record's center (injection scenarios)")
    p.add_argument("--roi-side", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btd", description="Back-in-Time Diffusion tamper detection")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benign or tampered corpus")
    _add_common(p)
    p.add_argument("--kind", choices=("benign", "inject", "remove"), default="benign")
    p.add_argument("--n", type=int, default=1000, help="benign count (real count for tampered corpora)")
    p.add_argument("--n-fake", type=int, default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--scanners", type=int, default=1)
    p.add_argument("--noise-sigma", type=float, default=0.06)
    p.add_argument("--host-falloff", type=float, default=0.6, help="neighbour correlation of the host noise")
    p.add_argument("--foreign-falloff", type=float, default=None,
                   help="neighbour correlation of the foreign noise (default: 0.5 inject, 0.4 remove)")
    p.add_argument("--side", type=int, default=32, help="side of the tampered square")
    p.add_argument("--tumor-fraction", type=float, default=0.5)
    p.add_argument("--per-patient", type=int, default=10)
    p.add_argument("--modality", choices=("CT", "MRI"), default="CT")
    p.add_argument("--preview", action="store_true", help="also write 16-bit PNG previews")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="patient-level train/validation split")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the noise predictor on true (TB/TM) patches")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--name", default="model.pt")
    p.add_argument("--steps", type=int, default=5000, help="total step count to reach")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--init-features", type=int, default=32)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--patch-size", type=int, default=96)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--sample-every", type=int, default=0, help="dump generated samples every N steps (0: never)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score every manifest record")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--name", default="scores.jsonl")
    _add_detector(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", help="fit the decision threshold on held-out benign records")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="benign calibration manifest")
    p.add_argument("--train-manifest", help="training manifest, checked for patient overlap")
    p.add_argument("--target-fpr", type=float, default=0.1)
    p.add_argument("--name", default="threshold.json")
    _add_detector(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("classify", help="apply a threshold to a score file")
    _add_common(p)
    p.add_argument("--threshold", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--name", default="decisions.jsonl")
    p.add_argument("--allow-checkpoint-mismatch", action="store_true")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="bootstrap AUC/EER overall and per scanner")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--name", default="eval")
    p.add_argument("--plot", action="store_true", help="also write an ROC plot")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="B vs F&B AUC across step counts")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="labelled tampered corpus")
    p.add_argument("--grid", default=",".join(map(str, ABLATION_GRID)))
    p.add_argument("--name", default="ablation")
    _add_detector(p, mode=False)
    p.set_defaults(func=cmd_ablate)
    return parser


def _load_config_file(path) -> dict:
    text = Path(path).read_text()
    data = yaml.safe_load(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    def norm(d):
        return {str(k).replace("-", "_"): norm(v) if isinstance(v, dict) else v for k, v in d.items()}

    data = norm(data)
    version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config file {path} has schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
    return data


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = _load_config_file(args.config)
        cfg = {**{k: v for k, v in cfg.items() if not isinstance(v, dict)}, **cfg.get(args.command, {})}
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except BTDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "out", None):
            _record_config(args)
        return args.func(args)
    except BTDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
