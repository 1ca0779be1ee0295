"""Command-line entry point: synth, extract, train, infer, eval, plot, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``SWG_THREADS`` caps the number of worker processes used by synth/extract.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("swgformer")


class UsageError(Exception):
    pass


class DataError(Exception):
    def __init__(self, msg: str, path=None):
        super().__init__(msg)
        self.path = path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SWG_THREADS", "1")))
    except ValueError:
        return 1


def write_manifest(path: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    data = {
        "command": command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        data.update(extra)
    path.write_text(json.dumps(data, indent=2, default=str))


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write to output directory: {exc}", out) from exc
    return out


# ---------------------------------------------------------------------------
# synth


def _synth_one(job):
    from .features import random_scene_spec, synth_foa_scene, write_annotations, write_wav

    idx, seed_seq, args = job
    rng = np.random.default_rng(seed_seq)
    spec = random_scene_spec(rng, n_classes=args["classes"], duration=args["duration"],
                             max_overlap=args["max_overlap"], n_events=args["events"],
                             min_len=args["min_len"], snr_db=args["snr_db"])
    clip, rows = synth_foa_scene(spec, rng)
    stem = Path(args["out"]) / f"scene_{idx:04d}"
    write_wav(str(stem) + ".wav", clip)
    write_annotations(str(stem) + ".csv", rows)
    return len(rows)


def cmd_synth(args) -> int:
    if not 1 <= args.max_overlap <= 3:
        raise UsageError(f"--max-overlap must be 1, 2 or 3 (single-ACCDOA), got {args.max_overlap}")
    if args.scenes < 0 or args.classes < 1:
        raise UsageError("--scenes must be >= 0 and --classes >= 1")
    out = _out_dir(args.out)
    seqs = np.random.SeedSequence(args.seed).spawn(args.scenes)
    opts = dict(classes=args.classes, duration=args.duration, max_overlap=args.max_overlap, events=args.events,
                min_len=args.min_len, snr_db=args.snr_db, out=str(out))
    jobs = [(i, s, opts) for i, s in enumerate(seqs)]
    if _workers() > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(_workers()) as ex:
            counts = list(ex.map(_synth_one, jobs))
    else:
        counts = [_synth_one(j) for j in jobs]
    write_manifest(out / "manifest.json", "synth", args, {"annotation_rows": int(sum(counts))})
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def _spectral_config(args):
    from .features import SpectralConfig

    try:
        return SpectralConfig(n_fft=args.n_fft, hop=args.hop, n_mels=args.n_mels, f_min=args.f_min, f_max=args.f_max)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _extract_one(job):
    from .features import raw_features, read_wav

    path, cfg = job
    return raw_features(read_wav(path), cfg)


def cmd_extract(args) -> int:
    from .features import FeatureStats, FeatureTensor, compute_stats, load_stats, save_features, save_stats

    wav_dir = Path(args.wav_dir)
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wav_dir.is_dir():
        raise DataError("input directory not found", wav_dir)
    out = _out_dir(args.out)
    cfg = _spectral_config(args)
    jobs = [(str(p), cfg) for p in wavs]
    try:
        if _workers() > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(_workers()) as ex:
                raws = list(ex.map(_extract_one, jobs))
        else:
            raws = [_extract_one(j) for j in jobs]
    except ValueError as exc:
        raise DataError(str(exc), wav_dir) from exc
    if args.stats:
        stats = load_stats(args.stats)
    else:
        stats = compute_stats(raws) if raws else FeatureStats.identity()
    save_stats(out / "stats.txt", stats)
    for p, raw in zip(wavs, raws):
        save_features(out / (p.stem + ".swgt"), FeatureTensor(stats.apply(raw).astype(np.float32), cfg.frame_rate),
                      cfg, stats)
    write_manifest(out / "manifest.json", "extract", args, {"files": len(wavs)})
    print(f"extracted {len(wavs)} feature files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / infer


def _load_dataset(feat_dir: Path, label_dir: Path | None, mcfg):
    from .features import fit_frames, load_features, read_annotations
    from .model import accdoa_encode

    files = sorted(feat_dir.glob("*.swgt"))
    if not files:
        raise DataError("no feature files (*.swgt) found", feat_dir)
    X, Y = [], []
    for f in files:
        data = load_features(f).data
        if data.shape[1:] != (mcfg.n_mels, mcfg.in_channels):
            raise DataError(f"feature shape {data.shape} does not match n_mels={mcfg.n_mels}, "
                            f"channels={mcfg.in_channels}", f)
        X.append(fit_frames(data, mcfg.frames))
        if label_dir is not None:
            csv_path = label_dir / (f.stem + ".csv")
            if not csv_path.exists():
                raise DataError("missing annotation file", csv_path)
            try:
                Y.append(accdoa_encode(read_annotations(csv_path), mcfg.n_classes, mcfg.label_frames))
            except ValueError as exc:
                raise DataError(str(exc), csv_path) from exc
    return files, np.stack(X), (np.stack(Y) if Y else None)


def _configs(args):
    from .model import TrainConfig, desk_config, load_config, full_config

    try:
        if args.config:
            mcfg, tcfg = load_config(args.config, base=args.preset)
        else:
            mcfg = desk_config() if args.preset == "desk" else full_config()
            tcfg = TrainConfig()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config: {exc}") from exc
    return mcfg, tcfg


def cmd_train(args) -> int:
    import dataclasses

    from .model import SwGFormer, train_loop

    mcfg, tcfg = _configs(args)
    overrides = {k: v for k, v in dict(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                                      max_steps=args.steps, seed=args.seed).items() if v is not None}
    tcfg = dataclasses.replace(tcfg, **overrides)
    if args.seed is not None:
        mcfg = dataclasses.replace(mcfg, seed=args.seed)
    out = _out_dir(args.out)
    files, X, Y = _load_dataset(Path(args.features), Path(args.labels), mcfg)
    n_val = int(round(len(X) * args.val_fraction))
    perm = np.random.default_rng(tcfg.seed).permutation(len(X))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if len(tr_idx) == 0:
        raise DataError("no training clips left after the validation split", Path(args.features))
    tcfg = dataclasses.replace(tcfg, log_path=str(out / "train_log.csv"), checkpoint_path=str(out / "checkpoint.swgt"))
    model = SwGFormer(mcfg)
    val = (X[val_idx], Y[val_idx]) if n_val else None
    result = train_loop(model, (X[tr_idx], Y[tr_idx]), val, tcfg, time_budget=args.time_budget)
    write_manifest(out / "manifest.json", "train", args, {
        "model_config": mcfg.to_dict(), "train_config": dataclasses.asdict(tcfg), "steps": result.steps,
        "validation_files": [files[i].name for i in val_idx]})
    if result.report is not None:
        print(result.report.to_text(), end="")
    print(f"trained {result.steps} steps in {result.seconds:.1f} s; checkpoint {out / 'checkpoint.swgt'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .features import write_annotations
    from .model import accdoa_decode, decoded_to_rows, load_checkpoint, predict
    from .numerics.io import save_tensor

    ckpt = Path(args.checkpoint)
    if not ckpt.exists() or not Path(str(ckpt) + ".json").exists():
        raise DataError("checkpoint or its manifest is missing", ckpt)
    model = load_checkpoint(ckpt)
    out = _out_dir(args.out)
    files, X, _ = _load_dataset(Path(args.features), None, model.cfg)
    if args.dump_knn:
        _dump_knn(model, X[:1], Path(args.dump_knn))
    pred = predict(model, X)
    for f, p in zip(files, pred):
        save_tensor(out / (f.stem + ".accdoa.swgt"), p)
        write_annotations(out / (f.stem + ".csv"), decoded_to_rows(accdoa_decode(p, args.threshold)))
    write_manifest(out / "manifest.json", "infer", args, {"files": len(files)})
    print(f"wrote predictions for {len(files)} clips to {out}")
    return EXIT_OK


def _dump_knn(model, X, out: Path) -> None:
    """Neighbour tables of the first window of every SwG sublayer for the first clip."""
    from .blocks import SwGSublayer
    from .graph import dump_neighbors_csv, knn_graph
    from .model import predict

    out.mkdir(parents=True, exist_ok=True)
    swgs = [(b, layer.swg) for b, block in enumerate(model.blocks)
            for layer in block.layers if isinstance(layer, SwGSublayer)]
    predict(model, X)
    for b, swg in swgs:
        h_first = swg.last_input[0, 0]  # [n, t] of clip 0, window 0
        dump_neighbors_csv(out / f"block{b}_window0.csv", knn_graph(h_first, swg.k))


# ---------------------------------------------------------------------------
# eval / plot


def _read_frames(path: Path, n_frames: int | None):
    from .features import read_annotations
    from .metrics import frames_from_rows

    try:
        return frames_from_rows(read_annotations(path), n_frames)
    except (ValueError, OSError) as exc:
        raise DataError(str(exc), path) from exc


def cmd_eval(args) -> int:
    from .metrics import FrameEvents, evaluate

    ref, pred = Path(args.ref), Path(args.pred)
    for p in (ref, pred):
        if not p.exists():
            raise DataError("input not found", p)
    pairs = []
    if ref.is_dir():
        for r in sorted(ref.glob("*.csv")):
            p = pred / r.name
            if not p.exists():
                raise DataError("prediction file missing for reference", p)
            pairs.append((r, p))
    else:
        pairs.append((ref, pred))
    ref_frames, pred_frames = [], []
    for r, p in pairs:
        rf = _read_frames(r, args.label_frames)
        pf = _read_frames(p, args.label_frames)
        n = max(len(rf), len(pf))
        ref_frames += rf + [[] for _ in range(n - len(rf))]
        pred_frames += pf + [[] for _ in range(n - len(pf))]
    try:
        report = evaluate(FrameEvents(ref_frames, pred_frames), args.classes, args.threshold_deg, args.segment_frames)
    except (ValueError, IndexError) as exc:
        raise DataError(str(exc), ref) from exc
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).write_text(report.to_csv())
        write_manifest(Path(str(args.out) + ".manifest.json"), "eval", args)
    return EXIT_OK


def svg_trajectory(pred: np.ndarray, ref: np.ndarray, title: str, width: int = 640, height: int = 240) -> str:
    """x/y/z ACCDOA trajectories (red/green/blue); reference dashed, prediction solid."""
    L = pred.shape[0]
    pad = 30
    def px(i):
        return pad + (width - 2 * pad) * (i / max(L - 1, 1))

    def py(v):
        return height / 2 - (height / 2 - pad) * float(np.clip(v, -1.2, 1.2)) / 1.2

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="18" font-family="sans-serif" font-size="12">{title}</text>',
             f'<line x1="{pad}" y1="{py(0):.1f}" x2="{width - pad}" y2="{py(0):.1f}" stroke="#bbb"/>']
    for axis, colour in enumerate(("red", "green", "blue")):
        for series, dash in ((ref, ' stroke-dasharray="5,3"'), (pred, "")):
            pts = " ".join(f"{px(i):.1f},{py(series[i, axis]):.3f}" for i in range(L))
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{pts}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    from .features import read_annotations
    from .model import accdoa_encode
    from .numerics.io import load_tensor

    acc_path = Path(args.accdoa)
    if not acc_path.exists():
        raise DataError("ACCDOA dump not found", acc_path)
    try:
        pred = load_tensor(acc_path)
    except ValueError as exc:
        raise DataError(str(exc), acc_path) from exc
    L, K, _ = pred.shape
    ref = np.zeros_like(pred)
    if args.ref:
        try:
            ref = accdoa_encode(read_annotations(args.ref), K, L)
        except (ValueError, OSError) as exc:
            raise DataError(str(exc), Path(args.ref)) from exc
    out = _out_dir(args.out)
    stem = acc_path.name.split(".")[0]
    for c in range(K):
        svg = svg_trajectory(pred[:, c], ref[:, c], f"{stem} class {c}: x (red) y (green) z (blue)")
        (out / f"{stem}_class{c:02d}.svg").write_text(svg)
    write_manifest(out / "manifest.json", "plot", args, {"classes": K})
    print(f"wrote {K} plots to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_all

    results = run_all(seed=args.seed, include_model=not args.skip_model)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<28} max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tol:.0e} entries={r.n_checked}")
    if failed:
        print(f"{len(failed)} gradient suite(s) failed: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swgformer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize FOA scenes with annotations")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--classes", type=int, default=13)
    s.add_argument("--max-overlap", type=int, default=3)
    s.add_argument("--events", type=int, default=None, help="events per scene (default: random)")
    s.add_argument("--min-len", type=float, default=1.0, help="minimum event length in seconds")
    s.add_argument("--duration", type=float, default=5.0)
    s.add_argument("--snr-db", type=float, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", help="WAV directory -> feature files")
    e.add_argument("--wav-dir", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--stats", help="standardization stats file (default: computed from the inputs)")
    e.add_argument("--n-fft", type=int, default=1024)
    e.add_argument("--hop", type=int, default=480)
    e.add_argument("--n-mels", type=int, default=64)
    e.add_argument("--f-min", type=float, default=50.0)
    e.add_argument("--f-max", type=float, default=12000.0)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train on features + annotation CSVs")
    t.add_argument("--features", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--time-budget", type=float, default=None, help="stop after this many seconds")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="checkpoint + features -> prediction CSVs and ACCDOA dumps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--dump-knn", metavar="DIR", help="write neighbour tables of the first clip as CSV")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("eval", help="reference vs prediction CSV (files or directories)")
    v.add_argument("--ref", required=True)
    v.add_argument("--pred", required=True)
    v.add_argument("--classes", type=int, default=13)
    v.add_argument("--label-frames", type=int, default=None)
    v.add_argument("--segment-frames", type=int, default=10)
    v.add_argument("--threshold-deg", type=float, default=20.0)
    v.add_argument("--out", help="write the report as CSV")
    v.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="ACCDOA trajectories vs reference as SVG")
    pl.add_argument("--accdoa", required=True, help="raw ACCDOA dump (*.accdoa.swgt)")
    pl.add_argument("--ref", help="reference annotation CSV")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    g = sub.add_parser("gradcheck", help="run all finite-difference suites")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skip-model", action="store_true")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .model import NumericalError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"swgformer {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"swgformer {args.command}: data error: {exc} [{exc.path}]", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"swgformer {args.command}: numerical failure: {exc} [{getattr(args, 'out', '')}]", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"swgformer {args.command}: data error: {exc.strerror} [{exc.filename}]", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
