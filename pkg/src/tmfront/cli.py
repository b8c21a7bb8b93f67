"""Command-line entry point: ``tmfront <command> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from tmfront import grounding, metrics
from tmfront.archive import MAGIC, ArchiveError, load_archive
from tmfront.config import PipelineConfig, load_config
from tmfront.numerics import derivative_probes, relative_gap
from tmfront.pipeline import forward, load_weights, random_weights
from tmfront.redundancy import DEFAULT_THRESHOLDS, emit_report, redundancy_sweep
from tmfront.resampler import token_filter
from tmfront.split import ConfigError, RawImage, load_image

METRICS = ("contains", "anls", "f1", "relaxed", "trans", "pos")
PROMPT_TASKS = [t.value for t in grounding.PromptTask]


class CLIError(Exception):
    """Failure reported to the user with exit status 1."""


# -- shared option groups ----------------------------------------------------


def _add_model_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    g.add_argument("--resolution", metavar="HxW", help="shorthand for resolution.h/resolution.w")
    g.add_argument("--r", type=int, help="tokens kept by the token resampler")
    g.add_argument("--d-model", type=int)
    g.add_argument("--depth", type=int)
    g.add_argument("--seed", type=int, help="seed (falls back to TM_SEED)")
    g.add_argument("--weights", help="named-tensor weight archive")
    g.add_argument("--random-init", action="store_true", help="use seeded random weights")
    g.add_argument("--threads", type=int, default=1)


def _config_from_args(args) -> PipelineConfig:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.resolution:
        try:
            h, w = args.resolution.lower().split("x")
        except ValueError:
            raise CLIError(f"--resolution expects HxW, got {args.resolution!r}") from None
        overrides["resolution.h"], overrides["resolution.w"] = h, w
    for flag, key in (("r", "token_resampler.r"), ("d_model", "model.d_model"),
                      ("depth", "model.depth"), ("seed", "seed"), ("weights", "weights.path")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def _weights_for(cfg: PipelineConfig, random_init: bool):
    if random_init:
        return random_weights(cfg)
    if cfg.weights_path is None:
        raise CLIError("no weights: pass --weights PATH or --random-init [--seed N]")
    return load_weights(cfg.weights_path)


def _synthetic_image(size: str, seed: int) -> RawImage:
    h, w = (int(v) for v in size.lower().split("x"))
    rng = np.random.default_rng(seed)
    return RawImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def _run_forward(args):
    cfg = _config_from_args(args)
    weights = _weights_for(cfg, args.random_init)
    if args.image and args.synthetic:
        raise CLIError("give either an image path or --synthetic, not both")
    if args.synthetic:
        img = _synthetic_image(args.synthetic, cfg.seed)
    elif args.image:
        img = load_image(args.image)
    else:
        raise CLIError("forward needs an image path or --synthetic HxW")
    return cfg, forward(img, cfg, weights, threads=args.threads)


# -- commands ------------------------------------------------------------------


def cmd_forward(args) -> int:
    cfg, result = _run_forward(args)
    if args.dump:
        result.dump(args.dump)
    print(json.dumps(result.summary()))
    return 0


def _is_archive(path: str) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(MAGIC)) == MAGIC


def _tokens_from(args) -> np.ndarray:
    if args.image and _is_archive(args.image):
        dump = load_archive(args.image)
        return dump[args.tensor]
    _, result = _run_forward(args)
    return result.token_set.tokens if args.tensor == "tokens_before" else result.tokens


def cmd_redundancy(args) -> int:
    tokens = _tokens_from(args)
    thresholds = DEFAULT_THRESHOLDS if args.thresholds is None else [
        float(t) for t in args.thresholds.split(",")
    ]
    report = redundancy_sweep(tokens, thresholds, args.label)
    emit_report(report, args.out)
    idx = np.flatnonzero(np.isclose(report.thresholds, 0.8))
    if idx.size:
        k = idx[0]
        c = int(report.redundant_counts[k])
        print(f"{report.thresholds[k]:.4f},{c},{c / report.L:.4f}")
    else:
        print(f"wrote {len(report.thresholds)} thresholds to {args.out}")
    return 0


def cmd_filter(args) -> int:
    tokens = _tokens_from(args)
    ranking = token_filter(tokens, args.keep, sort_by_original=not args.unsorted)
    out = {
        "L": int(tokens.shape[0]),
        "r": int(args.keep),
        "selected": [int(i) for i in ranking.selected],
    }
    if args.importances:
        out["importances"] = [float(v) for v in ranking.importances]
    print(json.dumps(out))
    return 0


def _read_jsonl(path) -> dict[str, dict]:
    records: dict[str, dict] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CLIError(f"{path}:{lineno}: {exc}") from exc
        if "id" not in rec:
            raise CLIError(f"{path}:{lineno}: record without 'id'")
        rid = str(rec["id"])
        if rid in records:
            raise CLIError(f"{path}:{lineno}: duplicate id {rid!r}")
        records[rid] = rec
    return records


def _score_record(metric: str, pred: dict, gt: dict) -> float:
    prediction = str(pred.get("prediction", ""))
    if metric == "f1":
        if "entities" not in gt or "entities" not in pred:
            raise CLIError(f"record {gt['id']!r}: f1 needs 'entities' in both files")
        return metrics.entity_f1(pred["entities"], gt["entities"])[2]
    truths = gt.get("ground_truths")
    if not truths:
        raise CLIError(f"record {gt['id']!r}: missing ground_truths")
    if metric in ("trans", "pos"):
        boxes = gt.get("boxes")
        if boxes is None or len(boxes) != len(truths):
            raise CLIError(f"record {gt['id']!r}: spotting metrics need one box per ground truth")
        words = [metrics.GTWord(w, grounding.NormalizedBox(*map(int, b))) for w, b in zip(truths, boxes)]
        inst = metrics.SpottingInstance(prediction, words)
        return metrics.spotting_trans(inst) if metric == "trans" else metrics.spotting_pos(inst)
    rec = metrics.EvalRecord(prediction, [str(t) for t in truths], numeric=gt.get("numeric"))
    if metric == "contains":
        return float(metrics.contains_correct(rec))
    if metric == "anls":
        return metrics.anls_record(rec)
    return float(metrics.relaxed_correct(rec))


def cmd_eval(args) -> int:
    preds = _read_jsonl(args.predictions)
    gts = _read_jsonl(args.ground_truth)
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        raise CLIError(
            f"record ids do not align; only in predictions: {only_pred}; only in ground truth: {only_gt}"
        )
    scores = {rid: _score_record(args.metric, preds[rid], gts[rid]) for rid in gts}
    mean = float(np.mean(list(scores.values()))) if scores else 0.0
    print("metric\trecords\tscore")
    print(f"{args.metric}\t{len(scores)}\t{mean:.4f}")
    if args.verbose:
        for rid, s in scores.items():
            if s < 1.0:
                print(f"  {rid}\t{s:.4f}\tpred={preds[rid].get('prediction', '')!r}")
    return 0


def cmd_prompt(args) -> int:
    loc = None
    if args.box:
        coords = [int(v) for v in args.box.split(",")]
        if len(coords) != 4:
            raise CLIError("--box expects x1,y1,x2,y2")
        loc = grounding.NormalizedBox(*coords)
    try:
        print(grounding.build_prompt(grounding.PromptTask(args.task), args.question, loc))
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    return 0


def random_span(rng: np.random.Generator) -> grounding.GroundedSpan:
    alphabet = list("abcdefghijklmnopqrstuvwxyz ABCXYZ0123456789.,:;!?()<>/-")
    text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 16))))
    while any(tag in text for tag in grounding.RESERVED_TAGS):
        text = text.replace("<", "")
    kind = rng.integers(0, 4)
    if kind == 0:
        loc = None
    elif kind == 1:
        loc = grounding.Point(*map(int, rng.integers(0, 1001, size=2)))
    elif kind == 2:
        x, y = rng.integers(0, 1001, size=(2, 2))
        loc = grounding.NormalizedBox.canonical(int(x[0]), int(y[0]), int(x[1]), int(y[1]))
    else:
        pts = rng.integers(0, 1001, size=(int(rng.integers(3, 9)), 2))
        loc = grounding.Polygon(tuple(grounding.Point(int(a), int(b)) for a, b in pts))
    return grounding.GroundedSpan(text, loc)


def cmd_markup(args) -> int:
    path = Path(args.file)
    if args.generate:
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        lines = []
        for _ in range(args.generate):
            spans = [random_span(rng) for _ in range(int(rng.integers(1, 4)))]
            lines.append("".join(grounding.serialize_grounded(s) for s in spans))
        path.write_text("\n".join(lines) + "\n")
    n_spans = 0
    diffs = 0
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line:
            continue
        try:
            spans = grounding.parse_grounded(line)
        except grounding.GroundingError as exc:
            raise CLIError(f"{path}:{lineno}: {exc}") from exc
        n_spans += len(spans)
        again = "".join(grounding.serialize_grounded(s) for s in spans)
        if again != line:
            diffs += 1
            if args.verbose:
                print(f"diff at line {lineno}:\n  in : {line}\n  out: {again}")
    status = "OK" if diffs == 0 else "FAIL"
    print(f"{status}, {n_spans} spans, {diffs} diffs")
    return 0 if diffs == 0 else 1


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, analytic, numeric in derivative_probes(args.seed or 0, args.h):
        gap = relative_gap(analytic, numeric)
        worst = max(worst, gap)
        print(f"{name}\tanalytic={analytic:.10f}\tnumeric={numeric:.10f}\trel={gap:.2e}")
    ok = worst <= args.tol
    print(f"{'OK' if ok else 'FAIL'}: max relative gap {worst:.2e} (tol {args.tol:.0e})")
    return 0 if ok else 1


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmfront", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run the vision front-end on one image")
    p.add_argument("image", nargs="?", help="PPM (or PNG) image")
    p.add_argument("--synthetic", metavar="HxW", help="use a seeded random image instead")
    p.add_argument("--dump", help="write output tokens to a tensor archive")
    _add_model_options(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("redundancy", help="token redundancy threshold sweep")
    p.add_argument("image", nargs="?", help="token dump archive or an image")
    p.add_argument("--synthetic", metavar="HxW")
    p.add_argument("--tensor", default="tokens_before", help="dump tensor to analyse")
    p.add_argument("--thresholds", help="comma-separated ascending thresholds")
    p.add_argument("--label", default="", help="resolution label for the report")
    p.add_argument("--out", required=True, help="CSV report path")
    _add_model_options(p)
    p.set_defaults(func=cmd_redundancy)

    p = sub.add_parser("filter", help="rank tokens and keep the most distinctive")
    p.add_argument("image", nargs="?", help="token dump archive or an image")
    p.add_argument("--synthetic", metavar="HxW")
    p.add_argument("--tensor", default="tokens_before")
    p.add_argument("--keep", type=int, required=True, help="number of tokens to keep")
    p.add_argument("--unsorted", action="store_true", help="keep importance order")
    p.add_argument("--importances", action="store_true", help="also print importances")
    _add_model_options(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="score predictions against ground truth (JSONL)")
    p.add_argument("predictions")
    p.add_argument("ground_truth")
    p.add_argument("--metric", required=True, choices=METRICS)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prompt", help="print a task prompt")
    p.add_argument("task", choices=PROMPT_TASKS)
    p.add_argument("question", nargs="?")
    p.add_argument("--box", help="x1,y1,x2,y2 for the recognition prompt")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("markup", help="parse/re-serialize grounded strings, one per line")
    p.add_argument("file")
    p.add_argument("--generate", type=int, metavar="N", help="first write N random lines to FILE")
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_markup)

    p = sub.add_parser("gradcheck", help="finite-difference probes of softmax and attention")
    p.add_argument("--seed", type=int)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command in ("markup", "gradcheck"):
        env = os.environ.get("TM_SEED")
        args.seed = int(env) if env else None
    try:
        return args.func(args)
    except (CLIError, ConfigError, ArchiveError, grounding.GroundingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
