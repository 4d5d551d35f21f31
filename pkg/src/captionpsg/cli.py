"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure (LRR non-convergence under ``--strict``, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PSG_MERGE_MAP, resolve_config
from .psgjson import PsgFormatError, read_psg, read_psg_dir, to_dot, write_psg
from .sgeval import compute_miou, evaluate, semantic_map
from .tensorio import TensorFormatError
from .weights import WeightsError, init_model_weights, load_weights, save_weights
from .workflow import (
    DataError,
    NonConvergenceError,
    gradcheck,
    ground_batch,
    infer_many,
    parse_caption_lines,
    read_graphs,
)

log = logging.getLogger("captionpsg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _clusters(text: str):
    if text == "auto":
        return text
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("clusters must be 'auto' or a positive integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("clusters must be positive")
    return v


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"missing {what} file {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _string_list(path, what: str) -> list[str]:
    data = _load_json(path, what)
    if not isinstance(data, list) or not all(isinstance(s, str) for s in data):
        raise DataError(f"{path}: {what} must be a JSON array of strings")
    return data


def _write_lines(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_parse(a) -> int:
    try:
        lines = Path(a.captions).read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"missing captions file {a.captions}") from None
    graphs = parse_caption_lines(lines, merge=not a.no_merge)
    _write_lines(a.out, (g.to_dict() for g in graphs))
    log.info("wrote %d graphs to %s", len(graphs), a.out)
    return EXIT_OK


def cmd_ground(a) -> int:
    cfg = resolve_config({"theta": a.theta, "tau": a.tau, "patch_size": a.patch_size}, a.config)
    weights = load_weights(a.weights)
    records = ground_batch(read_graphs(a.graphs), a.feats, a.tokens, weights, cfg)
    _write_lines(a.out, records)
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    tau, theta, d = 0.07, -0.5, 8
    if a.weights:
        w = load_weights(a.weights)
        if w.grounder is not None:
            tau, theta = w.grounder.tau, w.grounder.theta
    if a.theta is not None:
        theta = a.theta
    res = gradcheck(a.seed, a.eps, tau, theta, a.dim or d, corrupt=a.corrupt)
    worst = max(res["fine_rel_error"], res["sim_rel_error"])
    print(f"fine loss  max rel error {res['fine_rel_error']:.3e}")
    print(f"sim loss   max rel error {res['sim_rel_error']:.3e}")
    ok = worst <= a.tol
    print(("PASS" if ok else "FAIL") + f" (tolerance {a.tol:g}, redraws {res['redraws']})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_infer(a) -> int:
    cli = {"stage": a.stage, "lam": a.lam, "clusters": a.clusters, "min_pixels": a.min_pixels,
           "seed": a.seed, "workers": a.workers, "strict": a.strict or None, "patch_size": a.patch_size,
           "top_predicates": a.top_predicates}
    if a.stuff:
        cli["stuff"] = _string_list(a.stuff, "stuff class")
    cfg = resolve_config(cli, a.config)
    weights = load_weights(a.weights)
    if cfg.stage > weights.grouper.num_stages:
        raise UsageError(f"--stage {cfg.stage} but weights have {weights.grouper.num_stages} stages")
    objects = _string_list(a.labels[0], "object label")
    relations = _string_list(a.labels[1], "relation label") if len(a.labels) > 1 else []
    if not objects:
        raise DataError("object label set is empty")
    feats = Path(a.feats)
    if not feats.is_dir():
        raise DataError(f"feature directory {feats} not found")
    image_ids = sorted(p.stem for p in feats.glob("*.ftns"))
    if a.images:
        image_ids = [i for i in image_ids if i in set(a.images)]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for psg in infer_many(image_ids, feats, weights, cfg, objects, relations):
        write_psg(psg, out / f"{psg.image_id}.json")
        for w in psg.meta.get("warnings", []):
            log.warning("%s: %s", psg.image_id, w)
    return EXIT_OK


def _merge_map(path):
    if path is None:
        return dict(PSG_MERGE_MAP)
    data = _load_json(path, "merge map")
    if not isinstance(data, dict):
        raise DataError(f"{path}: merge map must be a JSON object")
    return data


def cmd_eval(a) -> int:
    preds = read_psg_dir(a.pred)
    gts = read_psg_dir(a.gt)
    stuff = _string_list(a.stuff, "stuff class") if a.stuff else ()
    try:
        report = evaluate(preds, gts, a.mode, a.x, a.k, _merge_map(a.merge_map), stuff=stuff)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if a.out:
        Path(a.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    print(report.table())
    return EXIT_OK


def cmd_miou(a) -> int:
    preds = read_psg_dir(a.pred)
    gts = read_psg_dir(a.gt)
    mm = _merge_map(a.merge_map)
    if a.classes:
        classes = _string_list(a.classes, "class")
    else:
        from .sgeval import canonical_label
        classes = sorted({canonical_label(l, mm) for g in gts.values() for l in g.labels.values()})
    pm, gm = [], []
    for image_id in sorted(gts):
        if image_id not in preds:
            raise DataError(f"no prediction for image {image_id!r}")
        p, g = preds[image_id], gts[image_id]
        if p.labelmap.shape != g.labelmap.shape:
            raise DataError(f"image size mismatch for {image_id}")
        pm.append(semantic_map(p, classes, mm))
        gm.append(semantic_map(g, classes, mm))
    value = compute_miou(pm, gm, len(classes))
    if a.out:
        Path(a.out).write_text(json.dumps({"miou": value, "classes": len(classes)}, sort_keys=True) + "\n")
    print(f"mIoU {100 * value:.2f}")
    return EXIT_OK


def cmd_export(a) -> int:
    src = Path(a.psg)
    psgs = list(read_psg_dir(src).values()) if src.is_dir() else [read_psg(src)]
    out = Path(a.dot)
    out.mkdir(parents=True, exist_ok=True)
    for psg in psgs:
        (out / f"{psg.image_id}.dot").write_text(to_dot(psg))
    return EXIT_OK


def cmd_init_weights(a) -> int:
    n_obj = len(_string_list(a.objects, "object label")) if a.objects else 0
    n_rel = len(_string_list(a.relations, "relation label")) if a.relations else 0
    w = init_model_weights(a.dim, a.text_dim, a.shared_dim, tuple(a.centers), n_obj, n_rel,
                           a.label_dim, a.seed)
    save_weights(w, a.out, inline=a.inline)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="captionpsg", description="Scene graphs from captions: parse, ground, infer, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("parse", help="captions JSONL -> text graphs JSONL")
    s.add_argument("--captions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-merge", action="store_true", help="one graph per caption, not per image")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("ground", help="grounding, contrastive and similarity losses for a batch")
    s.add_argument("--feats", required=True)
    s.add_argument("--tokens", required=True)
    s.add_argument("--graphs", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--theta", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ground)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--weights")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--theta", type=float)
    s.add_argument("--dim", type=int)
    s.add_argument("--corrupt", action="store_true", help="perturb the analytic gradient (must fail)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("infer", help="features -> panoptic scene graphs")
    s.add_argument("--feats", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--labels", nargs="+", required=True, metavar="JSON",
                   help="object label file, then optional relation label file")
    s.add_argument("--out", required=True)
    s.add_argument("--stage", type=int)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--clusters", type=_clusters)
    s.add_argument("--min-pixels", type=int)
    s.add_argument("--top-predicates", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--stuff")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--images", nargs="*")
    s.add_argument("--strict", action="store_true", help="fail on LRR non-convergence")
    s.add_argument("--config")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="triplet recall report")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--mode", choices=("mask", "bbox"), default="mask")
    s.add_argument("--x", type=_int_list, default=[3, 5])
    s.add_argument("--k", type=_int_list, default=[50, 100])
    s.add_argument("--merge-map")
    s.add_argument("--stuff")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("miou", help="mean IoU of semantic maps")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes")
    s.add_argument("--merge-map")
    s.add_argument("--out")
    s.set_defaults(func=cmd_miou)

    s = sub.add_parser("export", help="scene graph JSON -> DOT")
    s.add_argument("--psg", required=True, help="file or directory")
    s.add_argument("--dot", required=True, help="output directory")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("init-weights", help="write seeded random weights")
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--text-dim", type=int, required=True)
    s.add_argument("--shared-dim", type=int, default=64)
    s.add_argument("--centers", type=_int_list, default=[64, 8])
    s.add_argument("--objects")
    s.add_argument("--relations")
    s.add_argument("--label-dim", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inline", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, WeightsError, PsgFormatError, TensorFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad values reaching the config or model constructors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
