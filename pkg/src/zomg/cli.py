"""Multi-command entry point.

Subcommands cover the whole pipeline: `synth` writes planted instances,
`pretrain` fits pooling weights, `decompose` splits a description into
sub-actions, `ground` runs the per-instance mask optimization, `eval`
scores results against ground truth, and `gradcheck` compares analytic
gradients with finite differences.

Exit codes: 0 ok, 2 configuration/input error, 3 optimization diverged,
4 decomposition unavailable, 5 evaluation input error, 6 gradient check
failed. Logs go to stderr; data goes to files or stdout. Every command
that takes --seed is bit-reproducible, and every artifact embeds the
resolved configuration plus the tool version.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DecompositionParseError,
    EvalInputError,
    InvalidInputError,
    LspUnavailableError,
    OptimizationDivergedError,
    SchemaValidationError,
    ShapeError,
)
from . import formats, lsp, metrics, smo, synth
from .model import PretrainConfig, pretrain, retrieval_at_1
from .numerics import Rng, l2_normalize

log = logging.getLogger("zomg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_LSP = 4
EXIT_EVAL_INPUT = 5
EXIT_GRADCHECK = 6


def _run_info(command: str, args: argparse.Namespace) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    return {"command": command, "version": __version__, "config": config}


def _instance_paths(spec: str) -> list[str]:
    if os.path.isdir(spec):
        paths = [p for p in glob.glob(os.path.join(spec, "*.json"))
                 if os.path.basename(p) != "manifest.json"]
    elif any(c in spec for c in "*?["):
        paths = glob.glob(spec)
    else:
        paths = [spec]
    paths = sorted(paths)
    if not paths:
        raise ConfigError(f"no instance files match {spec!r}")
    return paths


def _load_instances(spec: str) -> list[formats.Instance]:
    return [formats.load_instance(p) for p in _instance_paths(spec)]


def parse_thresholds(text: str) -> list[float]:
    """Grid notation start:step:end (inclusive), or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"threshold grid must be start:step:end, got {text!r}")
        start, step, end = (float(p) for p in parts)
        if step <= 0 or end < start:
            raise ConfigError(f"bad threshold grid {text!r}")
        n = int(round((end - start) / step)) + 1
        vals = [round(start + i * step, 10) for i in range(n)]
        return [v for v in vals if v <= end + 1e-9]
    return [float(p) for p in text.split(",") if p.strip()]


def _pretrain_pairs(instances):
    """Synthetic pairing: frames vs the normalized mean of query embeddings."""
    pairs = []
    for inst in instances:
        mean = np.mean([q.embedding for q in inst.queries], axis=0)
        pairs.append((inst.frames, l2_normalize(mean)))
    return pairs


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    spec_fields = {}
    if args.spec:
        spec_fields = formats.load_json(args.spec)
    if args.seed is not None:
        spec_fields["seed"] = args.seed
    try:
        spec = synth.SynthSpec(**spec_fields)
    except TypeError as exc:
        raise ConfigError(f"bad generator field in {args.spec}: {exc}") from exc
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")

    os.makedirs(args.out, exist_ok=True)
    rng = Rng(spec.seed)
    ids = []
    for i in range(args.count):
        instance_id = f"inst-{i:04d}"
        inst = synth.generate_instance(spec, rng, instance_id)
        formats.save_instance(inst, os.path.join(args.out, instance_id + ".json"),
                              frames_encoding=args.encoding)
        ids.append(instance_id)
    manifest = {
        "spec": {f: getattr(spec, f) for f in (
            "d", "k", "L", "noise_sigma", "transition_width", "min_seg_len",
            "prototype_min_angle", "seed")},
        "count": args.count,
        "instances": ids,
        "run": _run_info("synth", args),
    }
    formats.dump_json(manifest, os.path.join(args.out, "manifest.json"))
    log.info("wrote %d instances to %s", args.count, args.out)
    return EXIT_OK


# ------------------------------------------------------------- pretrain

def cmd_pretrain(args) -> int:
    instances = _load_instances(args.data)
    pairs = _pretrain_pairs(instances)
    cfg = PretrainConfig(tau=args.tau, steps=args.steps, lr=args.lr,
                         batch=args.batch, seed=args.seed)
    params, trace = pretrain(pairs, cfg)
    meta = {
        "seed": cfg.seed, "steps": cfg.steps, "tau": cfg.tau,
        "version": __version__, "run": _run_info("pretrain", args),
    }
    formats.save_weights(params, args.out_weights, meta)
    loss_csv = args.loss_csv or os.path.splitext(args.out_weights)[0] + "_loss.csv"
    formats.write_pretrain_loss_csv(loss_csv, trace)
    r1 = retrieval_at_1(params, [p[0] for p in pairs],
                        np.vstack([p[1] for p in pairs]))
    log.info("pretrained %d steps: loss %.6f -> %.6f, train R@1 %.3f",
             cfg.steps, trace[0], trace[-1], r1)
    return EXIT_OK


# ------------------------------------------------------------ decompose

def cmd_decompose(args) -> int:
    if args.text:
        text = args.text
    elif args.file:
        with open(args.file, "r", encoding="utf-8") as fh:
            text = fh.read().strip()
    else:
        raise ConfigError("need --text or --file")

    if args.client == "rules":
        result = lsp.rule_based_result(text)
    else:
        if args.client == "mock":
            if not args.mock_replies:
                raise ConfigError("--client mock requires --mock-replies")
            try:
                with open(args.mock_replies, "r", encoding="utf-8") as fh:
                    replies = json.load(fh)
                client = lsp.MockClient([str(r) for r in replies])
            except (json.JSONDecodeError, TypeError) as exc:
                raise ConfigError(f"bad --mock-replies file: {exc}") from exc
        else:
            client = lsp.HttpChatClient.from_env(timeout_seconds=args.timeout,
                                                 max_retries=args.max_retries)
        cfg = lsp.LspConfig(n_paraphrases=args.n_paraphrases,
                            max_retries=args.max_retries,
                            timeout_seconds=args.timeout,
                            cache_dir=args.cache_dir)
        result = lsp.decompose_with_voting(client, text, cfg)

    obj = {
        "text": text,
        "sub_actions": result.sub_actions,
        "k": result.k,
        "votes": result.votes,
        "source": result.source,
        "run": _run_info("decompose", args),
    }
    payload = json.dumps(obj, sort_keys=True, indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    else:
        print(payload)
    return EXIT_OK


# --------------------------------------------------------------- ground

def _ground_one(params, inst, cfg, decoder):
    result = smo.optimize_masks(params, inst.frames,
                                [q.embedding for q in inst.queries], cfg)
    if decoder == "ordered":
        ordered = smo.decode_segments_ordered(result.masks)
        segments = [s for s in ordered if s is not None]
        result = smo.GroundingResult(
            labels=smo.ordered_labels(ordered, result.masks.shape[1]),
            segments=segments,
            fragments=[],
            masks=result.masks,
            loss_trace=result.loss_trace,
            steps_run=result.steps_run,
        )
    return result


def cmd_ground(args) -> int:
    params, _meta = formats.load_weights(args.weights)
    instances = _load_instances(args.instances)
    cfg = smo.SmoConfig(alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                        tau=args.tau, steps=args.steps, lr=args.lr,
                        init_jitter=args.init_jitter, seed=args.seed)
    if args.trace_dir:
        os.makedirs(args.trace_dir, exist_ok=True)

    started = time.monotonic()
    failures = 0
    param_counts = []
    with open(args.out, "w", encoding="utf-8") as out_fh:
        run = _run_info("ground", args)
        run["config"]["weights_path"] = os.path.abspath(args.weights)
        formats.write_run_header(out_fh, "ground", __version__, run["config"])

        def work(inst):
            return _ground_one(params, inst, cfg, args.decoder)

        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            futures = [(inst, pool.submit(work, inst)) for inst in instances]
            # collect in submission order: deterministic output, serialized writer
            for inst, fut in futures:
                try:
                    result = fut.result()
                except Exception as exc:  # per-instance failure; keep going
                    failures += 1
                    log.error("instance %s failed: %s", inst.id, exc)
                    continue
                trace_path = None
                if args.trace_dir:
                    trace_path = os.path.join(args.trace_dir, inst.id + "_trace.csv")
                    formats.write_loss_trace_csv(trace_path, result.loss_trace)
                record = formats.result_record(inst.id, result, trace_path)
                param_counts.append(record.param_count)
                formats.append_result(out_fh, record)

    elapsed = time.monotonic() - started
    done = len(instances) - failures
    if done:
        log.info("grounded %d/%d instances in %.2fs (%.2f instances/s), "
                 "mean optimized parameters per instance: %.1f",
                 done, len(instances), elapsed, done / max(elapsed, 1e-9),
                 float(np.mean(param_counts)))
    if failures == len(instances):
        log.error("all %d instances failed", failures)
        return 1
    return EXIT_OK


# ----------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    # any unusable input inside eval maps to the eval-input exit code
    try:
        header, records = formats.read_results(args.results)
        instances = _load_instances(args.instances)
    except (SchemaValidationError, ConfigError) as exc:
        raise EvalInputError(str(exc)) from exc
    if not records:
        raise EvalInputError(f"no result records in {args.results}")
    by_id = {inst.id: inst for inst in instances}

    preds, gts = [], []
    for rec in records:
        inst = by_id.get(rec.id)
        if inst is None:
            raise EvalInputError(f"results reference unknown instance {rec.id!r}")
        if not inst.gt_segments:
            raise EvalInputError(f"instance {rec.id!r} has no ground-truth spans")
        gts.extend(metrics.GtSegment(inst.id, s.query_idx, s.start, s.end)
                   for s in inst.gt_segments)
        preds.extend(metrics.ScoredSegment(rec.id, s.query_idx, s.start, s.end,
                                           s.confidence) for s in rec.segments)

    thresholds = parse_thresholds(args.thresholds)
    report = metrics.mean_ap(preds, gts, thresholds)

    similarity_summary = None
    if args.similarity_csv:
        weights_path = args.weights
        if not weights_path and header and isinstance(header.get("config"), dict):
            weights_path = header["config"].get("weights_path")
        if not weights_path:
            raise EvalInputError(
                "similarity report needs pooling weights: pass --weights or use a "
                "results file whose run header records the weights path"
            )
        params, _ = formats.load_weights(weights_path)
        rows = metrics.semantic_similarity_report(params, instances, records,
                                                  method="predicted")
        gt_segs = {
            rec.id: [(s.query_idx, s.start, s.end) for s in by_id[rec.id].gt_segments]
            for rec in records
        }
        rows += metrics.segment_similarity_rows(params, instances, gt_segs,
                                                method="ground_truth")
        formats.write_similarity_csv(args.similarity_csv, rows)
        similarity_summary = metrics.summarize_similarity(rows)
        for s in similarity_summary:
            log.info("similarity[%s]: n=%d min=%.3f q1=%.3f median=%.3f q3=%.3f max=%.3f",
                     s.method, s.count, s.minimum, s.q1, s.median, s.q3, s.maximum)

    if args.per_instance_csv:
        formats.write_match_csv(args.per_instance_csv, report.per_instance)

    run = _run_info("eval", args)
    if args.report:
        formats.write_eval_report(args.report, report, run, similarity_summary)
    else:
        print(json.dumps(formats.eval_report_obj(report, run, similarity_summary),
                         sort_keys=True, indent=1))
    log.info("mAP %.4f over thresholds %s", report.map_mean, thresholds)
    return EXIT_OK


# ------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    report = synth.gradcheck(trials=args.trials, seed=args.seed, h=args.h,
                             perturb=args.perturb)
    print(f"max relative error {report.max_rel_error:.3e} over {report.trials} trials")
    if report.max_rel_error < 1e-4:
        return EXIT_OK
    print(f"FAIL: worst coordinate {report.worst_coord} in trial {report.worst_trial}: "
          f"analytic {report.worst_analytic:.6e} vs numeric {report.worst_numeric:.6e}",
          file=sys.stderr)
    return EXIT_GRADCHECK


# ----------------------------------------------------------------- main

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zomg",
        description="Ground free-form action descriptions in motion sequences "
                    "with test-time optimized frame-wise soft masks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write planted synthetic instances")
    p.add_argument("--spec", help="JSON file with generator fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--encoding", choices=["json", "bin32", "bin64"], default="json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="fit pooling weights on instance files")
    p.add_argument("--data", required=True, help="instance dir, glob or file")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("decompose", help="split a description into sub-actions")
    p.add_argument("--text")
    p.add_argument("--file")
    p.add_argument("--client", choices=["http", "mock", "rules"], default="http")
    p.add_argument("--n-paraphrases", type=int, default=2)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--mock-replies", default=None,
                   help="JSON array of canned replies (mock client)")
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("ground", help="optimize soft masks per instance")
    p.add_argument("--weights", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--out", required=True, help="results JSONL path")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.005)
    p.add_argument("--gamma", type=float, default=100.0)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--init-jitter", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decoder", choices=["argmax", "ordered"], default="argmax")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trace-dir", default=None)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("eval", help="score results against ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--thresholds", default="0.3:0.1:0.8")
    p.add_argument("--report", default=None, help="eval report JSON (stdout if omitted)")
    p.add_argument("--similarity-csv", default=None)
    p.add_argument("--per-instance-csv", default=None)
    p.add_argument("--weights", default=None,
                   help="pooling weights for the similarity report "
                        "(default: from the results run header)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=_positive_int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, ShapeError, SchemaValidationError,
            DecompositionParseError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OptimizationDivergedError as exc:
        log.error("optimization diverged: %s", exc)
        return EXIT_DIVERGED
    except LspUnavailableError as exc:
        log.error("decomposition unavailable: %s", exc)
        return EXIT_LSP
    except EvalInputError as exc:
        log.error("evaluation input error: %s", exc)
        return EXIT_EVAL_INPUT
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
