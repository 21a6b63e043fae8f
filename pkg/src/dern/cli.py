"""Command-line entry point: ``dern gen|calibrate|compress|eval|analyze-sim``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .calibration import CalibrationSet, collect_stats, load_stats, save_stats, synth_calibration
from .clustering import ClusterConfig
from .errors import ConfigError, FormatError, NumericalError
from .model import param_count
from .pipeline import calibration_seed, compress, evaluate, probe_seed
from .segments import ComponentMask
from .similarity import similarity_report
from .storage import jsonable, load_calibration, load_model, round_sig, save_model, write_json
from .synth import gen_synthetic_model, parse_groups

log = logging.getLogger("dern")

EXIT_OK, EXIT_ARGS, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4

_INIT = {"gate": "gate_based", "random": "random", "equidistant": "equidistant"}
_BASELINE = {"dern": "dern", "prune": "prune_only", "average": "expert_average"}


def _fmt(x) -> str:
    return "" if x != x else repr(round_sig(float(x)))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_gen(args) -> None:
    groups = parse_groups(args.groups, args.experts)
    model = gen_synthetic_model(
        args.d, args.h, args.experts, args.top_k, args.layers, groups, args.noise, args.seed
    )
    save_model(model, args.out)
    log.info("wrote %s (%d parameters)", args.out, param_count(model))


def cmd_calibrate(args) -> None:
    model = load_model(args.model)
    if args.calib:
        calib = CalibrationSet(load_calibration(args.calib), source=args.calib)
    else:
        calib = synth_calibration(model.d, args.synth_tokens, calibration_seed(args.seed))
    save_stats(collect_stats(model, calib), args.out)


def _cluster_config(args) -> ClusterConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise FormatError("config file must hold a JSON object")
        doc = dict(doc.get("cluster", doc))
    overrides = {
        "ratio": args.ratio,
        "max_iters": args.max_iters,
        "tol": args.tol,
        "init": _INIT[args.init] if args.init else None,
        "use_weights": None if args.weighting is None else args.weighting == "on",
        "mask": args.mask,
        "seed": args.seed,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ClusterConfig.from_dict(doc)


def cmd_compress(args) -> None:
    t0 = time.perf_counter()
    model = load_model(args.model)
    stats = load_stats(args.stats)
    cluster = _cluster_config(args)
    k_retain = args.retain
    if args.retain_layers:
        try:
            k_retain = [int(v) for v in args.retain_layers.split(",")]
        except ValueError:
            raise ConfigError(f"bad --retain-layers {args.retain_layers!r}") from None
    if k_retain is None:
        raise ConfigError("--retain or --retain-layers is required")
    baseline = _BASELINE[args.baseline]
    result = compress(model, stats, k_retain, baseline, args.alpha, cluster)
    save_model(result.model, args.out)

    if args.report:
        write_json(
            {
                "baseline": baseline,
                "alpha": args.alpha,
                "cluster": cluster.to_dict(),
                "layers": [
                    {
                        "scores": result.importance.scores[li],
                        "retained": result.importance.retained[li],
                        "pruned": result.importance.pruned[li],
                        "retained_ratio": result.retained_ratio[li],
                    }
                    for li in range(len(model.layers))
                ],
                "params_before": param_count(model),
                "params_after": param_count(result.model),
                "seconds": time.perf_counter() - t0,
            },
            args.report,
        )
    if args.dump_assignments:
        rows = [
            [li, a.source_expert, a.source_index, a.target_expert, _fmt(a.best_similarity)]
            for li, layer_assign in enumerate(result.assignments)
            for a in layer_assign
        ]
        _write_csv(
            args.dump_assignments,
            ["layer", "source_expert", "source_index", "target_expert", "best_similarity"],
            rows,
        )
    if args.dump_clusters:
        rows = []
        for li, diag in enumerate(result.clusters):
            for expert, state in diag:
                counts = state.member_counts()
                final = state.objective_trace[-1] if state.objective_trace else float("nan")
                for j in range(state.k):
                    rows.append([li, expert, j, int(counts[j]), _fmt(state.mean_norms[j]), _fmt(final)])
        _write_csv(
            args.dump_clusters,
            ["layer", "expert", "cluster_id", "member_count", "r_bar", "final_objective"],
            rows,
        )


def cmd_eval(args) -> None:
    original = load_model(args.original)
    compressed = load_model(args.compressed)
    probes = synth_calibration(original.d, args.probes, probe_seed(args.seed)).tokens
    write_json(evaluate(original, compressed, probes).to_dict(), args.out)


def cmd_analyze_sim(args) -> None:
    rep = similarity_report(load_model(args.model), args.layer)
    n = rep.expert_level.shape[0]
    _write_csv(
        args.out_expert,
        ["expert_i", "expert_j", "cosine"],
        [[i, j, _fmt(rep.expert_level[i, j])] for i in range(n) for j in range(n)],
    )
    _write_csv(
        args.out_neuron,
        ["source_expert", "target_expert", "neuron", "max_cosine"],
        [
            [i, j, p, _fmt(v)]
            for i in range(n)
            for j in range(n)
            for p, v in enumerate(rep.neuron_level[i][j])
        ],
    )


def _mask_arg(text: str) -> str:
    try:
        return str(ComponentMask.parse(text))
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dern", description="Expert pruning and neuron recombination for GLU SMoE layers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a seeded synthetic model")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--h", type=int, required=True)
    g.add_argument("--experts", type=int, required=True)
    g.add_argument("--top-k", type=int, required=True)
    g.add_argument("--layers", type=int, default=1)
    g.add_argument("--groups", default="none", help='redundancy groups, e.g. "0-3/4-7"')
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("calibrate", help="collect routing statistics")
    c.add_argument("--model", required=True)
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth-tokens", type=int)
    src.add_argument("--calib")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("compress", help="prune and recombine experts")
    k.add_argument("--model", required=True)
    k.add_argument("--stats", required=True)
    k.add_argument("--retain", type=int)
    k.add_argument("--retain-layers", help="comma-separated per-layer retain counts")
    k.add_argument("--alpha", type=_unit_interval, default=0.4)
    k.add_argument("--ratio", type=float)
    k.add_argument("--mask", type=_mask_arg)
    k.add_argument("--init", choices=sorted(_INIT))
    k.add_argument("--weighting", choices=["on", "off"])
    k.add_argument("--max-iters", type=int)
    k.add_argument("--tol", type=float)
    k.add_argument("--baseline", choices=sorted(_BASELINE), default="dern")
    k.add_argument("--config", help="JSON file with cluster config fields")
    k.add_argument("--seed", type=int)
    k.add_argument("--out", required=True)
    k.add_argument("--report")
    k.add_argument("--dump-assignments")
    k.add_argument("--dump-clusters")
    k.set_defaults(func=cmd_compress)

    e = sub.add_parser("eval", help="compare a compressed model with its original")
    e.add_argument("--original", required=True)
    e.add_argument("--compressed", required=True)
    e.add_argument("--probes", type=int, default=256)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze-sim", help="expert- and neuron-level similarity tables")
    a.add_argument("--model", required=True)
    a.add_argument("--layer", type=int, default=0)
    a.add_argument("--out-expert", required=True)
    a.add_argument("--out-neuron", required=True)
    a.set_defaults(func=cmd_analyze_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"dern: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FormatError, OSError) as exc:
        print(f"dern: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"dern: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
