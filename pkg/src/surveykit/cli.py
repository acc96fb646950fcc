"""Command-line entry points.

Thin argparse dispatch over the library: every subcommand reads/writes plain
files, emits a run manifest describing inputs and outputs, and exits 0 on
success, 1 on data/validation errors, 2 on usage errors (argparse default).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import audits, engine, graph as graphmod, metrics, missing, service, synth
from .core import Codebook, SchemaError, load_dataset, split
from .impute import ipw_mi, mean_impute, mice_pmm, missforest
from .missing import MaskedDataset, MissingnessMask


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, args, inputs, outputs):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": sorted(str(o) for o in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_mask(dataset, mask_path):
    d = json.loads(Path(mask_path).read_text())
    deleted = {(rid, f) for rid, f in d["deleted"]}
    mask = MissingnessMask(d["mechanism"], d["seed"], deleted, d.get("params", {}))
    truth = {}
    for rid, f in deleted:
        r = dataset.by_id(rid)
        if f not in r.answers:
            raise SchemaError(f"mask deletes unanswered cell ({rid}, {f})")
        truth[(rid, f)] = r.answers[f]
    return MaskedDataset(dataset, mask, truth)


def _write_masked(masked, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = masked.dataset
    names = ds.codebook.field_names()
    import csv as _csv
    masked_csv = out_dir / "masked.csv"
    with open(masked_csv, "w", newline="") as fh:
        w = _csv.writer(fh, lineterminator="\n")
        w.writerow(["respondent_id"] + names)
        for r in ds.respondents:
            row = [r.id]
            for n in names:
                if (r.id, n) in masked.mask.deleted:
                    row.append("")
                else:
                    row.append(r.answers.get(n, ""))
            w.writerow(row)
    mask_json = out_dir / "mask.json"
    mask_json.write_text(json.dumps({
        "mechanism": masked.mask.mechanism, "seed": masked.mask.seed,
        "params": masked.mask.params, "deleted": masked.mask.to_records(),
        "realized_rate": {"all": masked.realized_rate(),
                          "B": masked.realized_rate("B"),
                          "C": masked.realized_rate("C")},
    }, indent=2) + "\n")
    return [masked_csv, mask_json]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cb = Codebook.default()
    if args.config:
        config = synth.GeneratorConfig.from_json(Path(args.config).read_text())
        config.n, config.seed = args.n or config.n, args.seed
    else:
        config = synth.default_config(n=args.n or 1000, seed=args.seed)
    ds = synth.generate(config, cb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = out / "records.csv"
    ds.to_csv(records)
    (out / "config.json").write_text(config.to_json() + "\n")
    write_manifest(out, "synth", args, [args.config] if args.config else [],
                   [records, out / "config.json"])
    print(f"wrote {len(ds)} synthetic records to {records}")


def cmd_graph(args):
    cb = Codebook.default()
    if args.graph_cmd == "build":
        train = load_dataset(args.records)
        g = graphmod.build_graph(train)
        if args.validated:
            g = graphmod.validated_subgraph(g, train)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        gpath = out / "graph.json"
        gpath.write_text(g.to_json())
        write_manifest(out, "graph build", args, [args.records], [gpath])
        print(json.dumps(g.stats, indent=2))
    elif args.graph_cmd == "stats":
        g = graphmod.CooccurrenceGraph.from_json(Path(args.graph).read_text(), cb)
        print(json.dumps(g.stats, indent=2))
    else:  # query
        g = graphmod.CooccurrenceGraph.from_json(Path(args.graph).read_text(), cb)
        evidence = {}
        for item in args.evidence or []:
            if "=" not in item:
                raise SchemaError(f"evidence must be Field=Label, got {item!r}")
            f, lab = item.split("=", 1)
            evidence[cb.canonical(f)] = lab
        dist = g.conditional(cb.canonical(args.target), evidence)
        print(json.dumps({
            "target": args.target, "evidence": evidence,
            "levels": list(dist.levels),
            "probabilities": [round(p, 6) for p in dist.probabilities],
            "support_n": dist.support_n,
            "sources_used": list(dist.sources_used),
            "fallback": dist.fallback,
        }, indent=2))


def cmd_simulate(args):
    ds = load_dataset(args.records)
    params = json.loads(args.params) if args.params else {}
    masked = missing.apply_mechanism(ds, args.mechanism, seed=args.seed, **params)
    outputs = _write_masked(masked, args.out)
    write_manifest(args.out, "simulate", args, [args.records], outputs)
    print(f"{args.mechanism}: realized rate {masked.realized_rate():.3f} "
          f"(B {masked.realized_rate('B'):.3f}, C {masked.realized_rate('C'):.3f})")


def cmd_impute(args):
    ds = load_dataset(args.records)
    masked = _load_mask(ds, args.mask)
    pooled = weights = None
    if args.method == "mean":
        run = mean_impute(masked)
    elif args.method == "mice_pmm":
        run = mice_pmm(masked, m=args.m, seed=args.seed)
    elif args.method == "missforest":
        run = missforest(masked, seed=args.seed)
    else:
        run, weights, pooled = ipw_mi(masked, m=args.m, seed=args.seed)
    run.check_observed_preserved()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imp_path = out / "imputations.json"
    imp_path.write_text(json.dumps(
        {"method": args.method, "m": run.m,
         "values": [[rid, f, v] for (rid, f), v in
                    sorted(run.cell_predictions().items())]}, indent=2) + "\n")
    outputs = [imp_path]
    if pooled is not None:
        ppath = out / "pooled.json"
        ppath.write_text(json.dumps(
            {f: asdict(p) for f, p in pooled.items()}, indent=2,
            default=float) + "\n")
        outputs.append(ppath)
    write_manifest(out, "impute", args, [args.records, args.mask], outputs)
    print(f"{args.method}: imputed {len(run.cell_predictions())} cells (M={run.m})")


def cmd_predict(args):
    train = load_dataset(args.train)
    validation = load_dataset(args.records)
    g = graphmod.build_graph(train)
    config = engine.MethodConfig(args.method)
    if config.graph_variant == "validated" or args.method == "VE":
        g = graphmod.validated_subgraph(graphmod.build_graph(train), train)
    provider = engine.make_provider(args.provider, train.codebook, args.cache_dir)
    rows = []
    for r in validation.respondents:
        ps = engine.run_prediction(config, r, g, train, provider, args.seed)
        for f, v in sorted(ps.answers.items()):
            rows.append([r.id, f, v])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ppath = out / "predictions.json"
    ppath.write_text(json.dumps({"method": config.tag, "seed": args.seed,
                                 "values": rows}, indent=2) + "\n")
    write_manifest(out, "predict", args, [args.train, args.records], [ppath])
    print(f"{config.tag}: predicted {len(rows)} cells for {len(validation)} respondents")


def cmd_evaluate(args):
    ds = load_dataset(args.records)
    pred_doc = json.loads(Path(args.predictions).read_text())
    preds = {(rid, f): float(v) for rid, f, v in pred_doc["values"]}
    truth = metrics.truth_map(ds)
    cb = ds.codebook
    report = {}
    for block in ("B", "C", None):
        sel = [k for k in preds if k in truth
               and (block is None or cb[k[1]].block == block)]
        if not sel:
            continue
        report[block or "all"] = {
            "mae": metrics.mae(preds, truth, sel),
            "rmse": metrics.rmse(preds, truth, sel),
            "signed_bias": metrics.signed_bias(preds, truth, sel),
            "within1": metrics.within1(preds, truth, sel),
            "qwk": metrics.quadratic_weighted_kappa(
                [int(round(preds[k])) for k in sel],
                [int(round(truth[k])) for k in sel]),
            "n_cells": len(sel),
        }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rpath = out / "evaluation.json"
    rpath.write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(out, "evaluate", args, [args.records, args.predictions], [rpath])
    print(json.dumps(report, indent=2))


def _method_list(spec_str):
    methods = []
    for tok in spec_str.split(","):
        tok = tok.strip()
        if tok in metrics.CLASSICAL_METHODS:
            methods.append(tok)
        else:
            methods.append(engine.MethodConfig(tok))
    return methods


def cmd_benchmark(args):
    train = load_dataset(args.train)
    validation = load_dataset(args.records)
    provider = engine.make_provider(args.provider, train.codebook, args.cache_dir)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = metrics.run_benchmark(
        _method_list(args.methods), args.scenarios.split(","), train,
        validation, seeds=seeds, provider=provider, out_dir=args.out,
        gate=not args.no_gate)
    outputs = [Path(args.out) / n for n in
               ("report.csv", "rmse_by_scenario.csv", "bias_rmse_frontier.csv",
                "subgroup_bias.csv")]
    write_manifest(args.out, "benchmark", args, [args.train, args.records], outputs)
    failed = [s for s, (ok, _) in result["gates"].items() if not ok]
    if failed:
        for s in failed:
            print(f"sanity gate FAILED for seed {s}:", file=sys.stderr)
            for name, (ok, detail) in result["gates"][s][1].items():
                if not ok:
                    print(f"  {name}: {detail}", file=sys.stderr)
        raise SystemExit(1)
    print(f"wrote {len(result['reports'])} report rows to {args.out}; gates passed")


def cmd_ablation(args):
    train = load_dataset(args.train)
    validation = load_dataset(args.records)
    provider = engine.make_provider(args.provider, train.codebook, args.cache_dir)
    seeds = [int(s) for s in args.seeds.split(",")]
    grid = metrics.run_ablation(args.scenarios.split(","), train, validation,
                                seeds=seeds, provider=provider, out_dir=args.out)
    write_manifest(args.out, "ablation", args, [args.train, args.records],
                   [Path(args.out) / "ablation_bias.csv"])
    print(f"wrote {len(grid)} ablation rows to {args.out}")


def cmd_audit(args):
    cb = Codebook.default()
    if args.provider:
        provider = engine.make_provider(args.provider, cb, args.cache_dir)
        audit = audits.audit_instrument(cb, provider)
    else:
        text = Path(args.response).read_text()
        audit = audits.parse_audit_response(text, cb)
    doc = {"scores": audit.scores, "items": {k: sorted(v) for k, v in audit.items.items()},
           "gaps": audit.gaps, "redundancies": audit.redundancies,
           "verdict": audit.verdict}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    apath = out / "audit.json"
    apath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "audit", args,
                   [args.response] if args.response else [], [apath])
    print(json.dumps(doc["scores"], indent=2, sort_keys=True))


def cmd_coverage(args):
    sample = json.loads(Path(args.sample).read_text())
    reference = json.loads(Path(args.reference).read_text())
    report = audits.compute_gap(sample, reference)
    doc = {"rows": [asdict(r) for r in report.rows]}
    if args.prior:
        prior = json.loads(Path(args.prior).read_text())
        rho, validated, flags = audits.validate_prior(prior["ranks"], report)
        doc["prior_validation"] = {"spearman_rho": rho, "validated": validated,
                                   "divergence_flags": flags}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cpath = out / "coverage.json"
    cpath.write_text(json.dumps(doc, indent=2) + "\n")
    write_manifest(out, "coverage", args,
                   [args.sample, args.reference] + ([args.prior] if args.prior else []),
                   [cpath])
    print(json.dumps(doc.get("prior_validation", doc), indent=2))


def cmd_serve(args):
    service.serve(args.records, args.graph, host=args.host, port=args.port,
                  provider=(engine.make_provider(args.provider, Codebook.default(),
                                                 args.cache_dir)
                            if args.provider else None))


def cmd_ingest(args):
    ds = load_dataset(args.records, args.codebook)
    ds.validate()
    n_skip = sum(len(r.skipped) for r in ds.respondents)
    print(json.dumps({"rows": len(ds), "fields": len(ds.codebook.fields),
                      "skip_cells": n_skip, "provenance": ds.provenance}, indent=2))


def cmd_split(args):
    ds = load_dataset(args.records)
    train, validation = split(ds, seed=args.seed, ratio=args.ratio)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train.to_csv(out / "train.csv")
    validation.to_csv(out / "validation.csv")
    write_manifest(out, "split", args, [args.records],
                   [out / "train.csv", out / "validation.csv"])
    print(f"split {len(ds)} -> {len(train)} train / {len(validation)} validation")


# ---------------------------------------------------------------------------

def _fixture(name):
    from importlib.resources import files
    return str(files("surveykit.resources").joinpath("fixtures").joinpath(name))


def build_parser():
    p = argparse.ArgumentParser(prog="surveykit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, help="generate synthetic records")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)

    sp = add("graph", cmd_graph, help="build/inspect the co-occurrence graph")
    gsub = sp.add_subparsers(dest="graph_cmd", required=True)
    b = gsub.add_parser("build")
    b.add_argument("--records", required=True)
    b.add_argument("--validated", action="store_true")
    b.add_argument("--out", required=True)
    s = gsub.add_parser("stats")
    s.add_argument("--graph", required=True)
    q = gsub.add_parser("query")
    q.add_argument("--graph", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--evidence", nargs="*")

    sp = add("simulate", cmd_simulate, help="apply a missingness mechanism")
    sp.add_argument("--records", required=True)
    sp.add_argument("--mechanism", required=True, choices=sorted(missing.MECHANISMS))
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--params", default=None, help="JSON mechanism overrides")
    sp.add_argument("--out", required=True)

    sp = add("impute", cmd_impute, help="classical imputation over a mask")
    sp.add_argument("--records", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--method", required=True,
                    choices=list(metrics.CLASSICAL_METHODS))
    sp.add_argument("--m", type=int, default=5)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, help="graph-evidence model predictions")
    sp.add_argument("--train", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--method", required=True,
                    choices=["ZS", "FS", "ER", "GR", "Staged", "Marginal",
                             "ATLM", "VE"])
    sp.add_argument("--provider", default="stub",
                    choices=["stub", "replay", "live"])
    sp.add_argument("--cache-dir", default=None)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, help="score predictions against records")
    sp.add_argument("--records", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--out", required=True)

    sp = add("benchmark", cmd_benchmark, help="method x scenario x seed grid")
    sp.add_argument("--train", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--methods", default="mean,mice_pmm,missforest,ipw_mi,Marginal,ATLM")
    sp.add_argument("--scenarios", default="S1,S2,S3,S4")
    sp.add_argument("--seeds", default="42")
    sp.add_argument("--provider", default="stub", choices=["stub", "replay", "live"])
    sp.add_argument("--cache-dir", default=None)
    sp.add_argument("--no-gate", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("ablation", cmd_ablation, help="component ablation on signed bias")
    sp.add_argument("--train", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--scenarios", default="S3,S4")
    sp.add_argument("--seeds", default="42")
    sp.add_argument("--provider", default="stub", choices=["stub", "replay", "live"])
    sp.add_argument("--cache-dir", default=None)
    sp.add_argument("--out", required=True)

    sp = add("audit", cmd_audit, help="construct-coverage instrument audit")
    sp.add_argument("--response", default=_fixture("audit_response.txt"),
                    help="canned audit response file (default: shipped fixture)")
    sp.add_argument("--provider", default=None, choices=["stub", "replay", "live"])
    sp.add_argument("--cache-dir", default=None)
    sp.add_argument("--out", required=True)

    sp = add("coverage", cmd_coverage, help="demographic gap analysis")
    sp.add_argument("--sample", default=_fixture("sample_composition.json"))
    sp.add_argument("--reference", default=_fixture("acs_reference.json"))
    sp.add_argument("--prior", default=_fixture("coverage_prior.json"))
    sp.add_argument("--out", required=True)

    sp = add("serve", cmd_serve, help="run the grounded assistant HTTP service")
    sp.add_argument("--records", required=True)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--provider", default=None, choices=["stub", "replay", "live"])
    sp.add_argument("--cache-dir", default=None)

    sp = add("ingest", cmd_ingest, help="validate a records file")
    sp.add_argument("--records", required=True)
    sp.add_argument("--codebook", default=None)

    sp = add("split", cmd_split, help="deterministic train/validation split")
    sp.add_argument("--records", required=True)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--ratio", type=float, default=0.8)
    sp.add_argument("--out", required=True)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (SchemaError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
