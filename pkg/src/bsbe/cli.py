"""Command-line surface.

Subcommands: validate, fit, summarize, diagnose, simulate, ice.
Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import io as bio
from . import plots
from .graph import GraphError, bym2_scaling_factor, induced_subgraph
from .mcmc import ChainSet, SamplerSettings, run_chains, summarize
from .model import DataError, OffsetModel, Source
from .simulate import (DEFAULT_MODEL_FOR_SOURCE, default_spec, run_study)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

GLOBAL_PARAM_PREFIXES = ("beta[", "rho", "delta", "sigma_wp", "icar_precision[")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsbe",
        description="Small-area disease mapping with population-at-risk uncertainty")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="schema-check the configured inputs")
    p.add_argument("-c", "--config", required=True)

    p = sub.add_parser("fit", help="sample the posterior for the configured dataset")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the sampler seed")
    p.add_argument("-o", "--output", default=None, help="override the output directory")

    p = sub.add_parser("summarize", help="posterior summaries and choropleth data")
    p.add_argument("--chains", required=True, help="binary chain dump from fit")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--geojson", default=None, help="geometry to join RR summaries onto")
    p.add_argument("--id-property", default="GEOID")

    p = sub.add_parser("diagnose", help="convergence diagnostics and traceplots")
    p.add_argument("--chains", required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("simulate", help="run the naive-vs-Berkson simulation study")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--areas", type=int, default=20)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sources", default="PEP,WP",
                   help="comma-separated subset of PEP,ACS,WP")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iterations", type=int, default=6000)
    p.add_argument("--burn-in", type=int, default=2000)
    p.add_argument("--thin", type=int, default=2)

    p = sub.add_parser("ice", help="concentration-at-extremes index table")
    p.add_argument("--input", required=True,
                   help="CSV: area_id,affluent_white,poor_black,households")
    p.add_argument("-o", "--output", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    handler = {
        "validate": _cmd_validate,
        "fit": _cmd_fit,
        "summarize": _cmd_summarize,
        "diagnose": _cmd_diagnose,
        "simulate": _cmd_simulate,
        "ice": _cmd_ice,
    }[args.command]
    try:
        return handler(args)
    except (DataError, GraphError, bio.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _cmd_validate(args) -> int:
    config = bio.RunConfig.from_ini(args.config)
    graph = bio.load_graph(config)
    data = bio.ingest_dataset(config, graph)
    print(f"ok: {data.n_areas} areas, {data.n_groups} age groups, "
          f"{data.n_covariates} covariate columns, "
          f"reference rate {data.reference_rate:.6g}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    config = bio.RunConfig.from_ini(args.config)
    if args.seed is not None:
        config.settings = SamplerSettings(
            n_chains=config.settings.n_chains,
            n_iterations=config.settings.n_iterations,
            burn_in=config.settings.burn_in, thin=config.settings.thin,
            seed=args.seed, adapt_target=config.settings.adapt_target,
            adapt_window=config.settings.adapt_window)
    if args.output is not None:
        config.output_dir = args.output
    graph = bio.load_graph(config)
    data = bio.ingest_dataset(config, graph)
    model = bio.model_config_for(config, bym2_scaling_factor(graph))
    chains = run_chains(data, model, graph, config.settings)

    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    chains.save(os.path.join(out, "draws.bin"))
    chains.to_csv(os.path.join(out, "draws.csv"))
    summary = summarize(chains)
    summary.to_csv(os.path.join(out, "summary.csv"))
    bio.emit_choropleth_data(summary, graph.area_ids, data.age_groups,
                             os.path.join(out, "choropleth.csv"))
    with open(os.path.join(out, "acceptance.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "acceptance_rate"])
        for name, rate in sorted(chains.acceptance.items()):
            writer.writerow([name, repr(rate)])
    print(f"wrote draws, summary, choropleth and acceptance tables to {out}")
    return EXIT_OK


def _parse_rr_names(names):
    cells = []
    for name in names:
        if name.startswith("log_rr["):
            aid, age = name[len("log_rr["):-1].split(";", 1)
            cells.append((aid, age))
    area_ids = list(dict.fromkeys(aid for aid, _ in cells))
    ages = list(dict.fromkeys(age for _, age in cells))
    return area_ids, ages


def _cmd_summarize(args) -> int:
    chains = ChainSet.load(args.chains)
    os.makedirs(args.output, exist_ok=True)
    summary = summarize(chains)
    summary.to_csv(os.path.join(args.output, "summary.csv"))
    area_ids, ages = _parse_rr_names(chains.names)
    if area_ids:
        cpath = os.path.join(args.output, "choropleth.csv")
        bio.emit_choropleth_data(summary, area_ids, ages, cpath)
        rows = bio.read_choropleth_data(cpath)
        plots.render_rr_intervals(rows, os.path.join(args.output, "rr_intervals.png"))
        if args.geojson:
            bio.join_choropleth_geojson(rows, args.geojson, args.id_property,
                                        os.path.join(args.output, "choropleth.geojson"))
    print(f"wrote summaries to {args.output}")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    chains = ChainSet.load(args.chains)
    os.makedirs(args.output, exist_ok=True)
    summary = summarize(chains)
    with open(os.path.join(args.output, "diagnostics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "rhat", "ess"])
        for k, name in enumerate(summary.names):
            writer.writerow([name, repr(float(summary.rhat[k])),
                             repr(float(summary.ess[k]))])
    global_names = [n for n in chains.names
                    if n.startswith(GLOBAL_PARAM_PREFIXES)]
    trace_dir = os.path.join(args.output, "traceplots")
    os.makedirs(trace_dir, exist_ok=True)
    for name in global_names:
        safe = name.replace("[", "_").replace("]", "").replace(";", "_")
        with open(os.path.join(trace_dir, f"{safe}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            per = chains.per_chain(name)
            writer.writerow([f"chain{c}" for c in range(per.shape[0])])
            for t in range(per.shape[1]):
                writer.writerow([repr(float(v)) for v in per[:, t]])
    plots.render_traceplots(chains, global_names,
                            os.path.join(args.output, "traceplots.png"))
    plots.render_diagnostics(summary, os.path.join(args.output, "rhat_hist.png"))
    print(f"wrote diagnostics to {args.output}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .io import fixture_path
    from .graph import read_edge_list_csv

    graph = read_edge_list_csv(fixture_path("georgia_adjacency.csv"))
    if args.areas > graph.n_areas:
        raise DataError(f"--areas {args.areas} exceeds fixture size {graph.n_areas}")
    sub = induced_subgraph(graph, range(args.areas))
    spec = default_spec(args.areas, args.groups, args.replicates, args.seed)
    settings = SamplerSettings(n_chains=args.chains, n_iterations=args.iterations,
                               burn_in=args.burn_in, thin=args.thin, seed=args.seed)
    matrix = []
    for token in args.sources.split(","):
        token = token.strip()
        try:
            source = Source(token)
        except ValueError:
            raise bio.ConfigError(f"unknown source {token!r}") from None
        matrix.append((source, OffsetModel.NAIVE))
        matrix.append((source, DEFAULT_MODEL_FOR_SOURCE[source]))
    result = run_study(spec, matrix, settings, sub)
    os.makedirs(args.output, exist_ok=True)
    result.to_csv(os.path.join(args.output, "study.csv"))
    plots.render_study_report(result.rows, os.path.join(args.output, "study.png"))
    if result.failures:
        print(f"{len(result.failures)} replicate fits failed; see log output",
              file=sys.stderr)
    print(f"wrote study report to {args.output}")
    return EXIT_OK


def _cmd_ice(args) -> int:
    if not os.path.exists(args.input):
        raise bio.ConfigError(f"input file not found: {args.input}")
    rows = []
    with open(args.input, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = ["area_id", "affluent_white", "poor_black", "households"]
        for col in needed:
            if col not in (reader.fieldnames or []):
                raise DataError(f"{args.input}: missing column {col!r}")
        for row in reader:
            try:
                value = bio.ice_index(float(row["affluent_white"]),
                                      float(row["poor_black"]),
                                      float(row["households"]))
            except ValueError as exc:
                raise DataError(f"{args.input}: area_id {row['area_id']!r}: {exc}") from None
            rows.append((row["area_id"], value))
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "ice"])
        for aid, value in rows:
            writer.writerow([aid, repr(value)])
    print(f"wrote {len(rows)} ICE rows to {args.output}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
