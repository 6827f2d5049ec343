"""Command-line pipeline: synth -> measure -> estimate -> infer / evaluate, plus mwem.

Each subcommand writes its files into ``--out`` (a directory).  Files are
staged under temporary names and renamed only after every output is complete,
so a failing command leaves nothing behind.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from itertools import product
from pathlib import Path
from typing import Callable


from .errors import TableTooLargeError
from .estimation import (
    FittedModel,
    ProxConfig,
    l2_loss,
    load_measurements,
    prox_pgm,
    save_measurements,
)
from .factors import Clique, Dataset, Domain
from .inference import GbpConfig
from .mechanisms import (
    PrivacyBudget,
    ProvenanceLog,
    SeededRng,
    Workload,
    gaussian_measure,
    laplace_measure,
    mwem_rounds,
    random_cliques,
    synth_generate,
    workload_error,
)
from .out_of_model import evaluate_marginals, infer_marginal
from .region_graph import build_factor_graph, build_saturated

log = logging.getLogger("localpgm")

ORACLES = {
    "exact": ("exact", build_saturated),
    "region-graph": ("convex_gbp", build_saturated),
    "factor-graph": ("convex_gbp", build_factor_graph),
}


class UsageError(Exception):
    pass


class Outputs:
    """Stage output files and publish them together."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.staged: list[tuple[Path, Path]] = []

    def add(self, name: str, write: Callable[[Path], None]) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
        os.close(fd)
        tmp = Path(tmp)
        self.staged.append((tmp, self.dir / name))
        write(tmp)
        return self.dir / name

    def add_text(self, name: str, text: str) -> Path:
        return self.add(name, lambda p: p.write_text(text))

    def commit(self) -> None:
        for tmp, final in self.staged:
            os.replace(tmp, final)
        self.staged = []

    def discard(self) -> None:
        for tmp, _ in self.staged:
            tmp.unlink(missing_ok=True)
        self.staged = []


def parse_clique(text: str, domain: Domain) -> Clique:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise UsageError("empty clique")
    try:
        return domain.clique(names)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_cliques(spec: str, domain: Domain, rng: SeededRng) -> list[Clique]:
    """``random:k:width``, a file (JSON list of name lists, or one comma list per line),
    or an inline ``A,B;C,D`` list."""
    if spec.startswith("random:"):
        try:
            _, k, width = spec.split(":")
            return random_cliques(domain.d, int(k), int(width), rng)
        except ValueError as exc:
            raise UsageError(f"bad random clique spec {spec!r}: {exc}") from None
    path = Path(spec)
    if path.is_file():
        text = path.read_text()
        if path.suffix == ".json":
            try:
                return [domain.clique(c) for c in json.loads(text)]
            except ValueError as exc:
                raise UsageError(f"{path}: {exc}") from None
        items = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
    else:
        items = spec.split(";")
    cliques = [parse_clique(item, domain) for item in items]
    if not cliques:
        raise UsageError("no cliques given")
    return cliques


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _clique_label(domain: Domain, c: Clique) -> str:
    return ",".join(domain.attr_names(c))


def _load_domain(path: str) -> Domain:
    try:
        return Domain.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read domain {path}: {exc}") from None


def _load_dataset(path: str, domain: Domain) -> Dataset:
    try:
        return Dataset.load_csv(path, domain)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def _prox_config(args) -> ProxConfig:
    return ProxConfig(
        outer_iters=args.iters,
        step_size=args.step,
        inner_gbp_iters=args.inner_iters,
        gbp=GbpConfig(damping=args.damping),
    )


def cmd_synth(args, out: Outputs) -> None:
    rng = SeededRng(args.seed)
    X, theta = synth_generate(args.attrs, args.sizes, args.records, args.temperature, rng)
    domain = X.domain
    out.add("data.csv", X.save_csv)
    out.add_text("domain.json", json.dumps(domain.to_json(), indent=2) + "\n")
    model = {
        "domain": domain.to_json(),
        "temperature": args.temperature,
        "seed": args.seed,
        "edges": [domain.attr_names(c) for c in theta],
        "theta": [[domain.attr_names(c), theta[c].flat.tolist()] for c in theta],
    }
    out.add_text("true_model.json", json.dumps(model) + "\n")


def cmd_measure(args, out: Outputs) -> None:
    domain = _load_domain(args.domain)
    X = _load_dataset(args.data, domain)
    rng = SeededRng(args.seed)
    cliques = parse_cliques(args.cliques, domain, rng)
    provenance = ProvenanceLog()
    if args.noise == "laplace":
        try:
            budget = PrivacyBudget.parse(args.epsilon, X.m)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        meas = laplace_measure(X, cliques, budget, rng, provenance)
    else:
        if args.sigma is None:
            raise UsageError("--noise gaussian requires --sigma")
        meas = gaussian_measure(X, cliques, args.sigma, rng, provenance)
    out.add("measurements.json", lambda p: save_measurements(meas, domain, p))
    out.add("provenance.jsonl", provenance.write)


def cmd_estimate(args, out: Outputs) -> None:
    domain = _load_domain(args.domain)
    try:
        meas = load_measurements(args.measurements, domain)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read measurements: {exc}") from None
    oracle, builder = ORACLES[args.oracle]
    graph = builder(domain, sorted({m.clique for m in meas}))
    model = prox_pgm(l2_loss(meas, domain), graph, oracle, _prox_config(args))
    log.info("final loss %.6g after %d iterations", model.loss_trace[-1], len(model.loss_trace))
    out.add("model.json", model.save)


def _load_model(path: str) -> FittedModel:
    try:
        return FittedModel.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from None


def cmd_infer(args, out: Outputs) -> None:
    model = _load_model(args.model)
    domain = model.domain
    c = parse_clique(args.clique, domain)
    f = infer_marginal(model, c)
    rows = [[*idx, repr(float(v))] for idx, v in zip(product(*(range(n) for n in domain.shape(c))), f.flat)]
    out.add_text("marginal.csv", _csv_text([*domain.attr_names(c), "probability"], rows))


def cmd_evaluate(args, out: Outputs) -> None:
    model = _load_model(args.model)
    domain = model.domain
    truth = _load_dataset(args.truth, domain)
    cliques = parse_cliques(args.cliques, domain, SeededRng(args.seed))
    errors = evaluate_marginals(model, truth, cliques, workers=args.workers)
    rows = [[_clique_label(domain, c), "l1", repr(e), args.seed] for c, e in errors.items()]
    out.add_text("errors.csv", _csv_text(["clique", "metric", "value", "trial_seed"], rows))


def cmd_mwem(args, out: Outputs) -> None:
    domain = _load_domain(args.domain)
    X = _load_dataset(args.data, domain)
    rng = SeededRng(args.seed)
    workload = Workload(parse_cliques(args.workload, domain, rng))
    try:
        eps = PrivacyBudget.parse(args.eps_per_round)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 1 <= args.rounds <= len(workload):
        raise UsageError(f"--rounds must lie in [1, {len(workload)}]")
    oracle, builder = ORACLES[args.oracle]
    graph_builder = "factor" if builder is build_factor_graph else "saturated"
    provenance = ProvenanceLog()
    rows = []
    model = None
    for rnd in mwem_rounds(X, workload, args.rounds, eps.epsilon, oracle, graph_builder, rng,
                           _prox_config(args), provenance):
        model = rnd.model
        err = workload_error(model, X, workload.cliques)
        log.info("round %d measured %s, workload error %.6g", rnd.index, _clique_label(domain, rnd.clique), err)
        rows.append([rnd.index, _clique_label(domain, rnd.clique), "workload_l1", repr(err), args.seed])
    out.add("model.json", model.save)
    out.add_text("errors.csv", _csv_text(["round", "clique", "metric", "value", "trial_seed"], rows))
    out.add("provenance.jsonl", provenance.write)


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--oracle", choices=sorted(ORACLES), default="region-graph")
    p.add_argument("--iters", type=int, default=1000, help="outer Prox-PGM iterations")
    p.add_argument("--step", type=float, default=None, help="constant step size (default 2/Lipschitz)")
    p.add_argument("--damping", type=float, default=None, help="message damping in [0, 1)")
    p.add_argument("--inner-iters", type=int, default=1, help="GBP sweeps per outer iteration")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from clobbering
    # values given before the subcommand name
    def default(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default(0))
    p.add_argument("--out", default=default("."), help="output directory")
    p.add_argument("--log-level", default=default("WARNING"),
                   choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localpgm", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="sample a synthetic tree-model dataset")
    p.add_argument("--attrs", type=int, required=True)
    p.add_argument("--sizes", type=int, required=True, help="domain size of every attribute")
    p.add_argument("--records", type=int, required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("measure", parents=[common], help="noisy marginal measurements")
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--cliques", required=True, help="file, 'A,B;C,D', or random:k:width")
    p.add_argument("--epsilon", default="1.0", help="total epsilon, or inf for exact marginals")
    p.add_argument("--noise", choices=["laplace", "gaussian"], default="laplace")
    p.add_argument("--sigma", type=float, default=None)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("estimate", parents=[common], help="fit a model with Prox-PGM")
    p.add_argument("--measurements", required=True)
    p.add_argument("--domain", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("infer", parents=[common], help="marginal of a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--clique", required=True, help="comma-separated attribute names")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="L1 errors against a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--cliques", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mwem", parents=[common], help="iterative select-measure-estimate mechanism")
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--eps-per-round", default="0.1", help="epsilon per round, or inf for noiseless")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_mwem)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    out = Outputs(args.out)
    try:
        args.func(args, out)
        out.commit()
    except UsageError as exc:
        out.discard()
        parser.error(str(exc))
    except TableTooLargeError as exc:
        out.discard()
        print(f"localpgm: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError) as exc:
        out.discard()
        print(f"localpgm: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
