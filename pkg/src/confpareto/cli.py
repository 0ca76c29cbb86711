"""Command-line front end: ``gen``, ``fit``, ``frontier`` and ``coverage``.

Options may also come from a JSON file passed with ``--config``; explicit flags win over
the file, and the file wins over built-in defaults.  Every output carries a
``schema_version`` and an echo of the effective options so a run can be replayed.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from pathlib import Path

import numpy as np

from .bundle import SCHEMA_VERSION, ModelBundle, build_bundle, write_json
from .conformal import AlphaSpec
from .data import CsvSchema, Dataset, StarCostConfig, export_csv, load_csv, schema_of, split_random, star_cost_parameters, star_synthesize_costs
from .errors import ConfParetoError, DomainError, SchemaError
from .policy import NUM_SYNTHETIC_DECISIONS, PolicyModel, fit_generative_policy, fit_propensity_policy, known_policy_fixed, known_policy_synthetic
from .quantile import QuantileFitConfig, fit_linear_pinball, fit_quantile_forest
from .scenarios import ForestSettings, SyntheticConfig, coverage_mc, gen_synthetic, star_standin
from .seeding import STREAM_FOREST, STREAM_LINEAR, fresh_seed, int_seed_for

# options that change how a run executes but not what it produces
NOT_ECHOED = frozenset({"threads", "out", "config", "command"})
STOCHASTIC = frozenset({"gen", "fit", "coverage"})

DEFAULTS = {
    "gen": {
        "scenario": "synthetic",
        "policy": "uniform",
        "n": None,
        "rho": -0.2,
        "input": None,
        "schema": None,
        "decision": None,
        "rewards": None,
        "covariates": None,
        "floors": None,
        "mu": 10.0,
        "sigma": 1.0,
    },
    "fit": {
        "data": None,
        "schema": None,
        "decision": None,
        "rewards": None,
        "covariates": None,
        "floors": None,
        "alpha": 0.2,
        "alpha_per_reward": None,
        "policy": "generative",
        "policy_probs": None,
        "model": "forest",
        "trees": 100,
        "min_leaf": 5,
        "max_depth": None,
        "feature_subsample": 1.0 / 3.0,
        "solver": "highs",
        "components": 2,
    },
    "frontier": {"bundle": None, "z": None},
    "coverage": {
        "alpha": [0.2],
        "replicates": 500,
        "policy": "known-uniform",
        "assignment": None,
        "rho": -0.2,
        "n": 1000,
        "n_test": 200,
        "probe_z": [],
        "trees": 100,
        "min_leaf": 5,
    },
}
COMMON = {"seed": None, "threads": 1, "out": "."}


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="confpareto", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=S, help="master seed (a fresh one is drawn and recorded if omitted)")
        p.add_argument("--threads", type=int, default=S, help="inner parallelism; results do not depend on it")
        p.add_argument("--out", default=S, help="output directory")
        p.add_argument("--config", default=S, help="JSON file of option values; flags override it")

    def columns(p):
        p.add_argument("--schema", default=S, help="JSON file with decision/rewards/covariates/reward_floors")
        p.add_argument("--decision", default=S, help="decision column (default: first column)")
        p.add_argument("--rewards", type=_csv_names, default=S, help="comma-separated reward columns (default: y1, y2, ...)")
        p.add_argument("--covariates", type=_csv_names, default=S, help="comma-separated covariate columns (default: the rest)")
        p.add_argument("--floors", type=_csv_floats, default=S, help="comma-separated reward floors")

    g = sub.add_parser("gen", help="generate or augment a dataset")
    common(g)
    g.add_argument("--scenario", choices=["synthetic", "star-standin", "star-cost"], default=S)
    g.add_argument("--policy", choices=["uniform", "unbalanced"], default=S, help="logging policy of the synthetic scenario")
    g.add_argument("--n", type=int, default=S)
    g.add_argument("--rho", type=float, default=S, help="noise correlation of the synthetic rewards")
    g.add_argument("--input", default=S, help="input CSV for --scenario star-cost")
    g.add_argument("--mu", type=float, default=S)
    g.add_argument("--sigma", type=float, default=S)
    columns(g)

    f = sub.add_parser("fit", help="split, fit quantile and policy models, write a bundle")
    common(f)
    f.add_argument("--data", default=S, help="dataset CSV")
    columns(f)
    f.add_argument("--alpha", type=float, default=S)
    f.add_argument("--alpha-per-reward", type=_csv_floats, default=S, help="explicit per-reward alphas")
    f.add_argument(
        "--policy",
        choices=["known-uniform", "known-unbalanced", "known-fixed", "generative", "propensity"],
        default=S,
    )
    f.add_argument("--policy-probs", type=_csv_floats, default=S, help="p(x) for known-fixed (default: data frequencies)")
    f.add_argument("--model", choices=["forest", "linear"], default=S)
    f.add_argument("--trees", type=int, default=S)
    f.add_argument("--min-leaf", type=int, default=S)
    f.add_argument("--max-depth", type=int, default=S)
    f.add_argument("--feature-subsample", type=float, default=S)
    f.add_argument("--solver", choices=["highs", "subgradient"], default=S)
    f.add_argument("--components", type=int, default=S, help="mixture components per decision")

    fr = sub.add_parser("frontier", help="bounds and efficient decisions at given contexts")
    common(fr)
    fr.add_argument("--bundle", default=S)
    fr.add_argument("--z", type=_csv_floats, action="append", default=S, help="context; repeat for several, commas for d > 1")

    c = sub.add_parser("coverage", help="Monte Carlo coverage on the synthetic scenario")
    common(c)
    c.add_argument("--alpha", type=float, action="append", default=S)
    c.add_argument("--replicates", type=int, default=S)
    c.add_argument("--policy", choices=["known", "known-uniform", "known-unbalanced", "generative", "propensity"], default=S)
    c.add_argument("--assignment", choices=["uniform", "unbalanced"], default=S, help="logging policy of the generated data")
    c.add_argument("--rho", type=float, default=S)
    c.add_argument("--n", type=int, default=S, help="training points per replicate")
    c.add_argument("--n-test", type=int, default=S)
    c.add_argument("--probe-z", type=float, action="append", default=S)
    c.add_argument("--trees", type=int, default=S)
    c.add_argument("--min-leaf", type=int, default=S)
    return parser


def resolve_options(command: str, explicit: dict) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    opts = {**COMMON, **DEFAULTS[command]}
    if "config" in explicit:
        with open(explicit["config"], encoding="utf-8") as fh:
            blob = json.load(fh)
        if not isinstance(blob, dict):
            raise SchemaError("config file must hold a JSON object")
        blob = blob.get(command, blob)
        for key, value in blob.items():
            key = key.replace("-", "_")
            if key not in opts:
                raise SchemaError(f"unknown option {key!r} for {command}")
            opts[key] = value
    opts.update({k: v for k, v in explicit.items() if k != "config"})
    if command in STOCHASTIC:
        opts["seed_generated"] = opts["seed"] is None
        if opts["seed"] is None:
            opts["seed"] = fresh_seed()
    return opts


def echo(opts: dict) -> dict:
    return {k: v for k, v in sorted(opts.items()) if k not in NOT_ECHOED}


# ---------------------------------------------------------------------------
# schema resolution


def _header(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])


def resolve_schema(path, opts: dict) -> CsvSchema:
    """Column roles from, in order: ``--schema`` file, a ``<stem>.meta.json`` sibling, inference.

    Column flags override whichever source was used.  Inference takes the first column as
    the decision, columns named ``y<digits>`` as rewards and the rest as covariates.
    """
    path = Path(path)
    base = None
    if opts.get("schema"):
        with open(opts["schema"], encoding="utf-8") as fh:
            base = CsvSchema.from_dict(json.load(fh))
    else:
        meta = path.with_suffix(".meta.json")
        if meta.exists():
            with open(meta, encoding="utf-8") as fh:
                blob = json.load(fh)
            if "schema" in blob:
                base = CsvSchema.from_dict(blob["schema"])
    header = _header(path)
    if base is None:
        if not header:
            raise SchemaError(f"{path} has no header")
        decision = opts.get("decision") or header[0]
        rewards = [h for h in header if re.fullmatch(r"y\d+", h) and h != decision]
        base = CsvSchema(decision, tuple(rewards), tuple(h for h in header if h != decision and h not in rewards))
    decision = opts.get("decision") or base.decision
    rewards = tuple(opts["rewards"]) if opts.get("rewards") else base.rewards
    if opts.get("covariates"):
        covariates = tuple(opts["covariates"])
    elif opts.get("rewards") or opts.get("decision"):
        covariates = tuple(h for h in header if h != decision and h not in rewards)
    else:
        covariates = base.covariates
    floors = base.reward_floors if rewards == base.rewards else None
    if opts.get("floors") is not None:
        floors = tuple(float(v) for v in opts["floors"])
    if not rewards:
        raise SchemaError("no reward columns; name them with --rewards")
    return CsvSchema(decision, rewards, covariates, floors)


# ---------------------------------------------------------------------------
# commands


def _outdir(opts) -> Path:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_gen(opts: dict) -> list[Path]:
    seed = opts["seed"]
    scenario = opts["scenario"]
    extra = {}
    columns = None
    if scenario == "synthetic":
        cfg = SyntheticConfig(policy=opts["policy"], n=opts["n"] or 1000, rho=opts["rho"], seed=seed)
        data = gen_synthetic(cfg)
    elif scenario == "star-standin":
        data = star_standin(n=opts["n"] or 6322, seed=seed)
    elif scenario == "star-cost":
        if not opts.get("input"):
            raise SchemaError("--scenario star-cost needs --input")
        source = load_csv(opts["input"], resolve_schema(opts["input"], opts))
        cfg = StarCostConfig(mu=opts["mu"], sigma=opts["sigma"], seed=seed)
        params = star_cost_parameters(source, cfg)
        data = star_synthesize_costs(source, cfg, params)
        columns = [*_header(opts["input"]), data.reward_names[-1]]
        if sorted(columns) != sorted([data.decision_name, *data.reward_names, *data.covariate_names]):
            columns = None  # input had unused columns; fall back to canonical order
        extra["cost_parameters"] = {
            "beta": params.beta.tolist(),
            "omega0": params.omega0,
            "omega2": params.omega2,
        }
    else:
        raise DomainError(f"unknown scenario {scenario!r}")
    out = _outdir(opts)
    csv_path, meta_path = out / "data.csv", out / "data.meta.json"
    export_csv(data, csv_path, columns)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "command": "gen",
        "config": echo(opts),
        "seed": seed,
        "schema": schema_of(data).to_dict(),
        "n": data.n,
        "num_decisions": data.num_decisions,
        "decision_labels": list(data.decision_labels),
        **extra,
    }
    write_json(meta_path, meta)
    return [csv_path, meta_path]


def _fit_policy(opts: dict, data: Dataset, train: Dataset) -> PolicyModel:
    variant = opts["policy"]
    K, d = data.num_decisions, data.d
    if variant == "known-uniform":
        return PolicyModel(variant="known", num_decisions=K, d=d, rule="uniform")
    if variant == "known-unbalanced":
        if (K, d) != (NUM_SYNTHETIC_DECISIONS, 1):
            raise SchemaError("known-unbalanced needs 5 decisions and one covariate")
        return known_policy_synthetic("unbalanced")
    if variant == "known-fixed":
        probs = opts.get("policy_probs")
        if probs is None:
            probs = np.bincount(data.decisions, minlength=K) / data.n
        if len(probs) != K:
            raise SchemaError(f"--policy-probs has {len(probs)} entries for {K} decisions")
        return known_policy_fixed(probs, d)
    if variant == "generative":
        return fit_generative_policy(train, components=opts["components"])
    if variant == "propensity":
        return fit_propensity_policy(train)
    raise DomainError(f"unknown policy {variant!r}")


def cmd_fit(opts: dict) -> list[Path]:
    if not opts.get("data"):
        raise SchemaError("fit needs --data")
    seed = opts["seed"]
    data = load_csv(opts["data"], resolve_schema(opts["data"], opts))
    if opts.get("alpha_per_reward"):
        alpha = AlphaSpec(opts["alpha"], tuple(opts["alpha_per_reward"]))
        if alpha.m != data.m:
            raise SchemaError(f"{alpha.m} per-reward alphas for {data.m} rewards")
    else:
        alpha = AlphaSpec.equal(opts["alpha"], data.m)
    split = split_random(data, seed)
    train = split.proper_training
    models = []
    for k in range(data.m):
        cfg = QuantileFitConfig(
            level=alpha.per_reward[k],
            trees=opts["trees"],
            min_leaf=opts["min_leaf"],
            max_depth=opts["max_depth"],
            feature_subsample=opts["feature_subsample"],
            seed=int_seed_for(seed, STREAM_LINEAR if opts["model"] == "linear" else STREAM_FOREST, k),
            threads=opts["threads"],
        )
        if opts["model"] == "forest":
            models.append(fit_quantile_forest(train, k, cfg))
        else:
            models.append(fit_linear_pinball(train, k, cfg, solver=opts["solver"]))
    policy = _fit_policy(opts, data, train)
    bundle = build_bundle(split, models, policy, alpha, echo(opts))
    path = _outdir(opts) / "bundle.json"
    bundle.save(path)
    return [path]


def cmd_frontier(opts: dict) -> list[Path]:
    if not opts.get("bundle"):
        raise SchemaError("frontier needs --bundle")
    if not opts.get("z"):
        raise SchemaError("frontier needs at least one --z")
    bundle = ModelBundle.load(opts["bundle"])
    reports = [(np.asarray(z, dtype=float), bundle.frontier(z)) for z in opts["z"]]
    out = _outdir(opts)
    written = []
    for i, (z, rep) in enumerate(reports):
        stem = out / f"frontier_{i:03d}"
        payload = {
            "schema_version": SCHEMA_VERSION,
            "command": "frontier",
            "config": echo(opts),
            "decisions": [b.to_dict(bundle.alpha.total, z) for b in bundle.bounds_at(z)],
            "reward_names": list(bundle.calibration.reward_names),
            **rep.to_dict(),
        }
        write_json(stem.with_suffix(".json"), payload)
        _write_table(stem.with_suffix(".csv"), *rep.csv_rows())
        written += [stem.with_suffix(".json"), stem.with_suffix(".csv")]
    return written


def _coverage_variant(opts: dict) -> tuple[str, str]:
    policy, assignment = opts["policy"], opts.get("assignment")
    if policy.startswith("known-"):
        implied = policy.split("-", 1)[1]
        if assignment not in (None, implied):
            raise DomainError(f"--policy {policy} contradicts --assignment {assignment}")
        return "known", implied
    return policy, assignment or "uniform"


def cmd_coverage(opts: dict) -> list[Path]:
    variant, assignment = _coverage_variant(opts)
    cfg = SyntheticConfig(policy=assignment, n=opts["n"], rho=opts["rho"], seed=opts["seed"])
    report = coverage_mc(
        cfg,
        opts["alpha"],
        replicates=opts["replicates"],
        n_test=opts["n_test"],
        policy_variant=variant,
        seed=opts["seed"],
        threads=opts["threads"],
        forest=ForestSettings(trees=opts["trees"], min_leaf=opts["min_leaf"]),
        probe_z=opts["probe_z"] or (),
    )
    out = _outdir(opts)
    payload = {"schema_version": SCHEMA_VERSION, "command": "coverage", "config": echo(opts), **report.to_dict()}
    write_json(out / "coverage.json", payload)
    _write_table(out / "coverage.csv", *report.csv_rows())
    return [out / "coverage.json", out / "coverage.csv"]


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "frontier": cmd_frontier, "coverage": cmd_coverage}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    try:
        opts = resolve_options(command, args)
        written = COMMANDS[command](opts)
    except (ConfParetoError, OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"confpareto {command}: error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
