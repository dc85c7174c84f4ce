"""Command line entry point.

Subcommands: simulate, calibrate, evaluate, sweep, mine, diagnose. Every
command resolves its parameters from defaults, then an optional --config
JSON file, then explicit flags (flags win), and writes the resolved
parameters next to its outputs so any run can be replayed byte-for-byte
from its own config file. LADCALIB_LOG sets the log level.

Exit codes: 0 success, 1 usage error, 2 data or invariant error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, calibration, debias, evaluation, synthetic, traces
from .benchgen import MiningParams, build_benchmark, read_embeddings
from .debias import DebiasConfig
from .evaluation import Episode, EvalError
from .synthetic import GeneratorConfig, load_preset, preset_names
from .util import LadcalibError, atomic_write_text, canonical_json

log = logging.getLogger("ladcalib.cli")

METHODS = ("vanilla", "pride", "perm-avg", "attn-raw", "attn-pure", "ours")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging() -> None:
    level = os.environ.get("LADCALIB_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# Parameter resolution: defaults < config file < explicit flags.


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    params = dict(defaults)
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        cmd = doc.pop("command", None)
        if cmd is not None and cmd != args.command:
            raise UsageError(f"config file is for command {cmd!r}, not {args.command!r}")
        unknown = set(doc) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        params.update(doc)
    for key in defaults:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            params[key] = value
    return params


def _write_effective(out_dir: Path, command: str, params: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **params}
    atomic_write_text(out_dir / f"{command}-config.json", canonical_json(doc, indent=1) + "\n")


def _generator_config(params: dict) -> GeneratorConfig:
    if params.get("gen_config"):
        with open(params["gen_config"], "r", encoding="utf-8") as f:
            cfg = GeneratorConfig.from_dict(json.load(f))
    else:
        name = params.get("preset")
        if not name:
            raise UsageError(f"need --preset or --gen-config; presets: {', '.join(preset_names())}")
        try:
            cfg = load_preset(name)
        except synthetic.GeneratorError:
            raise UsageError(f"unknown preset {name!r}; presets: {', '.join(preset_names())}") from None
    overrides = {}
    if params.get("noise_sigma") is not None:
        overrides["noise_sigma"] = float(params["noise_sigma"])
    if params.get("hardness") is not None:
        overrides["hardness"] = float(params["hardness"])
    if params.get("seed") is not None:
        overrides["seed"] = int(params["seed"])
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# simulate


_SIMULATE_DEFAULTS = {
    "preset": None,
    "gen_config": None,
    "episodes": 1000,
    "t": 5,
    "cal_size": 5,
    "seed": None,
    "noise_sigma": None,
    "hardness": None,
    "presentations": "random",
    "orbits": False,
    "out_dir": "out",
}


def cmd_simulate(args) -> int:
    params = _resolve(args, _SIMULATE_DEFAULTS)
    cfg = _generator_config(params)
    params["seed"] = cfg.seed
    out_dir = Path(params["out_dir"])
    _write_effective(out_dir, "simulate", params)

    cal = synthetic.generate_calibration_set(cfg, int(params["cal_size"]))
    specs, eval_traces, orbit_traces = synthetic.generate_eval_episodes(
        cfg,
        int(params["episodes"]),
        int(params["t"]),
        presentations=params["presentations"],
        orbits=bool(params["orbits"]),
    )
    traces.save_traces(out_dir / "cal.jsonl", cal)
    traces.save_traces(out_dir / "eval.jsonl", eval_traces)
    synthetic.write_manifest(out_dir / "episodes.jsonl", specs)
    if params["orbits"]:
        traces.save_traces(out_dir / "orbits.jsonl", orbit_traces)
    gen_doc = canonical_json(cfg.to_dict(), indent=1) + "\n"
    atomic_write_text(out_dir / "generator.json", gen_doc)
    print(
        f"wrote {len(cal)} calibration traces, {len(eval_traces)} evaluation traces, "
        f"{len(specs)} episodes to {out_dir}"
        + (f" (+{len(orbit_traces)} orbit traces)" if params["orbits"] else "")
    )
    return 0


# ---------------------------------------------------------------------------
# calibrate


_CALIBRATE_DEFAULTS = {
    "traces": None,
    "out": None,
    "smoothing": calibration.DEFAULT_SMOOTHING,
    "created": None,
    "out_dir": "out",
}


def cmd_calibrate(args) -> int:
    params = _resolve(args, _CALIBRATE_DEFAULTS)
    if not params["traces"]:
        raise UsageError("calibrate needs --traces")
    if params["created"] is None:
        params["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    out_dir = Path(params["out_dir"])
    out = Path(params["out"]) if params["out"] else out_dir / "profile.json"
    params["out"] = str(out)
    _write_effective(out_dir, "calibrate", params)

    cal = traces.load_traces(params["traces"])
    profile = calibration.build_profile(
        cal, smoothing=float(params["smoothing"]), created=params["created"]
    )
    calibration.save_profile(out, profile)
    print(f"profile: n={profile.n} scheme={profile.scheme} layers={profile.layers} "
          f"gamma={profile.gamma:.6g} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


_EVALUATE_DEFAULTS = {
    "traces": None,
    "manifest": None,
    "profile": None,
    "cal": None,
    "orbits": None,
    "method": "ours",
    "k": 2,
    "tau": 5.0,
    "perm_avg_log": False,
    "dump": None,
    "plots": False,
    "out_dir": "out",
}


def _orbit_lookup(orbit_traces, n: int):
    groups: dict[tuple[str, int], list] = {}
    for t in orbit_traces:
        groups.setdefault((t.instance_id, t.shuffle_id // n), []).append(t)
    return groups


def _build_predictor(method: str, params: dict, context: dict):
    cfg: DebiasConfig = context["cfg"]
    if method == "vanilla":
        return baselines.vanilla_predict
    if method == "pride":
        if context["global_prior"] is None:
            raise UsageError("method 'pride' needs --cal (calibration traces)")
        prior = context["global_prior"]
        return lambda t: baselines.pride_predict(t, prior)
    if method == "attn-raw":
        return lambda t: baselines.attention_readout_predict(t, cfg.k)
    if method == "attn-pure":
        if context["profile"] is None:
            raise UsageError("method 'attn-pure' needs --profile")
        profile = context["profile"]
        return lambda t: baselines.purified_attention_predict(t, profile.attn_prior, cfg)
    if method == "ours":
        if context["profile"] is None:
            raise UsageError("method 'ours' needs --profile")
        profile = context["profile"]
        return lambda t: debias.predict(t, profile, cfg).predicted_index
    if method == "perm-avg":
        if context["orbits"] is None:
            raise UsageError("method 'perm-avg' needs --orbits (simulate with --orbits)")
        lookup = _orbit_lookup(context["orbits"], context["n"])
        log_domain = bool(params["perm_avg_log"])

        def perm_avg(t):
            orbit = lookup.get((t.instance_id, t.shuffle_id))
            if orbit is None:
                raise EvalError(f"{t.instance_id}: no orbit for shuffle {t.shuffle_id}")
            identity = baselines.permutation_average_predict(orbit, log_domain=log_domain)
            return t.images.index(identity) + 1

        return perm_avg
    raise UsageError(f"unknown method {method!r}; known: {', '.join(METHODS)} or 'all'")


def _plot_confusion(path, report, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(report.confusion, cmap="Blues", vmin=0, vmax=100)
    ax.set_xlabel("predicted position")
    ax.set_ylabel("ground-truth position")
    ax.set_xticks(range(report.n), [str(i + 1) for i in range(report.n)])
    ax.set_yticks(range(report.n), [str(i + 1) for i in range(report.n)])
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="selection rate (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "ladcalib"})
    plt.close(fig)


def cmd_evaluate(args) -> int:
    params = _resolve(args, _EVALUATE_DEFAULTS)
    for key in ("traces", "manifest"):
        if not params[key]:
            raise UsageError(f"evaluate needs --{key}")
    out_dir = Path(params["out_dir"])
    _write_effective(out_dir, "evaluate", params)

    eval_traces = traces.load_traces(params["traces"])
    manifest = synthetic.read_manifest(params["manifest"])
    episodes = evaluation.assemble_episodes(manifest, eval_traces)
    if not episodes:
        raise EvalError(f"{params['manifest']}: empty episode manifest")
    n = episodes[0].presentations[0].n
    cfg = DebiasConfig(k=int(params["k"]), tau=float(params["tau"]))
    context = {
        "cfg": cfg,
        "n": n,
        "profile": calibration.load_profile(params["profile"]) if params["profile"] else None,
        "global_prior": (
            baselines.estimate_global_prior(traces.load_traces(params["cal"]))
            if params["cal"]
            else None
        ),
        "orbits": traces.load_traces(params["orbits"]) if params["orbits"] else None,
    }
    methods = list(METHODS) if params["method"] == "all" else [params["method"]]
    predictors = {m: _build_predictor(m, params, context) for m in methods}
    rows = []
    for method in methods:
        report = evaluation.evaluate(predictors[method], episodes)
        rows.append((method, report))
        suffix = "" if len(methods) == 1 else f"_{method.replace('-', '_')}"
        evaluation.write_confusion_csv(out_dir / f"confusion{suffix}.csv", report)
        evaluation.write_recalls_csv(out_dir / f"recalls{suffix}.csv", report)
        if params["plots"]:
            _plot_confusion(out_dir / f"confusion{suffix}.png", report, method)
        print(
            f"{method}: acc={report.acc_mean:.2f}+-{report.acc_std:.2f} "
            f"rstd={report.rstd:.2f} consistency={report.consistency:.2f}"
        )
    evaluation.write_summary_csv(out_dir / "summary.csv", rows)
    if params["dump"]:
        if context["profile"] is None:
            raise UsageError("--dump needs --profile (it records the corrected scores)")
        records = []
        for ep in episodes:
            for t in ep.presentations:
                result = debias.predict(t, context["profile"], cfg)
                records.append(canonical_json(result.to_record(t)))
        atomic_write_text(Path(params["dump"]), "".join(r + "\n" for r in records))
    return 0


# ---------------------------------------------------------------------------
# sweep


_SWEEP_DEFAULTS = {
    "sweep": None,
    "values": None,
    "preset": None,
    "gen_config": None,
    "episodes": 400,
    "t": 5,
    "cal_size": 5,
    "seed": None,
    "noise_sigma": None,
    "hardness": None,
    "method": "ours",
    "k": 2,
    "tau": 5.0,
    "plots": False,
    "out_dir": "out",
}

_SWEEP_PARAMS = ("tau", "cal-size", "k", "n")


def _episodes_in_memory(cfg: GeneratorConfig, count: int, t: int) -> list[Episode]:
    specs, eval_traces, _ = synthetic.generate_eval_episodes(cfg, count, t)
    by_key = {(tr.instance_id, tr.shuffle_id): tr for tr in eval_traces}
    return [
        Episode(
            instance_id=s.episode_id,
            images=s.images,
            gt_image=s.gt_image,
            presentations=tuple(by_key[(s.episode_id, i)] for i in range(t)),
        )
        for s in specs
    ]


def cmd_sweep(args) -> int:
    params = _resolve(args, _SWEEP_DEFAULTS)
    if params["sweep"] not in _SWEEP_PARAMS:
        raise UsageError(f"--sweep must be one of {', '.join(_SWEEP_PARAMS)}")
    if not params["values"]:
        raise UsageError("sweep needs --values (comma-separated)")
    if params["method"] not in ("vanilla", "attn-raw", "attn-pure", "ours"):
        raise UsageError("sweep supports single-trace methods: vanilla, attn-raw, attn-pure, ours")
    out_dir = Path(params["out_dir"])
    _write_effective(out_dir, "sweep", params)

    base_cfg = _generator_config(params)
    values_raw = [v.strip() for v in str(params["values"]).split(",") if v.strip()]
    sweep_name = params["sweep"]
    results = []
    for raw in values_raw:
        value = float(raw) if sweep_name == "tau" else int(raw)
        cfg = base_cfg
        dc = DebiasConfig(k=int(params["k"]), tau=float(params["tau"]))
        cal_size = int(params["cal_size"])
        if sweep_name == "tau":
            dc = DebiasConfig(k=dc.k, tau=float(value))
        elif sweep_name == "k":
            dc = DebiasConfig(k=int(value), tau=dc.tau)
        elif sweep_name == "cal-size":
            cal_size = int(value)
        elif sweep_name == "n":
            cfg = synthetic.resize_config(base_cfg, int(value))
        profile = calibration.build_profile(synthetic.generate_calibration_set(cfg, cal_size))
        episodes = _episodes_in_memory(cfg, int(params["episodes"]), int(params["t"]))
        method = params["method"]
        if method == "vanilla":
            predictor = baselines.vanilla_predict
        elif method == "attn-raw":
            predictor = lambda t, _dc=dc: baselines.attention_readout_predict(t, _dc.k)
        elif method == "attn-pure":
            predictor = lambda t, _p=profile, _dc=dc: baselines.purified_attention_predict(
                t, _p.attn_prior, _dc
            )
        else:
            predictor = lambda t, _p=profile, _dc=dc: debias.predict(t, _p, _dc).predicted_index
        report = evaluation.evaluate(predictor, episodes)
        results.append((value, report))
        print(
            f"{sweep_name}={value}: acc={report.acc_mean:.2f}+-{report.acc_std:.2f} "
            f"rstd={report.rstd:.2f} consistency={report.consistency:.2f}"
        )

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([sweep_name, "acc", "acc_std", "rstd", "consistency"])
    for value, rep in results:
        w.writerow([value, f"{rep.acc_mean:.2f}", f"{rep.acc_std:.2f}",
                    f"{rep.rstd:.2f}", f"{rep.consistency:.2f}"])
    atomic_write_text(out_dir / "sweep.csv", buf.getvalue())
    if params["plots"]:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = [v for v, _ in results]
        ax.errorbar(xs, [r.acc_mean for _, r in results], yerr=[r.acc_std for _, r in results],
                    marker="o")
        ax.set_xlabel(sweep_name)
        ax.set_ylabel("accuracy (%)")
        ax.set_title(f"{params['method']} vs {sweep_name}")
        fig.tight_layout()
        fig.savefig(out_dir / "sweep.png", dpi=120, metadata={"Software": "ladcalib"})
        plt.close(fig)
    return 0


# ---------------------------------------------------------------------------
# mine


_MINE_DEFAULTS = {
    "embeddings": None,
    "count": 1000,
    "n": 4,
    "mode": "adversarial",
    "seed": 0,
    "txt_threshold": 0.9,
    "category_filter": True,
    "out": None,
    "out_dir": "out",
}


def cmd_mine(args) -> int:
    params = _resolve(args, _MINE_DEFAULTS)
    if not params["embeddings"]:
        raise UsageError("mine needs --embeddings")
    out_dir = Path(params["out_dir"])
    out = Path(params["out"]) if params["out"] else out_dir / "mined.jsonl"
    params["out"] = str(out)
    _write_effective(out_dir, "mine", params)

    pool = read_embeddings(params["embeddings"])
    mining = MiningParams(
        num_negatives=int(params["n"]) - 1,
        txt_threshold=float(params["txt_threshold"]),
        exclude_identical_categories=bool(params["category_filter"]),
    )
    episodes = build_benchmark(
        pool,
        count=int(params["count"]),
        n=int(params["n"]),
        mode=params["mode"],
        seed=int(params["seed"]),
        params=mining,
        jobs=max(1, int(getattr(args, "jobs", 1) or 1)),
    )
    synthetic.write_manifest(out, episodes)
    print(f"wrote {len(episodes)} {params['mode']} episodes to {out}")
    return 0


# ---------------------------------------------------------------------------
# diagnose


_DIAGNOSE_DEFAULTS = {"traces": None, "k": 2, "out_dir": "out"}


def cmd_diagnose(args) -> int:
    params = _resolve(args, _DIAGNOSE_DEFAULTS)
    if not params["traces"]:
        raise UsageError("diagnose needs --traces")
    out_dir = Path(params["out_dir"])
    _write_effective(out_dir, "diagnose", params)

    ts = traces.load_traces(params["traces"])
    profiles = evaluation.logit_profile_report(ts)
    divergence = evaluation.divergence_report(ts, DebiasConfig(k=int(params["k"])))
    evaluation.write_profiles_csv(out_dir / "profiles.csv", profiles)
    evaluation.write_divergence_csv(out_dir / "divergence.csv", divergence)
    print(
        f"{len(ts)} traces, {len(profiles)} ground-truth groups; "
        f"attention argmax accuracy {100 * divergence.attention_accuracy:.2f}%, "
        f"logit argmax accuracy {100 * divergence.logit_accuracy:.2f}%"
    )
    return 0


# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with parameters (flags win)")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (default: out)")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallelism bound (used where per-item work is heavy, e.g. mining)")


def build_parser() -> _Parser:
    parser = _Parser(prog="ladcalib", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[], help="generate synthetic traces and episodes")
    p.add_argument("--preset", help=f"generator preset ({', '.join(preset_names())})")
    p.add_argument("--gen-config", dest="gen_config", help="generator config JSON file")
    p.add_argument("--episodes", type=int)
    p.add_argument("--t", type=int, help="shuffled presentations per episode")
    p.add_argument("--cal-size", dest="cal_size", type=int, help="calibration base instances")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--hardness", type=float)
    p.add_argument("--presentations", choices=("random", "cyclic"))
    p.add_argument("--orbits", action="store_const", const=True,
                   help="also write the cyclic orbit of every presentation")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="estimate a calibration profile from traces")
    p.add_argument("--traces")
    p.add_argument("--out")
    p.add_argument("--smoothing", type=float)
    p.add_argument("--created", help="timestamp recorded in the profile (for replays)")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="run predictors over an episode set")
    p.add_argument("--traces")
    p.add_argument("--manifest")
    p.add_argument("--profile")
    p.add_argument("--cal", help="calibration traces (for the static-prior baseline)")
    p.add_argument("--orbits", help="orbit traces (for permutation averaging)")
    p.add_argument("--method", choices=METHODS + ("all",))
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--perm-avg-log", dest="perm_avg_log", action="store_const", const=True,
                   help="average log-probabilities instead of probabilities")
    p.add_argument("--dump", help="write per-instance corrected records to this JSONL file")
    p.add_argument("--plots", action="store_const", const=True)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="ablation sweeps over tau, cal-size, k, or n")
    p.add_argument("--sweep", choices=_SWEEP_PARAMS)
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--preset")
    p.add_argument("--gen-config", dest="gen_config")
    p.add_argument("--episodes", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--cal-size", dest="cal_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--hardness", type=float)
    p.add_argument("--method")
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--plots", action="store_const", const=True)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mine", help="build episode manifests from precomputed embeddings")
    p.add_argument("--embeddings")
    p.add_argument("--count", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--mode", choices=("random", "adversarial"))
    p.add_argument("--seed", type=int)
    p.add_argument("--txt-threshold", dest="txt_threshold", type=float)
    p.add_argument("--no-category-filter", dest="category_filter", action="store_const", const=False)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("diagnose", help="logit-profile and divergence tables")
    p.add_argument("--traces")
    p.add_argument("--k", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LadcalibError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
