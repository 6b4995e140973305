"""Command line entry point: ``dyirma {synthesize,fit,diagnose,report}``.

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical failure,
5 convergence gate.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis, coalescent, gamma_kde
from .config import RunConfig, load_config
from .errors import ConfigError, ConvergenceError, DataError, DyirmaError
from .hier_model import PERMUTABLE
from .realization_io import (
    PriorSamples,
    RealizationStore,
    load_prior_samples,
    load_realizations,
    load_trace,
    save_prior_samples,
    save_realizations,
    save_trace,
)
from .sampler import Hyperpriors, SamplerConfig, run_chains

log = logging.getLogger("dyirma")

TRACE_GLOB = "trace_chain*.tsv"
RUN_LOG = "run_log.jsonl"
MANIFEST = "manifest.json"


def _positive(x):
    return x > 0


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".6g")
    return str(v)


def write_table(path: Path, columns, rows) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row.get(c)) for c in columns) + "\n")


# -- config translation -----------------------------------------------------

def hyperpriors(cfg: RunConfig) -> Hyperpriors:
    d = Hyperpriors()
    num = cfg.number
    nu = cfg.get("model", "wishart_nu")
    return Hyperpriors(
        mu_beta=num("model", "mu_beta", d.mu_beta),
        tau_beta=num("model", "tau_beta", d.tau_beta, check=_positive, what="(0, inf)"),
        p_incl=num("model", "p_incl", d.p_incl, check=lambda p: 0 < p < 1, what="(0, 1)"),
        mu_alpha=num("model", "mu_alpha", d.mu_alpha),
        tau_alpha=num("model", "tau_alpha", d.tau_alpha, check=_positive, what="(0, inf)"),
        wishart_nu=None if nu is None else num("model", "wishart_nu"),
        wishart_r=num("model", "wishart_r", d.wishart_r, check=_positive, what="(0, inf)"),
        ig_shape=num("model", "ig_shape", d.ig_shape, check=_positive, what="(0, inf)"),
        ig_scale=num("model", "ig_scale", d.ig_scale, check=_positive, what="(0, inf)"),
        beta_a=num("model", "beta_a", d.beta_a, check=_positive, what="(0, inf)"),
        beta_b=num("model", "beta_b", d.beta_b, check=_positive, what="(0, inf)"),
    )


def sampler_config(cfg: RunConfig, seed_override=None) -> SamplerConfig:
    num = cfg.number
    seed = num("sampler", "seed", 0, kind=int, check=lambda s: s >= 0, what="[0, inf)")
    if seed_override is not None:
        seed = seed_override
    return SamplerConfig(
        iterations=num("sampler", "iterations", kind=int, check=_positive, what="[1, inf)"),
        burn_in=num("sampler", "burn_in", 0.1, check=lambda b: 0 <= b < 1, what="[0, 1)"),
        thinning=num("sampler", "thinning", 10, kind=int, check=_positive, what="[1, inf)"),
        chains=num("sampler", "chains", 3, kind=int, check=_positive, what="[1, inf)"),
        seed=seed,
        step_size=num("sampler", "step_size", 0.2, check=_positive, what="(0, inf)"),
        cov_kind=cfg.cov_kind,
        permute=cfg.flag("model", "permute"),
        hyper=hyperpriors(cfg),
    )


def fit_kde(cfg: RunConfig, prior: PriorSamples) -> gamma_kde.GammaKernelKde:
    floor = cfg.get("kde", "floor")
    return gamma_kde.fit(
        prior.data,
        floor=None if floor is None else cfg.number("kde", "floor", check=_positive,
                                                    what="(0, inf)"),
        bandwidths=cfg.floats("kde", "bandwidths"),
        normalize=cfg.flag("kde", "normalize", True),
        bandwidth_sign=cfg.number("kde", "bandwidth_sign", -1, kind=int,
                                  check=lambda s: s in (-1, 1), what="{-1, 1}"),
    )


def _seasons(cfg: RunConfig) -> int:
    return cfg.number("data", "seasons", kind=int, check=lambda j: j >= 2, what="[2, inf)")


def _segments(cfg: RunConfig):
    seg = cfg.lists("data", "segments")
    return seg[0] if seg else None


def _load_store(cfg: RunConfig) -> RealizationStore:
    return load_realizations(cfg.path_of("realizations"), _seasons(cfg), _segments(cfg))


def _load_traces(cfg: RunConfig):
    out = cfg.path_of("output")
    files = sorted(out.glob(TRACE_GLOB), key=lambda p: int(re.findall(r"\d+", p.stem)[-1]))
    if not files:
        raise DataError(f"no trace files ({TRACE_GLOB}) in {out}")
    return [load_trace(f, chain_id=k) for k, f in enumerate(files)]


# -- subcommands ------------------------------------------------------------

def cmd_synthesize(cfg: RunConfig, seed_override=None) -> dict:
    if "synth" not in cfg.raw:
        raise ConfigError("[synth] section required for synthesize")
    num = cfg.number
    mode = cfg.get("synth", "mode", "hierarchical")
    n = num("synth", "segments", kind=int, check=_positive, what="[1, inf)")
    J = num("synth", "seasons", kind=int, check=lambda j: j >= 2, what="[2, inf)")
    M = num("synth", "draws", kind=int, check=_positive, what="[1, inf)")
    Mp = num("synth", "prior_draws", 1000, kind=int, check=lambda m: m >= 2, what="[2, inf)")
    seed = num("synth", "seed", 0, kind=int) if seed_override is None else seed_override
    rng = np.random.default_rng(seed)
    seasons = tuple(str(j + 1) for j in range(J))
    segments = tuple(f"seg{i + 1}" for i in range(n))
    manifest = {"mode": mode, "seed": seed, "segments": list(segments),
                "seasons": list(seasons)}

    if mode == "hierarchical":
        alpha = cfg.floats("synth", "alpha")
        alpha = np.linspace(2.0, 3.0, n) if alpha is None else np.asarray(alpha)
        if alpha.shape != (n,):
            raise ConfigError(f"[synth] alpha needs {n} values")
        jump_season = num("synth", "jump_season", min(J, 2), kind=int,
                          check=lambda s: 2 <= s <= J, what=f"[2, {J}]")
        jump = num("synth", "jump_size", 3.0)
        sigma2 = num("synth", "sigma2", 0.25, check=_positive, what="(0, inf)")
        sd = num("synth", "realization_sd", 0.1, check=_positive, what="(0, inf)")
        top = num("synth", "prior_max", 12.0, check=_positive, what="(0, inf)")
        beta = np.zeros(J - 1)
        beta[jump_season - 2] = jump
        gamma = (beta != 0).astype(int)
        offsets = np.concatenate(([0.0], np.cumsum(beta)))
        truth = alpha[:, None] + offsets[None, :] + rng.normal(0.0, math.sqrt(sigma2), (n, J))
        # reflection at 0 keeps stored times nonnegative
        data = np.abs(truth[:, None, :] + rng.normal(0.0, sd, (n, M, J)))
        prior = rng.uniform(0.0, top, (Mp, J))
        manifest.update(alpha=alpha.tolist(), beta=beta.tolist(), gamma=gamma.tolist(),
                        sigma2=sigma2, jump_season=seasons[jump_season - 2 + 1],
                        tmrca=truth.tolist(), realization_sd=sd, prior="uniform",
                        prior_max=top)
    else:
        per = num("synth", "taxa_per_season", 3, kind=int, check=_positive, what="[1, inf)")
        spacing = num("synth", "season_spacing", 1.0, check=_positive, what="(0, inf)")
        phi = cfg.floats("synth", "phi") or [1.0]
        if len(phi) == 1:
            phi = phi * n
        if len(phi) != n or min(phi) <= 0:
            raise ConfigError(f"[synth] phi needs 1 or {n} positive values")
        schedule = coalescent.SamplingSchedule.from_seasons(
            [per] * J, spacing * np.arange(J - 1, -1, -1), seasons)
        data = np.stack([
            coalescent.simulate_tmrcas(schedule, coalescent.PopTrajectory.constant(p), M, rng)
            for p in phi])
        hyper = coalescent.PhiHyperprior(
            groups=num("synth", "groups", 1, kind=int, check=_positive, what="[1, inf)"),
            phi_min=num("synth", "phi_min", 1e-3),
            phi_max=num("synth", "phi_max", 120_000.0),
        )
        prior = coalescent.sample_prior_tmrca(schedule, hyper, Mp, rng).data
        manifest.update(phi=list(phi), taxa_per_season=per, season_spacing=spacing,
                        prior_groups=hyper.groups, phi_min=hyper.phi_min,
                        phi_max=hyper.phi_max)

    store = RealizationStore(data, seasons, segments)
    real_dir = cfg.path_of("realizations", must_exist=False)
    files = save_realizations(store, real_dir)
    prior_path = cfg.path_of("prior", must_exist=False)
    prior_path.parent.mkdir(parents=True, exist_ok=True)
    save_prior_samples(PriorSamples(prior, seasons), prior_path)
    with open(real_dir / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return {"files": [str(f) for f in files], "prior": str(prior_path), "manifest": manifest}


def cmd_fit(cfg: RunConfig, jobs: int = 1, seed_override=None) -> list:
    sampler = sampler_config(cfg, seed_override)
    store = _load_store(cfg)
    prior = load_prior_samples(cfg.path_of("prior"), store.n_seasons)
    kde = fit_kde(cfg, prior)
    traces = run_chains(sampler, store, kde, jobs)
    out = cfg.path_of("output", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob(TRACE_GLOB):
        old.unlink()
    records = [{
        "event": "run",
        "config": str(cfg.path),
        "cov": sampler.cov_kind,
        "permute": sampler.permute,
        "chains": sampler.chains,
        "seeds": [sampler.seed + c for c in range(sampler.chains)],
        "kde_bandwidths": kde.bandwidths.tolist(),
        "kde_log_floor": kde.log_floor,
    }]
    for t in traces:
        save_trace(t, out / f"trace_chain{t.chain_id + 1}.tsv")
        records.append({"event": "chain", **t.info})
    with open(out / RUN_LOG, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return traces


def _diagnostic_rows(cfg: RunConfig, traces):
    return analysis.diagnostics(traces, split=cfg.flag("report", "split_rhat"))


def _write_diagnostics(path: Path, rows, n_chains: int) -> None:
    cols = ["parameter", "rhat"] + [f"geweke_{c + 1}" for c in range(n_chains)]
    write_table(path, cols, rows)


def cmd_diagnose(cfg: RunConfig) -> list[dict]:
    traces = _load_traces(cfg)
    rows = _diagnostic_rows(cfg, traces)
    _write_diagnostics(cfg.path_of("output") / "diagnostics.tsv", rows, len(traces))
    return rows


def _season_index(labels, text: str) -> int:
    if text not in labels:
        raise ConfigError(f"unknown season {text!r}; known: {', '.join(labels)}")
    k = labels.index(text)
    if k == 0:
        raise ConfigError(f"season {text!r} has no preceding jump")
    return k - 1


def _segment_index(labels, text: str) -> int:
    if text not in labels:
        raise ConfigError(f"unknown segment {text!r}; known: {', '.join(labels)}")
    return labels.index(text)


def cmd_report(cfg: RunConfig, force: bool = False) -> dict:
    traces = _load_traces(cfg)
    store = _load_store(cfg)
    out = cfg.path_of("output")
    diag = _diagnostic_rows(cfg, traces)
    _write_diagnostics(out / "diagnostics.tsv", diag, len(traces))
    limit = cfg.number("report", "rhat_max", 1.1, check=_positive, what="(0, inf)")
    bad = [r["parameter"] for r in diag if r["rhat"] > limit]
    if bad and not force:
        raise ConvergenceError(f"Rhat above {limit} for: {', '.join(bad)} (use --force)")
    pooled = analysis.concat(traces) if len(traces) > 1 else traces[0]
    method = cfg.get("report", "interval", "equal")
    if pooled.n_segments != store.n_segments or pooled.n_seasons != store.n_seasons:
        raise DataError("trace dimensions do not match the realization store")
    seasons, segments = list(store.season_labels), list(store.segment_labels)
    written = {"diagnostics.tsv": out / "diagnostics.tsv"}

    rows = [{"season": seasons[0], "absolute_mean": analysis.absolute_timecourse(pooled, 0),
             "absolute_mean_marginal": analysis.absolute_timecourse(pooled, 0, False)}]
    for k in range(len(seasons) - 1):
        s = analysis.conditional_mean_beta(pooled, k, method)
        rows.append({"season": seasons[k + 1], "inclusion": s.inclusion,
                     "relative_mean": s.mean, "relative_lo": s.lo, "relative_hi": s.hi,
                     "absolute_mean": analysis.absolute_timecourse(pooled, k + 1),
                     "absolute_mean_marginal": analysis.absolute_timecourse(pooled, k + 1, False)})
    write_table(out / "timecourse.tsv", ["season", "inclusion", "relative_mean", "relative_lo",
                                         "relative_hi", "absolute_mean", "absolute_mean_marginal"],
                rows)
    written["timecourse.tsv"] = out / "timecourse.tsv"

    rows = []
    for i, name in enumerate(segments):
        s = analysis.summarize(pooled.alpha[:, i], method)
        rows.append({"segment": name, "mean": s.mean, "lo": s.lo, "hi": s.hi})
    write_table(out / "segments.tsv", ["segment", "mean", "lo", "hi"], rows)
    written["segments.tsv"] = out / "segments.tsv"

    permuting = pooled.kind in PERMUTABLE and cfg.flag("model", "permute")
    threshold = cfg.number("report", "rho_threshold", 0.2)
    if permuting:
        rows = []
        for i in range(len(segments)):
            for k in range(i + 1, len(segments)):
                try:
                    p, p_rho = analysis.neighbor_probability(pooled, i, k, threshold)
                except DyirmaError:
                    p, p_rho = None, 0.0
                rows.append({"segment_a": segments[i], "segment_b": segments[k],
                             "probability": p, "p_rho_above": p_rho})
        write_table(out / "neighbors.tsv",
                    ["segment_a", "segment_b", "probability", "p_rho_above"], rows)
        written["neighbors.tsv"] = out / "neighbors.tsv"

    rows = []
    p_incl = hyperpriors(cfg).p_incl
    for pattern in cfg.lists("report", "patterns"):
        idx = [_season_index(seasons, s) for s in pattern]
        post = analysis.model_posterior_prob(pooled, idx, "exact")
        on = len(set(idx))
        prior = p_incl ** on * (1 - p_incl) ** (len(seasons) - 1 - on)
        rows.append(_bf_row("jumps{" + ",".join(pattern) + "}", post, prior))
    if permuting:
        groups = [[_segment_index(segments, s) for s in g] for g in cfg.lists("report", "groups")]
        for g, names in zip(groups, cfg.lists("report", "groups")):
            rows.append(_bf_row("group{" + ",".join(names) + "}",
                                analysis.posterior_group_probability(pooled, [g]),
                                analysis.prior_group_probability(len(segments), [g])))
        if len(groups) > 1:
            rows.append(_bf_row("all_groups",
                                analysis.posterior_group_probability(pooled, groups),
                                analysis.prior_group_probability(len(segments), groups)))
    for comp in cfg.lists("report", "comparisons"):
        for text in comp:
            if ">" not in text:
                raise ConfigError(f"[report] comparisons: expected A>B, got {text!r}")
            a, b = (_segment_index(segments, s.strip()) for s in text.split(">", 1))
            post = float(np.mean(pooled.alpha[:, a] > pooled.alpha[:, b]))
            rows.append(_bf_row(text, post, 0.5))
    write_table(out / "bayes_factors.tsv",
                ["hypothesis", "posterior_prob", "prior_prob", "posterior_odds", "prior_odds",
                 "bayes_factor"], rows)
    written["bayes_factors.tsv"] = out / "bayes_factors.tsv"

    rows = analysis.shrinkage_table(pooled, store, method)
    write_table(out / "shrinkage.tsv",
                ["segment", "season", "source", "mean", "lo", "hi", "grand_mean"], rows)
    written["shrinkage.tsv"] = out / "shrinkage.tsv"
    return written


def _bf_row(name: str, post: float, prior: float) -> dict:
    po, pr = analysis.odds(post), analysis.odds(prior)
    bf = analysis.bayes_factor(po, pr) if po > 0 and pr > 0 else None
    return {"hypothesis": name, "posterior_prob": post, "prior_prob": prior,
            "posterior_odds": po, "prior_odds": pr, "bayes_factor": bf}


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyirma", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["synthesize", "fit", "diagnose", "report"])
    parser.add_argument("--config", required=True, type=Path, help="run configuration (INI)")
    parser.add_argument("--jobs", type=int, default=1, help="chains run concurrently")
    parser.add_argument("--force", action="store_true", help="report despite failed Rhat gate")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "synthesize":
            res = cmd_synthesize(cfg, args.seed)
            print(f"wrote {len(res['files'])} realization files and {res['prior']}")
        elif args.command == "fit":
            traces = cmd_fit(cfg, args.jobs, args.seed)
            print(f"wrote {len(traces)} trace files to {cfg.path_of('output')}")
        elif args.command == "diagnose":
            rows = cmd_diagnose(cfg)
            worst = max((r["rhat"] for r in rows if not math.isnan(r["rhat"])), default=math.nan)
            print(f"{len(rows)} parameters; max Rhat {worst:.4f}")
        else:
            written = cmd_report(cfg, args.force)
            print("wrote " + ", ".join(sorted(written)))
    except DyirmaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
