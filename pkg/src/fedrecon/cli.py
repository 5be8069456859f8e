"""Batch experiment driver: dataset generation, training runs, tables.

Commands:

* ``gen-data``        generate and persist the configured synthetic sites
* ``train``           run one strategy; write params, report, round log
* ``compare``         hold-out (scenario 1) and collaboration (scenario 2)
                      sweeps across strategies and seeds; one CSV table
* ``ablate-cm``       every ordered source->target pair with and without
                      cross-site alignment; one CSV table
* ``export-latents``  bottleneck feature CSV for every site, given a model

All artifacts are deterministic functions of the config: no timestamps,
fixed column orders, fixed float formatting (repr). Seed repeats and
independent runs execute in a thread pool whose size never affects the
output bytes.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import fl
from .autodiff import ParamSet
from .config import (
    ExperimentConfig,
    build_profiles,
    load_config,
    serialize_config,
    site_train_count,
)
from .metrics import export_latents
from .sites import generate_site, load_dataset, save_dataset

__all__ = ["main"]


class CommandError(Exception):
    """User-facing failure; main() turns it into exit code 1."""


# -- dataset plumbing -----------------------------------------------------------


def _site_path(cfg: ExperimentConfig, site_id: str) -> str:
    return os.path.join(cfg.data_dir, f"site_{site_id}.flmr")


def _mask_params(cfg: ExperimentConfig):
    return (cfg.fl.acceleration, cfg.fl.center_fraction)


def _generate_one(cfg: ExperimentConfig, profile):
    return generate_site(
        profile, site_train_count(cfg, profile.site_id), cfg.n_test,
        cfg.fl.image_size, _mask_params(cfg),
    )


def _load_sites(cfg: ExperimentConfig):
    """Sites in config order, from disk when present, regenerated otherwise."""
    sites = {}
    for profile in build_profiles(cfg):
        path = _site_path(cfg, profile.site_id)
        if os.path.exists(path):
            sites[profile.site_id] = load_dataset(path)
        elif cfg.autogen:
            sites[profile.site_id] = _generate_one(cfg, profile)
        else:
            raise CommandError(
                f"dataset file {path!r} is missing; run gen-data or set data.autogen = true"
            )
    return sites


# -- artifact writers ------------------------------------------------------------


def _write_config(cfg: ExperimentConfig, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    # thread count and output location are execution details with no
    # effect on any result, so artifacts record canonical values and stay
    # byte-stable under them
    text = serialize_config(dataclasses.replace(cfg, threads=1, out_dir="out"))
    path = os.path.join(directory, "config.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_csv(path: str, digest: str, seeds, header, rows) -> None:
    """Comment lines bind the table to its config; then fixed-order CSV."""
    lines = [
        f"# config sha256 = {digest}",
        f"# seeds = {','.join(str(s) for s in seeds)}",
        ",".join(header),
    ]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _fanout(threads: int, jobs, worker):
    """Run worker over jobs, preserving job order in the returned list."""
    if threads <= 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, jobs))


def _run_one(cfg: ExperimentConfig, sites, strategy, train_ids, test_id, seed):
    flcfg = dataclasses.replace(cfg.fl, seed=seed)
    train = [sites[sid] for sid in train_ids]
    return fl.run_scenario(strategy, flcfg, train, sites[test_id])


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    digest = _write_config(cfg, cfg.data_dir)
    for profile in build_profiles(cfg):
        ds = _generate_one(cfg, profile)
        save_dataset(ds, _site_path(cfg, profile.site_id))
        print(f"wrote {_site_path(cfg, profile.site_id)} "
              f"({len(ds.train)} train / {len(ds.test)} test)")
    print(f"config sha256 = {digest}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    if len(cfg.strategies) != 1:
        raise CommandError("train needs exactly one strategy in experiment.strategies")
    strategy = cfg.strategies[0]
    if not cfg.train_sites:
        raise CommandError("train needs experiment.train_sites")
    if not cfg.test_site:
        raise CommandError("train needs experiment.test_site")
    sites = _load_sites(cfg)
    digest = _write_config(cfg, cfg.out_dir)

    def worker(seed):
        return _run_one(cfg, sites, strategy, cfg.train_sites, cfg.test_site, seed)

    results = _fanout(cfg.threads, list(cfg.seeds), worker)
    for seed, (report, arts) in zip(cfg.seeds, results):
        run_dir = os.path.join(cfg.out_dir, f"seed{seed}")
        os.makedirs(run_dir, exist_ok=True)
        params = arts["params"]
        if isinstance(params, list):
            for i, p in enumerate(params):
                with open(os.path.join(run_dir, f"params_{i}.bin"), "wb") as fh:
                    fh.write(p.to_bytes())
        else:
            with open(os.path.join(run_dir, "params.bin"), "wb") as fh:
                fh.write(params.to_bytes())
        payload = {"config_sha256": digest, "seed": seed,
                   "report": json.loads(report.to_json())}
        with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
        log = arts["log"]
        runs = log["runs"] if "runs" in log else [log]
        with open(os.path.join(run_dir, "rounds.jsonl"), "w", encoding="utf-8") as fh:
            for i, run_log in enumerate(runs):
                for entry in run_log["rounds"]:
                    line = dict(entry)
                    if len(runs) > 1:
                        line["model"] = i
                    fh.write(json.dumps(line, sort_keys=True) + "\n")
        print(f"seed {seed}: mean ssim {report.mean_ssim:.4f}, "
              f"mean psnr {report.mean_psnr:.2f}")
    return 0


def _compare_jobs(cfg: ExperimentConfig):
    """(scenario, strategy, train_ids, test_id) rows, fixed deterministic order."""
    jobs = []
    for scenario in cfg.scenarios:
        for test_id in cfg.sites:
            others = tuple(s for s in cfg.sites if s != test_id)
            if scenario == 1:
                if not others:
                    continue
                for strategy in cfg.strategies:
                    if strategy == "Cross":
                        jobs.extend((1, "Cross", (src,), test_id) for src in others)
                    elif strategy in ("Fused", "Mix", "FLMR", "FLMRCM"):
                        jobs.append((1, strategy, others, test_id))
            else:
                for strategy in cfg.strategies:
                    if strategy == "Single":
                        jobs.append((2, "Single", (test_id,), test_id))
                    elif strategy in ("Mix", "FLMR", "FLMRCM"):
                        jobs.append((2, strategy, cfg.sites, test_id))
    return jobs


COMPARE_COLUMNS = ("scenario", "strategy", "train_sites", "test_site",
                   "ssim", "psnr", "strategy_ssim", "strategy_psnr")


def cmd_compare(cfg: ExperimentConfig) -> int:
    sites = _load_sites(cfg)
    digest = _write_config(cfg, cfg.out_dir)
    jobs = _compare_jobs(cfg)
    if not jobs:
        raise CommandError("no runs selected; check strategies/scenarios/sites")
    tasks = [(job, seed) for job in jobs for seed in cfg.seeds]

    def worker(task):
        (_, strategy, train_ids, test_id), seed = task
        report, _ = _run_one(cfg, sites, strategy, train_ids, test_id, seed)
        return report.mean_ssim, report.mean_psnr

    results = dict(zip(tasks, _fanout(cfg.threads, tasks, worker)))
    means = {}
    for job in jobs:
        vals = [results[(job, seed)] for seed in cfg.seeds]
        means[job] = (
            float(sum(v[0] for v in vals) / len(vals)),
            float(sum(v[1] for v in vals) / len(vals)),
        )
    rows = []
    for job in jobs:
        scenario, strategy, train_ids, test_id = job
        group = [means[j] for j in jobs if j[0] == scenario and j[1] == strategy]
        rows.append((
            scenario, strategy, "+".join(train_ids), test_id,
            means[job][0], means[job][1],
            float(sum(g[0] for g in group) / len(group)),
            float(sum(g[1] for g in group) / len(group)),
        ))
    path = os.path.join(cfg.out_dir, "compare.csv")
    _write_csv(path, digest, cfg.seeds, COMPARE_COLUMNS, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


ABLATE_COLUMNS = ("source", "target", "ssim_without_cm", "psnr_without_cm",
                  "ssim_with_cm", "psnr_with_cm")


def cmd_ablate_cm(cfg: ExperimentConfig) -> int:
    if len(cfg.sites) < 2:
        raise CommandError("ablate-cm needs at least two sites")
    sites = _load_sites(cfg)
    digest = _write_config(cfg, cfg.out_dir)
    pairs = [(s, t) for s in cfg.sites for t in cfg.sites if s != t]
    tasks = [(s, t, strategy, seed) for (s, t) in pairs
             for strategy in ("Cross", "FLMRCM") for seed in cfg.seeds]

    def worker(task):
        s, t, strategy, seed = task
        report, _ = _run_one(cfg, sites, strategy, (s,), t, seed)
        return report.mean_ssim, report.mean_psnr

    results = dict(zip(tasks, _fanout(cfg.threads, tasks, worker)))
    rows = []
    for s, t in pairs:
        def seed_mean(strategy):
            vals = [results[(s, t, strategy, seed)] for seed in cfg.seeds]
            return (float(sum(v[0] for v in vals) / len(vals)),
                    float(sum(v[1] for v in vals) / len(vals)))

        without = seed_mean("Cross")
        with_cm = seed_mean("FLMRCM")
        rows.append((s, t, without[0], without[1], with_cm[0], with_cm[1]))
    path = os.path.join(cfg.out_dir, "ablate_cm.csv")
    _write_csv(path, digest, cfg.seeds, ABLATE_COLUMNS, rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_export_latents(cfg: ExperimentConfig) -> int:
    if not cfg.params_path:
        raise CommandError("export-latents needs experiment.params_path")
    try:
        with open(cfg.params_path, "rb") as fh:
            params = ParamSet.from_bytes(fh.read())
    except FileNotFoundError:
        raise CommandError(f"model file {cfg.params_path!r} not found") from None
    sites = _load_sites(cfg)
    _write_config(cfg, cfg.out_dir)
    for sid in cfg.sites:
        path = os.path.join(cfg.out_dir, f"latents_{sid}.csv")
        export_latents(params, sites[sid].test, path)
        print(f"wrote {path}")
    return 0


# -- argument handling -----------------------------------------------------------


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "compare": cmd_compare,
    "ablate-cm": cmd_ablate_cm,
    "export-latents": cmd_export_latents,
}


def _parse_seed_list(text: str):
    try:
        return tuple(int(part.strip()) for part in text.split(",") if part.strip())
    except ValueError:
        raise CommandError(f"invalid --seeds value {text!r}") from None


def _resolve_threads(args_threads, cfg: ExperimentConfig) -> int:
    if args_threads is not None:
        return args_threads
    env = os.environ.get("FEDRECON_THREADS", "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise CommandError(f"invalid FEDRECON_THREADS value {env!r}") from None
    return cfg.threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrecon",
        description="federated MR-reconstruction experiments on synthetic sites",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="path to key = value config")
        cmd.add_argument("--out", help="override output directory")
        cmd.add_argument("--seeds", help="comma list, overrides experiment.seeds")
        cmd.add_argument("--threads", type=int, help="worker threads "
                         "(FEDRECON_THREADS as fallback)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file {args.config!r} not found", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        changes = {"threads": _resolve_threads(args.threads, cfg)}
        if args.out:
            # gen-data's output directory is the dataset directory
            changes["data_dir" if args.command == "gen-data" else "out_dir"] = args.out
        if args.seeds:
            changes["seeds"] = _parse_seed_list(args.seeds)
        cfg = dataclasses.replace(cfg, **changes)
        return _COMMANDS[args.command](cfg)
    except (CommandError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
