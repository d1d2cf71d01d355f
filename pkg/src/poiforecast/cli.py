"""Command-line driver: ingest, train, eval, sweep, plot, synth.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .classifier import JOINT, TrainState, load_checkpoint, save_checkpoint, train
from .config import OUTPUT_DIR_ENV, RunConfig, load_config
from .data import PoiSet, find_threshold_for_unseen_ratio, load_split, parse_checkins, save_split, \
    temporal_split, write_json
from .encoder import Vocabulary
from .errors import ConfigError, IngestError, PoiForecastError
from .evaluation import Scenario, SweepResult, emit_report, evaluate, sweep_unseen_ratio
from .methods import BaselineForecaster, JointForecaster, fit_forecaster
from .prior import ProximityPrior, estimate_prior

log = logging.getLogger("poiforecast")

SPLIT_FILE = "split.json"
PRIOR_FILE = "prior.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup(cfg: RunConfig) -> None:
    import torch
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def _load_data(cfg: RunConfig):
    if not cfg.data_path:
        raise ConfigError("no data_path configured")
    if not Path(cfg.data_path).is_file():
        raise IngestError(f"check-in file not found: {cfg.data_path}")
    pois, histories, stats = parse_checkins(cfg.data_path, zone=cfg.utm_zone)
    return pois, histories, stats


def _candidates(cfg: RunConfig, pois: PoiSet) -> PoiSet:
    if not cfg.candidates_path:
        return pois
    try:
        ids = [line.strip() for line in Path(cfg.candidates_path).read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read candidates file: {exc}") from exc
    missing = [i for i in ids if i not in pois]
    if missing:
        raise IngestError(f"{len(missing)} candidate POIs are not in the data, e.g. {missing[:3]}")
    return pois.subset(ids)


def _load_split(cfg: RunConfig, histories):
    path = Path(cfg.output_dir) / SPLIT_FILE
    if not path.is_file():
        raise ConfigError(f"no split manifest at {path}; run 'ingest' first")
    return load_split(path, histories)


def cmd_ingest(cfg: RunConfig, args) -> int:
    pois, histories, stats = _load_data(cfg)
    if cfg.split.threshold is not None:
        threshold = cfg.split.threshold
    else:
        threshold, _ = find_threshold_for_unseen_ratio(histories, cfg.split.target_unseen_ratio,
                                                       cfg.split.tolerance)
    split = temporal_split(histories, threshold, cfg.seed)
    summary = {
        "lines": stats.lines,
        "visits": stats.visits,
        "malformed_lines": stats.malformed,
        "users": len(histories),
        "pois": len(pois),
        "categories": len(pois.category_vocabulary),
        "utm_zone": str(pois.zone),
        "threshold": split.threshold,
        "realized_unseen_ratio": split.unseen_ratio,
        "train_users": len(split.train),
        "validation_targets": len(split.validation),
        "test_targets": len(split.test),
        "unseen_pois": len(split.unseen_poi_ids),
    }
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_split(split, out / SPLIT_FILE)
    write_json(Vocabulary(split.train_poi_ids).to_json(), out / "poi_vocabulary.json")
    write_json(Vocabulary(pois.category_vocabulary).to_json(), out / "category_vocabulary.json")
    write_json(summary, out / "ingest_stats.json")
    cfg.save(out / "config.json")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    pois, histories, _ = _load_data(cfg)
    split = _load_split(cfg, histories)
    out = Path(cfg.output_dir)
    prior = estimate_prior(split.train, pois, cfg.prior.bucketing(), cfg.prior.smoothing_alpha)
    prior.save(out / PRIOR_FILE)
    for method in cfg.method_names:
        ckpt = out / f"{method}.pt"
        resume = None
        if args.resume and ckpt.is_file():
            resume = load_checkpoint(ckpt, split, pois)
        state = train(split, pois, method, cfg.encoder, cfg.train, cfg.seed, resume=resume,
                      metrics_path=out / f"{method}_metrics.csv")
        if resume is not None:
            print(f"{method}: resumed, validation {state.resumed_metric:.6f} "
                  f"(stored best {resume.best_metric:.6f})")
        save_checkpoint(state, ckpt)
        print(f"{method}: best validation acc@1 {state.best_metric:.4f} at epoch {state.best_epoch} -> {ckpt}")
    return 0


def _run_info(cfg: RunConfig, **extra) -> dict:
    return {"config": cfg.identity(), "seed": cfg.seed, **extra}


def cmd_eval(cfg: RunConfig, args) -> int:
    pois, histories, _ = _load_data(cfg)
    split = _load_split(cfg, histories)
    out = Path(cfg.output_dir)
    candidates = _candidates(cfg, pois)
    states: dict[str, TrainState] = {}
    for method in cfg.method_names:
        ckpt = out / f"{method}.pt"
        if not ckpt.is_file():
            raise ConfigError(f"missing checkpoint {ckpt}; run 'train' first")
        states[method] = load_checkpoint(ckpt, split, pois)
    prior = ProximityPrior.load(out / PRIOR_FILE) if (out / PRIOR_FILE).is_file() else None
    reports = []
    for method, state in states.items():
        if method == JOINT:
            if prior is None:
                raise ConfigError(f"missing {out / PRIOR_FILE}; run 'train' first")
            forecaster = JointForecaster(state, prior)
        else:
            forecaster = BaselineForecaster(state)
        dump = out / f"{method}_rankings.jsonl" if args.dump_rankings else None
        reports.append(evaluate(forecaster, split, cfg.k_values, candidates=candidates, dump_path=dump))
    seeds = {m: s.seed for m, s in states.items()}
    files = emit_report(out, reports=reports, prior=prior,
                        run_info=_run_info(cfg, split_threshold=split.threshold, training_seeds=seeds))
    print((out / "table1.txt").read_text(), end="")
    log.info("wrote %s", ", ".join(str(f) for f in files))
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    pois, histories, _ = _load_data(cfg)
    candidates = _candidates(cfg, pois)
    out = Path(cfg.output_dir) / "sweep"

    def fit(name, split, point_pois, seed):
        return fit_forecaster(name, split, point_pois, encoder_config=cfg.encoder, train_config=cfg.train,
                              bucketing=cfg.prior.bucketing(), smoothing_alpha=cfg.prior.smoothing_alpha,
                              seed=seed)

    scenario = None
    if candidates is not pois:
        def scenario(ratio):
            threshold, _ = find_threshold_for_unseen_ratio(histories, ratio)
            return Scenario(pois, histories, threshold, candidates)

    sweep = sweep_unseen_ratio(fit, cfg.method_names, pois, histories, cfg.sweep.ratios, cfg.k_values,
                               seed=cfg.seed, scenario=scenario)
    if not sweep.points:
        raise ConfigError("no sweep ratio was realisable on this data")
    emit_report(out, sweep=sweep, run_info=_run_info(cfg))
    for m, slopes in sorted(sweep.slopes.items()):
        print(m, " ".join(f"slope@{k}={v:+.4f}" for k, v in slopes.items()))
    return 0


def cmd_plot(cfg: RunConfig, args) -> int:
    from . import plotting
    out = Path(args.results_dir or cfg.output_dir)
    path = out / "results.json"
    if not path.is_file():
        raise ConfigError(f"no results.json in {out}")
    results = json.loads(path.read_text())
    made = []
    if results.get("prior"):
        made.append(plotting.plot_prior_histogram(ProximityPrior.from_json(results["prior"]),
                                                  out / "prior_histogram.png", max_km=args.max_km))
    if results.get("sweep"):
        made.append(plotting.plot_sweep(SweepResult.from_json(results["sweep"]), out / "sweep.png"))
    if not made:
        raise ConfigError("results.json holds neither a prior nor a sweep to plot")
    for p in made:
        print(p)
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    from .synthetic import generate_world
    out = Path(args.out_dir).resolve()
    world = generate_world(swap_fraction=args.swap_fraction, n_users=args.users,
                           visits_per_user=args.visits, seed=args.synth_seed)
    out.mkdir(parents=True, exist_ok=True)
    world.write_tsv(out / "checkins.tsv")
    (out / "active_pois.txt").write_text("".join(p + "\n" for p in world.active_after_swap.ids))
    synth_cfg = {
        "data_path": str(out / "checkins.tsv"),
        "candidates_path": str(out / "active_pois.txt"),
        "output_dir": str(out / "run"),
        "split": {"threshold": world.swap_time, "target_unseen_ratio": None},
    }
    write_json(synth_cfg, out / "config.json")
    print(f"wrote {out / 'checkins.tsv'} ({sum(len(h) for h in world.histories)} visits); "
          f"swap at {world.swap_time}; Bayes rate {world.bayes_rate():.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poiforecast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="run config JSON")
    common.add_argument("--data", dest="data_path", help="check-in TSV file")
    common.add_argument("--out", dest="output_dir", help=f"output directory (env {OUTPUT_DIR_ENV})")
    common.add_argument("--seed", type=int)
    common.add_argument("--methods", choices=["joint", "baseline", "both"])
    common.add_argument("--threshold", type=int, help="split threshold, UTC seconds")
    common.add_argument("--unseen-ratio", type=float, help="target unseen ratio for the split")
    common.add_argument("--candidates", dest="candidates_path", help="file of POI ids to rank against")
    common.add_argument("--max-epochs", type=int)
    common.add_argument("--zone", help="UTM zone override, e.g. 18N")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. encoder.num_layers=1")
    det = common.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse data and write the split manifest")
    t = sub.add_parser("train", parents=[common], help="train the selected methods")
    t.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints; write the accuracy table")
    e.add_argument("--dump-rankings", action="store_true", help="write top-50 rankings per target")
    sub.add_parser("sweep", parents=[common], help="retrain and evaluate across unseen ratios")
    pl = sub.add_parser("plot", parents=[common], help="re-render figures from results.json")
    pl.add_argument("--results-dir")
    pl.add_argument("--max-km", type=float)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic check-in dataset")
    s.add_argument("out_dir")
    s.add_argument("--swap-fraction", type=float, default=0.5)
    s.add_argument("--users", type=int, default=48)
    s.add_argument("--visits", type=int, default=60)
    s.add_argument("--synth-seed", type=int, default=0)
    return p


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "plot": cmd_plot, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threshold = args.threshold
        overrides = {
            "data_path": args.data_path, "output_dir": args.output_dir, "seed": args.seed,
            "methods": args.methods, "candidates_path": args.candidates_path, "zone": args.zone,
            "deterministic": args.deterministic, "train.max_epochs": args.max_epochs,
            "split.threshold": threshold, "split.target_unseen_ratio": args.unseen_ratio,
        }
        assignments = list(args.set)
        if threshold is not None and args.unseen_ratio is None:
            assignments.append("split.target_unseen_ratio=null")
        elif args.unseen_ratio is not None and threshold is None:
            assignments.append("split.threshold=null")
        cfg = load_config(args.config, overrides, assignments)
        _setup(cfg)
        return COMMANDS[args.command](cfg, args)
    except PoiForecastError as exc:
        print(f"poiforecast {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"poiforecast {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
