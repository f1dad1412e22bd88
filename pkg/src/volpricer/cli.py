"""Staged pipeline driver.

Subcommands::

    synth            generate synthetic arbitrage-checked surfaces
    build-surfaces   build surfaces from option-chain CSVs (or --synthetic n)
    svd              spectrum.csv + mode_<i>.csv (+ figures)
    gen-prices       oracle-priced train/test records per instrument
    train            vae | mlp | finetune (mlp/finetune take --kind)
    evaluate         pricer benchmark CSVs/figures, or --kind vae for
                     latent dumps and reconstruction panels
    predict          one price from a surface file + k (or strike) + T

Every command is deterministic given the same config and seed; report
commands also render matplotlib figures next to their CSV output unless
--no-figures is passed. Exit codes are category-coded (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import figures
from .config import RunConfig, load_config
from .errors import (
    ConvergenceError,
    CoverageError,
    DomainError,
    GenerationError,
    NoSolutionError,
    NumericError,
    ParseError,
    ShapeError,
    StateError,
    VolPricerError,
)
from .market_data import (
    SurfaceDataset,
    build_surface,
    check_arbitrage,
    read_chain_csv,
    read_surface_csv,
    split_dataset,
    surface_filename,
    write_grid_csv,
    write_surface_csv,
)
from .oracle_pricers import McConfig, generate_price_dataset
from .price_mlp import (
    KINDS,
    PricerModel,
    records_loss,
    evaluate_records,
    fine_tune,
    predict_price,
    read_price_records,
    train_mlp,
    write_evaluation_csv,
    write_price_records,
)
from .surface_analysis import assemble_matrix, compute_svd, explained_spectrum
from .synthetic import generate_surfaces
from .tensor_nn import CosineSchedule, cosine_lr
from .vae import TrainLog, VaeModel, encode, reconstruct, train_vae, vae_loss

EXIT_CODES = {
    DomainError: 3,
    NoSolutionError: 3,
    ShapeError: 3,
    StateError: 4,
    ParseError: 5,
    NumericError: 6,
    ConvergenceError: 6,
    CoverageError: 7,
    GenerationError: 7,
}

_RECON_STREAM = 31


# ---------------------------------------------------------------------------
# Pipeline state helpers
# ---------------------------------------------------------------------------

def _surface_dir(config: RunConfig) -> Path:
    return Path(config.data_dir) / "surfaces"


def _load_dataset(config: RunConfig) -> SurfaceDataset:
    sdir = _surface_dir(config)
    files = sorted(sdir.glob("*.surface.csv"))
    if len(files) < 2:
        raise StateError(f"no surfaces in {sdir}; run `synth` or "
                         f"`build-surfaces` first")
    surfaces = [read_surface_csv(f) for f in files]
    return split_dataset(surfaces, config.train_fraction, config.seed)


def _model_path(config: RunConfig, name: str) -> Path:
    return Path(config.model_dir) / name


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise StateError(f"missing artifact {path}; run `{hint}` first")
    return path


def _load_vae(config: RunConfig) -> VaeModel:
    return VaeModel.load(_require(_model_path(config, "vae.bin"), "train vae"))


def _load_eval_models(config: RunConfig, kind: str) -> tuple[VaeModel, PricerModel, str]:
    """Fine-tuned pair when available, else stage-2 MLP with the base VAE."""
    vae_ft = _model_path(config, f"vae_ft_{kind}.bin")
    mlp_ft = _model_path(config, f"mlp_ft_{kind}.bin")
    if vae_ft.exists() and mlp_ft.exists():
        return VaeModel.load(vae_ft), PricerModel.load(mlp_ft), "fine-tuned"
    mlp = _model_path(config, f"mlp_{kind}.bin")
    if not mlp.exists():
        raise StateError(f"no trained pricer for {kind}; run `train mlp "
                         f"--kind {kind}` first")
    return _load_vae(config), PricerModel.load(mlp), "stage-2"


def _write_arb_report(path: Path, rows: list[tuple[str, str, int, int]]) -> None:
    lines = ["quote_date,status,butterfly_violations,calendar_violations"]
    for date_str, status, nb, nc in rows:
        lines.append(f"{date_str},{status},{nb},{nc}")
    path.write_text("\n".join(lines) + "\n")


def _ensure_dirs(config: RunConfig) -> None:
    for d in (config.data_dir, config.model_dir, config.out_dir):
        Path(d).mkdir(parents=True, exist_ok=True)
    _surface_dir(config).mkdir(parents=True, exist_ok=True)
    (Path(config.out_dir) / "figures").mkdir(parents=True, exist_ok=True)


def _fig_path(config: RunConfig, name: str) -> Path:
    return Path(config.out_dir) / "figures" / name


def _vae_for_training(config: RunConfig, dataset: SurfaceDataset) -> VaeModel:
    norm_mean, norm_std = 0.0, 1.0
    if config.standardize:
        train_vols = np.stack([s.vols for s in dataset.train_surfaces()])
        norm_mean = float(train_vols.mean())
        norm_std = float(train_vols.std()) or 1.0
    return VaeModel(latent_dim=config.latent_dim, seed=config.seed,
                    norm_mean=norm_mean, norm_std=norm_std)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(config: RunConfig, args) -> int:
    _ensure_dirs(config)
    n = args.n if args.n is not None else config.n_surfaces
    surfaces = generate_surfaces(n, config.seed)
    report = []
    for s in surfaces:
        write_surface_csv(s, _surface_dir(config) / surface_filename(s.quote_date))
        rep = check_arbitrage(s)
        report.append((s.quote_date.isoformat(), "ok",
                       len(rep.butterfly), len(rep.calendar)))
    _write_arb_report(Path(config.data_dir) / "arbitrage_report.csv", report)
    print(f"wrote {len(surfaces)} synthetic surfaces to {_surface_dir(config)}")
    return 0


def cmd_build_surfaces(config: RunConfig, args) -> int:
    if args.synthetic is not None:
        args.n = args.synthetic
        return cmd_synth(config, args)
    _ensure_dirs(config)
    chain_files = [Path(p) for p in args.chains]
    if not chain_files:
        chain_files = sorted(Path(config.data_dir).glob("*.chain.csv"))
    if not chain_files:
        raise StateError(f"no chain CSVs given and none found in "
                         f"{config.data_dir} (*.chain.csv); or use --synthetic N")
    by_date: dict = {}
    for path in chain_files:
        for quote in read_chain_csv(path):
            by_date.setdefault(quote.quote_date, []).append(quote)

    report, n_written = [], 0
    for quote_date in sorted(by_date):
        try:
            surface = build_surface(by_date[quote_date], quote_date)
        except VolPricerError as exc:
            # A date whose chain cannot even produce a surface (crossed
            # quote, coverage hole) is excluded like an arbitrage failure.
            report.append((quote_date.isoformat(),
                           f"excluded:{type(exc).__name__}", 0, 0))
            continue
        rep = check_arbitrage(surface)
        if rep.arbitrage_free:
            write_surface_csv(surface,
                              _surface_dir(config) / surface_filename(quote_date))
            status = "ok"
            n_written += 1
        else:
            status = "excluded:arbitrage"
        report.append((quote_date.isoformat(), status,
                       len(rep.butterfly), len(rep.calendar)))
    _write_arb_report(Path(config.data_dir) / "arbitrage_report.csv", report)
    excluded = len(report) - n_written
    print(f"built {n_written} surfaces ({excluded} excluded by the "
          f"arbitrage filter); report in {config.data_dir}/arbitrage_report.csv")
    return 0


def cmd_svd(config: RunConfig, args) -> int:
    _ensure_dirs(config)
    dataset = _load_dataset(config)
    matrix = assemble_matrix(dataset)
    rank = min(matrix.n_surfaces, matrix.data.shape[1])
    result = compute_svd(matrix, rank)
    spectrum = explained_spectrum(result)
    out = Path(config.out_dir)

    lines = ["rank,singular_value,cumulative_energy"]
    for r, s, e in spectrum:
        lines.append(f"{r},{s!r},{e!r}")
    (out / "spectrum.csv").write_text("\n".join(lines) + "\n")

    ref = dataset.surfaces[0]
    n_modes = min(args.modes, rank)
    for i in range(n_modes):
        grid = result.right_vectors[:, i].reshape(len(ref.k_axis), len(ref.t_axis))
        write_grid_csv(grid, ref.k_axis, ref.t_axis, out / f"mode_{i + 1}.csv")

    if not args.no_figures:
        figures.save_spectrum(_fig_path(config, "spectrum.png"), spectrum)
        figures.save_modes(_fig_path(config, "modes.png"), result.right_vectors,
                           ref.k_axis, ref.t_axis, n_modes)
    energy10 = spectrum[min(9, len(spectrum) - 1)][2]
    print(f"spectrum over {rank} components; rank-10 energy {energy10:.6f}; "
          f"{n_modes} mode files in {out}")
    return 0


def cmd_gen_prices(config: RunConfig, args) -> int:
    _ensure_dirs(config)
    dataset = _load_dataset(config)
    kinds = args.kind or list(KINDS)
    mc = McConfig(n_paths=config.n_paths, n_observations=config.n_observations,
                  antithetic=config.antithetic)
    for kind in kinds:
        n_train, n_test = config.records[kind]
        train_recs, test_recs = generate_price_dataset(
            dataset, kind, n_train, n_test, seed=config.seed, rate=config.rate,
            mc=mc, n_steps=config.n_steps)
        write_price_records(train_recs,
                            Path(config.data_dir) / f"prices_{kind}_train.csv")
        write_price_records(test_recs,
                            Path(config.data_dir) / f"prices_{kind}_test.csv")
        print(f"{kind}: {n_train} train / {n_test} test records")
    return 0


def _load_records(config: RunConfig, kind: str) -> tuple[list, list]:
    train = _require(Path(config.data_dir) / f"prices_{kind}_train.csv",
                     "gen-prices")
    test = _require(Path(config.data_dir) / f"prices_{kind}_test.csv",
                    "gen-prices")
    return read_price_records(train), read_price_records(test)


def _write_log(log_rows: list, baseline: tuple, path: Path) -> None:
    log = TrainLog(rows=[baseline] + list(log_rows))
    log.write_csv(path)


def cmd_train(config: RunConfig, args) -> int:
    _ensure_dirs(config)
    dataset = _load_dataset(config)
    out = Path(config.out_dir)

    if args.stage == "vae":
        model = _vae_for_training(config, dataset)
        schedule = CosineSchedule(config.vae_lr_max, config.vae_lr_min,
                                  max(config.vae_epochs, 1))
        base_train = vae_loss(model, dataset.train_surfaces(),
                              dataset.train_indices, config.seed, 0,
                              config.n_recon_samples, config.kl_beta)
        base_test = (vae_loss(model, dataset.test_surfaces(),
                              dataset.test_indices, config.seed, 0,
                              config.n_recon_samples, config.kl_beta)
                     if dataset.test_indices else float("nan"))
        log = train_vae(model, dataset, config.vae_epochs, schedule, config.seed,
                        config.vae_batch_size, config.n_recon_samples,
                        config.kl_beta)
        model.save(_model_path(config, "vae.bin"))
        baseline = (0, base_train, base_test, cosine_lr(schedule, 0))
        _write_log(log.rows, baseline, out / "vae_loss.csv")
        if not args.no_figures:
            figures.save_loss_curves(_fig_path(config, "vae_loss.png"),
                                     [baseline] + log.rows, "VAE training loss")
        final = log.rows[-1][1] if log.rows else base_train
        print(f"vae: {config.vae_epochs} epochs, train loss "
              f"{base_train:.6f} -> {final:.6f}; model in {config.model_dir}")
        return 0

    kind = args.kind
    if kind is None:
        raise DomainError(f"train {args.stage} requires --kind (one of {KINDS})")
    train_recs, test_recs = _load_records(config, kind)

    if args.stage == "mlp":
        vae_model = _load_vae(config)
        mlp = PricerModel(latent_dim=config.latent_dim, hidden=config.mlp_hidden,
                          seed=config.seed)
        schedule = CosineSchedule(config.mlp_lr_max, config.mlp_lr_min,
                                  max(config.mlp_epochs, 1))
        base = (0, records_loss(vae_model, mlp, dataset, train_recs),
                records_loss(vae_model, mlp, dataset, test_recs),
                cosine_lr(schedule, 0))
        log = train_mlp(mlp, vae_model, dataset, train_recs, test_recs,
                        config.mlp_epochs, schedule, config.seed,
                        config.mlp_batch_size)
        mlp.save(_model_path(config, f"mlp_{kind}.bin"))
        _write_log(log.rows, base, out / f"mlp_{kind}_loss.csv")
        if not args.no_figures:
            figures.save_loss_curves(_fig_path(config, f"mlp_{kind}_loss.png"),
                                     [base] + log.rows, f"MLP loss ({kind})")
        final = log.rows[-1][1] if log.rows else base[1]
        print(f"mlp {kind}: train loss {base[1]:.6g} -> {final:.6g}")
        return 0

    if args.stage == "finetune":
        vae_model = _load_vae(config)
        mlp_path = _require(_model_path(config, f"mlp_{kind}.bin"),
                            f"train mlp --kind {kind}")
        mlp = PricerModel.load(mlp_path)
        schedule = CosineSchedule(config.ft_lr_max, config.ft_lr_min,
                                  max(config.fine_tune_epochs, 1))
        base = (0, records_loss(vae_model, mlp, dataset, train_recs),
                records_loss(vae_model, mlp, dataset, test_recs),
                cosine_lr(schedule, 0))
        log = fine_tune(vae_model, mlp, dataset, train_recs, test_recs,
                        config.fine_tune_epochs, schedule, config.seed,
                        config.mlp_batch_size)
        vae_model.save(_model_path(config, f"vae_ft_{kind}.bin"))
        mlp.save(_model_path(config, f"mlp_ft_{kind}.bin"))
        _write_log(log.rows, base, out / f"finetune_{kind}_loss.csv")
        if not args.no_figures:
            figures.save_loss_curves(
                _fig_path(config, f"finetune_{kind}_loss.png"),
                [base] + log.rows, f"Fine-tune loss ({kind})")
        # Post-fine-tune reconstruction quality, logged as a diagnostic.
        recon_loss = vae_loss(vae_model, dataset.test_surfaces(),
                              dataset.test_indices, config.seed, 0,
                              config.n_recon_samples) if dataset.test_indices \
            else float("nan")
        final = log.rows[-1][1] if log.rows else base[1]
        print(f"finetune {kind}: train loss {base[1]:.6g} -> {final:.6g}; "
              f"post-fine-tune VAE test reconstruction loss {recon_loss:.6g}")
        return 0

    raise DomainError(f"unknown training stage {args.stage!r}")


def _evaluate_vae(config: RunConfig, args) -> int:
    dataset = _load_dataset(config)
    model = _load_vae(config)
    out = Path(config.out_dir)

    mus, logvars = [], []
    lines = ["surface_id," + ",".join(f"mu_{i}" for i in range(model.latent_dim))
             + "," + ",".join(f"logvar_{i}" for i in range(model.latent_dim))]
    for sid, surface in enumerate(dataset.surfaces):
        stats = encode(model, surface)
        mus.append(stats.mu)
        logvars.append(stats.log_var)
        lines.append(f"{sid}," + ",".join(repr(v) for v in stats.mu)
                     + "," + ",".join(repr(v) for v in stats.log_var))
    (out / "latents.csv").write_text("\n".join(lines) + "\n")

    dates = args.dates or [dataset.surfaces[i].quote_date.isoformat()
                           for i in dataset.test_indices[:3]]
    by_date = {s.quote_date.isoformat(): s for s in dataset.surfaces}
    for date_str in dates:
        if date_str not in by_date:
            raise DomainError(f"no surface for date {date_str}")
        surface = by_date[date_str]
        sid = next(i for i, s in enumerate(dataset.surfaces) if s is surface)
        rng = np.random.default_rng((config.seed, _RECON_STREAM, sid))
        recon = reconstruct(model, surface, config.n_recon_samples, rng)
        write_grid_csv(surface.vols, surface.k_axis, surface.t_axis,
                       out / f"{date_str}.orig.csv")
        write_grid_csv(recon, surface.k_axis, surface.t_axis,
                       out / f"{date_str}.recon.csv")
        write_grid_csv(recon - surface.vols, surface.k_axis, surface.t_axis,
                       out / f"{date_str}.diff.csv")
        if not args.no_figures:
            figures.save_reconstruction_panel(
                _fig_path(config, f"recon_{date_str}.png"), surface.vols,
                recon, surface.k_axis, surface.t_axis, date_str)

    if not args.no_figures:
        figures.save_latent_panels(_fig_path(config, "latents.png"),
                                   np.vstack(mus), np.vstack(logvars))
    train_mu = np.vstack([mus[i] for i in dataset.train_indices])
    spread = np.abs(train_mu).max(axis=0)
    print(f"latents for {len(dataset.surfaces)} surfaces in {out/'latents.csv'}; "
          f"reconstruction dumps for {len(dates)} dates; "
          f"max |mu| per dim: {np.array2string(spread, precision=2)}")
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    _ensure_dirs(config)
    if args.kind == "vae":
        return _evaluate_vae(config, args)
    kind = args.kind
    dataset = _load_dataset(config)
    _, test_recs = _load_records(config, kind)
    vae_model, mlp, stage = _load_eval_models(config, kind)
    rows, summary = evaluate_records(vae_model, mlp, dataset, test_recs)
    out = Path(config.out_dir)
    write_evaluation_csv(rows, out / f"eval_{kind}.csv")

    header = ("kind,n_records,mae,rmse,r_squared,max_abs_err,"
              "max_err_k,max_err_t,mean_signed_err")
    values = (f"{summary.kind},{summary.n_records},{summary.mae!r},"
              f"{summary.rmse!r},{summary.r_squared!r},{summary.max_abs_err!r},"
              f"{summary.max_err_k!r},{summary.max_err_t!r},"
              f"{summary.mean_signed_err!r}")
    (out / f"summary_{kind}.csv").write_text(header + "\n" + values + "\n")

    if not args.no_figures:
        oracle = np.array([r[3] for r in rows])
        pred = np.array([r[4] for r in rows])
        ks = np.array([r[1] for r in rows])
        ts = np.array([r[2] for r in rows])
        errs = pred - oracle
        figures.save_parity(_fig_path(config, f"parity_{kind}.png"),
                            oracle, pred, kind)
        figures.save_error_map(_fig_path(config, f"errmap_{kind}.png"),
                               ks, ts, errs, kind)
    print(f"{kind} ({stage} models, {summary.n_records} test records): "
          f"MAE {summary.mae:.6f}, RMSE {summary.rmse:.6f}, "
          f"R^2 {summary.r_squared:.4f}, max|err| {summary.max_abs_err:.6f} "
          f"at (k={summary.max_err_k:.3f}, T={summary.max_err_t:.3f}), "
          f"mean signed err {summary.mean_signed_err:.2e}")
    return 0


def cmd_predict(config: RunConfig, args) -> int:
    surface = read_surface_csv(args.surface)
    vae_model, mlp, stage = _load_eval_models(config, args.kind)
    spot = args.spot
    if args.k is not None:
        strike = spot * float(np.exp(args.k))
    else:
        strike = args.strike
    price = predict_price(vae_model, mlp, surface, strike, args.expiry, spot)
    print(f"{args.kind} strike={strike:.6g} T={args.expiry:.6g} spot={spot:.6g} "
          f"({stage} models): price = {price!r}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volpricer",
        description="Vol-surface construction, VAE compression, and neural "
                    "pricing of American puts and arithmetic Asian options.")
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--profile", choices=["desk", "full"], default="desk")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--data-dir", help="override data directory")
    parser.add_argument("--model-dir", help="override model directory")
    parser.add_argument("--out-dir", help="override output directory")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip matplotlib figure rendering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic surfaces")
    p.add_argument("--n", type=int, help="number of surfaces "
                   "(default: config n_surfaces)")

    p = sub.add_parser("build-surfaces", help="build surfaces from chain CSVs")
    p.add_argument("chains", nargs="*", help="chain CSV files "
                   "(default: <data_dir>/*.chain.csv)")
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="generate N synthetic surfaces instead")

    p = sub.add_parser("svd", help="singular-value analysis of the dataset")
    p.add_argument("--modes", type=int, default=8,
                   help="number of mode grid files (default 8)")

    p = sub.add_parser("gen-prices", help="generate oracle price records")
    p.add_argument("--kind", action="append", choices=list(KINDS),
                   help="instrument kind (repeatable; default all)")

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("stage", choices=["vae", "mlp", "finetune"])
    p.add_argument("--kind", choices=list(KINDS),
                   help="instrument kind (mlp and finetune stages)")

    p = sub.add_parser("evaluate", help="benchmark a pricer or dump VAE stats")
    p.add_argument("--kind", required=True, choices=list(KINDS) + ["vae"])
    p.add_argument("--dates", nargs="*",
                   help="reconstruction dump dates (evaluate --kind vae)")

    p = sub.add_parser("predict", help="price one option from a surface file")
    p.add_argument("--surface", required=True, help="<date>.surface.csv file")
    p.add_argument("--kind", required=True, choices=list(KINDS))
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--k", type=float, help="log-moneyness")
    group.add_argument("--strike", type=float, help="strike in currency")
    p.add_argument("--expiry", type=float, required=True, help="years")
    p.add_argument("--spot", type=float, default=1.0)
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config:
        config = load_config(args.config, profile=args.profile)
    elif args.profile == "full":
        config = RunConfig.full()
    else:
        config = RunConfig.desk()
    if args.seed is not None:
        config.seed = args.seed
    if args.data_dir:
        config.data_dir = args.data_dir
    if args.model_dir:
        config.model_dir = args.model_dir
    if args.out_dir:
        config.out_dir = args.out_dir
    config.validate()
    return config.resolve_paths(Path.cwd())


COMMANDS = {
    "synth": cmd_synth,
    "build-surfaces": cmd_build_surfaces,
    "svd": cmd_svd,
    "gen-prices": cmd_gen_prices,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        return COMMANDS[args.command](config, args)
    except VolPricerError as exc:
        code = EXIT_CODES.get(type(exc), 1)
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
