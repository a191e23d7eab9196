"""``deepvol`` command line.

Every subcommand writes its primary output plus a ``<output>.meta.json``
provenance sidecar (git describe string, config hash, seed).  Exit codes:
0 ok, 2 input error, 3 numerical failure, 4 no convergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import bayes, calibrate as lm, heston, hyperopt, nn, rbergomi, reports, sampling
from .errors import ConvergenceError, DeepVolError, InputError, NumericalError
from .quotes import ingest_quotes, quote_arrays

log = logging.getLogger("deepvol")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_CONVERGENCE = 0, 2, 3, 4


# ------------------------------------------------------------------ helpers


def git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                           capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return r.stdout.strip() if r.returncode == 0 and r.stdout.strip() else "unknown"


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_provenance(target, args, extra=None) -> Path:
    cfg = _config(args)
    meta = {"command": args.command, "git": git_describe(), "config": cfg, "config_hash": config_hash(cfg),
            "seed": getattr(args, "seed", None)}
    if extra:
        meta["results"] = extra
    p = Path(str(target) + ".meta.json") if not Path(target).is_dir() else Path(target) / "provenance.json"
    p.write_text(json.dumps(meta, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return p


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return str(v)


def _read_json_arg(text: str):
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    try:
        return json.loads(p.read_text(encoding="utf-8") if p.is_file() else text)
    except (ValueError, OSError) as exc:
        raise InputError(f"cannot read JSON from {text!r}: {exc}") from None


def _params_vector(raw, names) -> np.ndarray:
    if isinstance(raw, dict):
        missing = [n for n in names if n not in raw]
        if missing:
            raise InputError(f"parameters missing {missing}")
        return np.array([float(raw[n]) for n in names])
    v = np.asarray(raw, dtype=float).ravel()
    if v.size != len(names):
        raise InputError(f"expected {len(names)} parameters {list(names)}, got {v.size}")
    return v


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None


def _linspace(text: str):
    """``lo:hi:n`` to an array, or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise InputError(f"grid must be lo:hi:n, got {text!r}")
        try:
            return np.linspace(float(parts[0]), float(parts[1]), int(parts[2]))
        except ValueError:
            raise InputError(f"bad grid {text!r}") from None
    return np.array(_floats(text))


def _net_model(net: nn.Network, override=None):
    model = override or net.meta.get("model")
    if model not in sampling.MODELS:
        raise InputError("cannot tell the model of this network; pass --model")
    names = sampling.model_info(model)[0]
    if net.spec.input_dim != len(names) + 2:
        raise InputError(f"network input size {net.spec.input_dim} does not fit model {model}")
    return model, names


def _mc_config(args, seed):
    return rbergomi.MCConfig(n_paths=args.paths, n_steps=args.steps, seed=seed)


def _reference_pricer(model, mu, args):
    if model == "heston":
        return lambda M, T: heston.heston_ivs(np.asarray(mu)[None, :], M, T)
    p = rbergomi.RBergomiParams(*mu)
    cfg = _mc_config(args, args.seed)
    return lambda M, T: rbergomi.rbergomi_surface_ivs(p, M, T, cfg)


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (str, int, bool)) else repr(float(v)) for v in row])


# -------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    kde = None
    if args.kde:
        qs = ingest_quotes(args.kde).quotes
        M, T = quote_arrays(qs)[:2]
        # liquidity proxy for sampling is the inverse bid-ask spread
        liq = np.array([1.0 / (q.ask_iv - q.bid_iv) for q in qs])
        kde = sampling.fit_wkde(np.column_stack([np.log(M), T]), liq)
    cfg = _mc_config(args, args.seed) if args.model == "rbergomi" else None
    ds = sampling.generate_dataset(args.model, args.n, kde=kde, pricing_cfg=cfg, seed=args.seed,
                                   rows_per_group=args.group)
    ds.save(args.out)
    write_provenance(args.out, args, {"rows": ds.n, "dropped": ds.config["dropped"]})
    print(f"wrote {ds.n} rows to {args.out} ({ds.config['dropped']} dropped)")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = sampling.Dataset.load(args.data)
    spec = nn.NetworkSpec(ds.inputs.shape[1], _ints(args.widths))
    net = nn.he_init(spec, np.random.default_rng(args.seed))
    net.meta = {"model": ds.config.get("model"), "columns": list(ds.columns)}
    cfg = nn.TrainConfig(learning_rate=args.lr, batch_size=args.batch, max_epochs=args.max_epochs,
                         patience=args.patience, seed=args.seed, lr_decay=args.lr_decay,
                         decay_patience=args.decay_patience)
    best, hist = nn.train(net, ds, cfg)
    x, y = ds.part("test")
    test_rmse = float(np.sqrt(np.mean((nn.forward(best, x) - y) ** 2))) if y.size else float("nan")
    best.meta = {**best.meta, "test_rmse": test_rmse}
    nn.save(best, args.out)
    if args.history:
        _write_rows(args.history, ["epoch", "train_mse", "valid_mse", "best_valid"], hist.rows())
    write_provenance(args.out, args, {"best_epoch": hist.best_epoch, "valid_mse": min(hist.valid_mse),
                                      "test_rmse": test_rmse, "epochs": hist.epochs[-1]})
    print(f"best epoch {hist.best_epoch}, valid rmse {np.sqrt(min(hist.valid_mse)):.3e}, test rmse {test_rmse:.3e}")
    return EXIT_OK


def cmd_eval_surface(args) -> int:
    net = nn.load(args.net)
    model, names = _net_model(net, args.model)
    mu = _params_vector(_read_json_arg(args.params), names)
    mg, Tg = np.meshgrid(_linspace(args.m_grid), _linspace(args.t_grid), indexing="ij")
    m, T = mg.ravel(), Tg.ravel()
    rows = np.column_stack([np.broadcast_to(mu, (m.size, mu.size)), np.exp(m), T])
    iv = nn.forward(net, rows)
    _write_rows(args.out, ["m", "M", "T", "iv"], zip(m, np.exp(m), T, iv))
    write_provenance(args.out, args)
    return EXIT_OK


def _problem(args):
    net = nn.load(args.net)
    model, names = _net_model(net, args.model)
    ing = ingest_quotes(args.quotes, from_prices=args.from_prices)
    if ing.dropped:
        print(f"{ing.dropped} quotes removed by the spread filter")
    return net, model, names, ing


def cmd_calibrate(args) -> int:
    net, model, names, ing = _problem(args)
    mu0 = _params_vector(_read_json_arg(args.mu0), names)
    raw = _read_json_arg(args.lm_config) if args.lm_config else {}
    if not isinstance(raw, dict):
        raise InputError("--lm-config must be a JSON object")
    if "lower" not in raw:
        priors = sampling.MODELS[model][1]
        raw["lower"] = [priors[n].support[0] for n in names]
        raw["upper"] = [priors[n].support[1] for n in names]
    try:
        cfg = lm.LMConfig(**raw)
    except TypeError as exc:
        raise InputError(f"bad LM config: {exc}") from None
    problem = lm.CalibrationProblem(ing.quotes, net, mu0, model)
    res = lm.calibrate(problem, cfg, strict=False)
    out = {**res.to_dict(), "names": list(names), "model": model, "dropped_quotes": ing.dropped}
    Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if args.trace:
        _write_rows(args.trace, ["iteration", *names, "lambda", "norm", "gain", "accepted", "step_norm"],
                    ([r.iteration, *r.mu, r.lam, r.norm, r.gain, str(r.accepted), r.step_norm] for r in res.trace))
    write_provenance(args.out, args)
    print(json.dumps(out))
    if not res.converged:
        log.error("no convergence within %d iterations", cfg.n_max)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_bayes(args) -> int:
    net, model, names, ing = _problem(args)
    prior = bayes.PriorSpec({n: sampling.MODELS[model][1][n] for n in names})
    like = bayes.LikelihoodSpec.from_quotes(ing.quotes, sigma=args.sigma, weighted=not args.unweighted)
    chain = bayes.run_mcmc(prior, like, net, args.walkers, args.steps, args.seed)
    chain.save_csv(args.out)
    summ = bayes.summarize(chain)
    if args.summary:
        bayes.write_summary(summ, args.summary)
    write_provenance(args.out, args, {k: v for k, v in summ.items() if k != "histograms"})
    print(json.dumps(summ["summary"]))
    return EXIT_OK


def cmd_skew(args) -> int:
    T = _floats(args.maturities)
    if args.net:
        net = nn.load(args.net)
        model, names = _net_model(net, args.model)
        mu = _params_vector(_read_json_arg(args.params), names)
        rep = reports.skew_report(net, T, args.h, mu=mu)
    else:
        if args.model not in sampling.MODELS:
            raise InputError("without --net, --model must name a reference pricer")
        names = sampling.model_info(args.model)[0]
        mu = _params_vector(_read_json_arg(args.params), names)
        ref = _reference_pricer(args.model, mu, args)
        rep = reports.skew_report(lambda m, TT: ref(np.exp(m), TT), T, args.h)
    reports.write_skew_csv(rep, args.out)
    summary = {k: rep[k] for k in ("slope_fd", "slope_exact") if k in rep}
    write_provenance(args.out, args, summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_re_report(args) -> int:
    net = nn.load(args.net)
    model, names = _net_model(net, args.model)
    mu = _params_vector(_read_json_arg(args.params), names)
    mg, Tg = np.meshgrid(_linspace(args.m_grid), _linspace(args.t_grid), indexing="ij")
    rep = reports.relative_error_report(net, _reference_pricer(model, mu, args), mu, (np.exp(mg), Tg))
    reports.write_re_csv(rep, args.out)
    write_provenance(args.out, args, rep["quantiles"])
    print(json.dumps(rep["quantiles"]))
    return EXIT_OK


def cmd_hyperopt(args) -> int:
    ds = sampling.Dataset.load(args.data)
    grid = [_ints(g) for g in args.archs.split(";") if g.strip()]
    base = nn.TrainConfig(max_epochs=args.max_epochs, patience=args.patience)
    best, table = hyperopt.optimize_hyperparams(ds, grid, args.budget, base, kappa=args.kappa, seed=args.seed)
    _write_rows(args.out, ["hidden", "learning_rate", "batch_size", "valid_mse"],
                ((";".join(map(str, e.hidden)), e.learning_rate, e.batch_size, e.valid_mse) for e in table))
    win = {"hidden": list(best.hidden), "learning_rate": best.learning_rate, "batch_size": best.batch_size,
           "valid_mse": best.valid_mse}
    write_provenance(args.out, args, win)
    print(json.dumps(win))
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _mc_flags(p):
    p.add_argument("--paths", type=int, default=10_000, help="rough Bergomi Monte Carlo paths")
    p.add_argument("--steps", type=int, default=None, help="rough Bergomi time steps (default: per-year rate)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepvol", description="Learn and calibrate implied-vol maps of "
                                                            "(rough) stochastic volatility models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled dataset")
    p.add_argument("--model", choices=sorted(sampling.MODELS), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--kde", help="quotes CSV; sample (m, T) from its liquidity-weighted KDE")
    p.add_argument("--group", type=int, default=1, help="rows sharing one parameter draw")
    _mc_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--widths", default="64,64,64")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--patience", type=int, default=40)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--decay-patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", help="optional CSV of per-epoch losses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-surface", help="network IVs on an (m, T) grid")
    p.add_argument("--net", required=True)
    p.add_argument("--params", required=True, help="JSON object or list, inline or a file")
    p.add_argument("--m-grid", default="-0.1:0.28:20", help="log-moneyness lo:hi:n or a list")
    p.add_argument("--t-grid", default="0.01:0.2:20")
    p.add_argument("--model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_surface)

    for name, func, helptext in (("calibrate", cmd_calibrate, "Levenberg-Marquardt calibration"),
                                 ("bayes", cmd_bayes, "posterior sampling")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--net", required=True)
        p.add_argument("--quotes", required=True)
        p.add_argument("--from-prices", action="store_true", help="quotes carry bid_price/ask_price")
        p.add_argument("--model")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "calibrate":
            p.add_argument("--mu0", required=True)
            p.add_argument("--lm-config")
            p.add_argument("--trace")
        else:
            p.add_argument("--walkers", type=int, default=32)
            p.add_argument("--steps", type=int, default=4000)
            p.add_argument("--sigma", type=float, help="common noise scale (default: half spread per quote)")
            p.add_argument("--unweighted", action="store_true")
            p.add_argument("--summary", help="directory for quantile JSON and pair histograms")

    p = sub.add_parser("skew", help="ATM skew table")
    p.add_argument("--net")
    p.add_argument("--model")
    p.add_argument("--params", required=True)
    p.add_argument("--maturities", default="0.01,0.02,0.05,0.1,0.25")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _mc_flags(p)
    p.set_defaults(func=cmd_skew)

    p = sub.add_parser("re-report", help="relative error against the reference pricer")
    p.add_argument("--net", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--model")
    p.add_argument("--m-grid", default="-0.1:0.28:20")
    p.add_argument("--t-grid", default="0.01:0.2:20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _mc_flags(p)
    p.set_defaults(func=cmd_re_report)

    p = sub.add_parser("hyperopt", help="GP search over learning rate and batch size")
    p.add_argument("--data", required=True)
    p.add_argument("--archs", default="64,64,64", help="architectures separated by ';'")
    p.add_argument("--budget", type=int, default=8)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--kappa", type=float, default=hyperopt.KAPPA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hyperopt)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConvergenceError as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except DeepVolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
