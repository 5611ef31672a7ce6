"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 bad input data or files, 4 runtime
failure (including failed checks). Errors are reported as one line on
stderr: ``drbart: error: <message>``.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .io import DrawFileError, DrawWriter, InputError, chain_path, load_csv, load_draws
from .predict import default_y_grid, posterior_mean_density, quantile_matrix, summarize, density_grid
from .priors import BartHyperParams, Sigma0Spec, VarianceHyperParams, calibrate_a0, prior_checks
from .sampler import ChainConfig, default_sigma0, resolve_sigma0, run_chain

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4

log = logging.getLogger('drbart')


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message.replace('\n', ' '))


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise UsageError(f'{what}: expected comma-separated numbers, got {text!r}') from None


def _prob_list(text: str) -> np.ndarray:
    """``0.1,0.5,0.9`` or ``lo..hi`` (step 0.01) or ``lo..hi:step``."""
    if '..' in text:
        lo_s, rest = text.split('..', 1)
        hi_s, _, step_s = rest.partition(':')
        try:
            lo, hi = float(lo_s), float(hi_s)
            step = float(step_s) if step_s else 0.01
        except ValueError:
            raise UsageError(f'--s: cannot parse range {text!r}') from None
        if step <= 0 or hi < lo:
            raise UsageError(f'--s: bad range {text!r}')
        probs = np.round(np.arange(lo, hi + step / 2, step), 10)
    else:
        probs = np.array(_floats(text, '--s'))
    if probs.size == 0 or np.any((probs <= 0) | (probs >= 1)):
        raise UsageError('--s: probabilities must lie strictly inside (0, 1)')
    return probs


def _write_rows(path, header, rows) -> None:
    fh = sys.stdout if path in (None, '-') else open(path, 'w', newline='')
    try:
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _fmt(v) -> str:
    return f'{v:.10g}' if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------------------
# fit


def _fit_config(args, data) -> ChainConfig:
    variant = args.variant.upper()
    if variant != 'L' and (args.nu0 is not None or args.xi0 is not None):
        raise UsageError('--nu0/--xi0 only apply to --variant l')
    if variant == 'L' and args.sigma0 != 'auto':
        raise UsageError('--sigma0 does not apply to --variant l; use --xi0')
    if args.iters < 0 or args.burn < 0 or args.thin < 1:
        raise UsageError('--iters and --burn must be >= 0 and --thin >= 1')
    if args.m < 1 or args.mv < 1 or args.k <= 0:
        raise UsageError('--m and --mv must be >= 1 and --k > 0')
    try:
        a0 = calibrate_a0(args.a0_range)
    except ValueError as exc:
        raise UsageError(f'--a0-range: {exc}') from None
    hp = BartHyperParams(k=args.k, m=args.m, min_leaf=args.min_leaf)
    vhp = VarianceHyperParams(m_v=args.mv, a0=a0)
    x, y = data.x, data.y
    if variant == 'L':
        # nu0 / xi0 are given on the raw scale of y
        guess = default_sigma0(x, y) ** 2
        xi0 = guess if args.xi0 is None else args.xi0 / data.y_map.scale**2
        s0 = Sigma0Spec(mode='inverse-gamma', nu0=3.0 if args.nu0 is None else args.nu0, xi0=xi0)
    elif args.sigma0 == 'auto':
        s0 = None
    else:
        try:
            sigma0 = float(args.sigma0)
        except ValueError:
            raise UsageError(f"--sigma0 must be 'auto' or a positive number, got {args.sigma0!r}") from None
        if not sigma0 > 0:
            raise UsageError('--sigma0 must be positive')
        s0 = Sigma0Spec(mode='fixed', fixed_value=(sigma0 / data.y_map.scale) ** 2)
    config = ChainConfig(
        n_iter=args.iters, n_burn=args.burn, thin=args.thin, seed=args.seed, hp=hp, vhp=vhp, s0=s0,
        latent_update=args.latent, variant=variant, save_latents=args.save_latents,
    )
    return dataclasses.replace(config, s0=resolve_sigma0(x, y, config))


def _run_one(data, config: ChainConfig, path: Path) -> str:
    meta = {'variant': config.variant, 'seed': int(config.seed), 'config': config.to_dict(), 'version': __version__}
    with DrawWriter(path, y_map=data.y_map, x_maps=data.x_maps, meta=meta, columns=data.columns) as writer:
        _, stats = run_chain(data, config, on_draw=writer.write)
    acc = ', '.join(f'{k}={v:.3f}' for k, v in stats.acceptance().items() if v == v)
    return f'{path}: {writer.n} draws ({acc})'


def cmd_fit(args) -> int:
    covars = None if args.covars is None else [c.strip() for c in args.covars.split(',') if c.strip()]
    data = load_csv(args.data, args.response, covars)
    config = _fit_config(args, data)
    if args.chains < 1:
        raise UsageError('--chains must be >= 1')
    if args.chains == 1:
        print(_run_one(data, config, Path(args.out)), file=sys.stderr)
        return EXIT_OK
    children = np.random.SeedSequence(args.seed).spawn(args.chains)
    jobs = []
    for c, child in enumerate(children):
        seed = int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
        jobs.append((dataclasses.replace(config, seed=seed), chain_path(args.out, c, args.chains)))
    with concurrent.futures.ProcessPoolExecutor(max_workers=args.chains) as pool:
        futures = [pool.submit(_run_one, data, cfg, path) for cfg, path in jobs]
        for fut in futures:
            print(fut.result(), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# queries


def _query_x(args, draws) -> np.ndarray:
    x = np.array(_floats(args.x, '--x'))
    n_cov = len(draws.x_maps)
    if x.shape[0] != n_cov:
        raise UsageError(f'--x needs {n_cov} value(s), got {x.shape[0]}')
    return x


def _y_grid(args, draws) -> np.ndarray:
    m = draws.y_map
    lo_obs, hi_obs = m.shift - 0.5 * m.scale, m.shift + 0.5 * m.scale
    grid = default_y_grid((lo_obs, hi_obs), n=args.grid_n)
    lo = grid[0] if args.grid_min is None else args.grid_min
    hi = grid[-1] if args.grid_max is None else args.grid_max
    if not hi > lo or args.grid_n < 2:
        raise UsageError('need --grid-max > --grid-min and --grid-n >= 2')
    return np.linspace(lo, hi, args.grid_n)


def _load(path):
    draws = load_draws(path)
    if len(draws) == 0:
        raise InputError(f'{path} holds no draws')
    return draws


def cmd_density(args) -> int:
    if not 0 <= args.level < 1:
        raise UsageError('--level must lie in [0, 1)')
    draws = _load(args.draws)
    x = _query_x(args, draws)
    grid = _y_grid(args, draws)
    dg = density_grid(draws, x, grid)
    mean, band = summarize(dg, args.level)
    rows = ([_fmt(y), _fmt(m), _fmt(lo), _fmt(hi)] for y, m, lo, hi in zip(grid, mean, band.lower, band.upper))
    _write_rows(args.out, ['y', 'mean', 'lower', 'upper'], rows)
    return EXIT_OK


def cmd_quantile(args) -> int:
    if not 0 <= args.level < 1:
        raise UsageError('--level must lie in [0, 1)')
    probs = _prob_list(args.s)
    draws = _load(args.draws)
    x = _query_x(args, draws)
    q = quantile_matrix(draws, x, probs)
    mean, band = summarize(q, args.level)
    rows = ([_fmt(s), _fmt(m), _fmt(lo), _fmt(hi)] for s, m, lo, hi in zip(probs, mean, band.lower, band.upper))
    _write_rows(args.out, ['s', 'mean', 'lower', 'upper'], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulation and evaluation


def _dgp_spec(name: str, a: float | None, n: int, seed: int):
    from .simbench import DgpSpec

    canonical = {'base': 'base', 'irrelevant14': 'irrelevant14', 'gapx': 'gapX', 'quadratic': 'quadratic'}
    key = name.lower()
    if ':' in key:
        key, _, rest = key.partition(':')
        if rest.startswith('a='):
            try:
                a = float(rest[2:])
            except ValueError:
                raise UsageError(f'bad truth spec {name!r}') from None
    if key not in canonical:
        raise UsageError(f'unknown DGP {name!r}; choose from base, irrelevant14, gapx, quadratic')
    if canonical[key] != 'quadratic' and a is not None:
        raise UsageError('--a only applies to the quadratic DGP')
    if canonical[key] == 'quadratic' and a is None:
        raise UsageError('the quadratic DGP needs --a')
    try:
        return DgpSpec(canonical[key], n=n, seed=seed, a=0.0 if a is None else a)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _probe_point(spec, x1: float) -> np.ndarray:
    x = np.full(spec.n_covariates, 0.5)
    x[0] = x1
    return x


def cmd_simulate(args) -> int:
    from .simbench import dgp_sample, dgp_true_density

    spec = _dgp_spec(args.dgp, args.a, args.n, args.seed)
    x, y = dgp_sample(spec)
    names = ['x'] if x.shape[1] == 1 else [f'x{j + 1}' for j in range(x.shape[1])]
    _write_rows(args.out, [*names, 'y'], ([*map(_fmt, row), _fmt(v)] for row, v in zip(x, y)))
    truth_path = args.truth_out or str(Path(args.out).with_name(Path(args.out).stem + '_truth.csv'))
    probes = _floats(args.x_probes, '--x-probes')
    grid = np.linspace(y.min() - 0.25 * np.ptp(y), y.max() + 0.25 * np.ptp(y), args.grid_n)
    rows = []
    for xp in probes:
        dens = dgp_true_density(xp, grid, spec)
        rows.extend([_fmt(xp), _fmt(g), _fmt(d)] for g, d in zip(grid, dens))
    _write_rows(truth_path, ['x', 'y', 'density'], rows)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .simbench import band_coverage, dgp_sample, dgp_true_density, predictive_coverage, wasserstein1

    draws = _load(args.draws)
    spec = _dgp_spec(args.truth_spec, None, args.test_n, args.test_seed)
    if spec.n_covariates != len(draws.x_maps):
        raise InputError(f'draws have {len(draws.x_maps)} covariates, the truth spec has {spec.n_covariates}')
    probes = _floats(args.x_probes, '--x-probes')
    m = draws.y_map
    grid = np.linspace(m.shift - 1.5 * m.scale, m.shift + 1.5 * m.scale, args.grid_n)
    sub = draws.thinned(args.max_draws)
    rows = []
    for xp in probes:
        point = _probe_point(spec, xp)
        truth = dgp_true_density(xp, grid, spec)
        dg = density_grid(sub, point, grid)
        mean, band = summarize(dg, args.level)
        rows.append(['w1', _fmt(xp), _fmt(wasserstein1(mean, truth, grid))])
        rows.append(['band_coverage', _fmt(xp), str(int(band_coverage(band, truth, grid, args.level)))])
    x_test, y_test = dgp_sample(spec)
    cov = predictive_coverage(draws, x_test, y_test, args.level, max_draws=args.max_draws)
    rows.append(['predictive_coverage', '', _fmt(cov)])
    _write_rows(args.out, ['metric', 'x', 'value'], rows)
    return EXIT_OK


def cmd_prior_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    results = prior_checks(rng, n_trees=args.n_trees, n_scale=args.n_scale)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='drbart', description='Density regression with latent-variable BART.')
    parser.add_argument('--version', action='version', version=f'drbart {__version__}')
    parser.add_argument('-v', '--verbose', action='store_true', help='log progress to stderr')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)

    p = sub.add_parser('fit', help='run the sampler and write draws')
    p.add_argument('--data', required=True)
    p.add_argument('--response', required=True)
    p.add_argument('--covars', help='comma-separated covariate columns (default: all others)')
    p.add_argument('--variant', choices=['l', 'lh', 'full'], default='full', type=str.lower)
    p.add_argument('--m', type=int, default=250)
    p.add_argument('--mv', type=int, default=100)
    p.add_argument('--k', type=float, default=2.0)
    p.add_argument('--a0-range', type=float, default=4.0)
    p.add_argument('--nu0', type=float)
    p.add_argument('--xi0', type=float, help='prior guess of sigma0^2 on the raw y scale')
    p.add_argument('--sigma0', default='auto', help="'auto' or a value on the raw y scale")
    p.add_argument('--min-leaf', type=int, default=5)
    p.add_argument('--iters', type=int, default=1000)
    p.add_argument('--burn', type=int, default=1000)
    p.add_argument('--thin', type=int, default=1)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--latent', choices=['gibbs', 'slice'], default='gibbs')
    p.add_argument('--chains', type=int, default=1)
    p.add_argument('--save-latents', action='store_true')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_fit)

    for name, func, helptext in (
        ('density', cmd_density, 'posterior density curve and band at one x'),
        ('quantile', cmd_quantile, 'posterior quantile summaries at one x'),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument('--draws', required=True)
        p.add_argument('--x', required=True, help='comma-separated covariate values (raw scale)')
        p.add_argument('--level', type=float, default=0.95)
        p.add_argument('--out', default='-')
        if name == 'density':
            p.add_argument('--grid-min', type=float)
            p.add_argument('--grid-max', type=float)
            p.add_argument('--grid-n', type=int, default=512)
        else:
            p.add_argument('--s', default='0.01..0.99')
        p.set_defaults(func=func)

    p = sub.add_parser('simulate', help='draw a synthetic dataset')
    p.add_argument('--dgp', required=True, type=str.lower, choices=['base', 'irrelevant14', 'gapx', 'quadratic'])
    p.add_argument('--a', type=float)
    p.add_argument('--n', type=int, default=800)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--truth-out')
    p.add_argument('--x-probes', default='0.1,0.5,0.8')
    p.add_argument('--grid-n', type=int, default=512)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('evaluate', help='score draws against a known DGP')
    p.add_argument('--draws', required=True)
    p.add_argument('--truth-spec', required=True, help="DGP name, e.g. 'base' or 'quadratic:a=5'")
    p.add_argument('--x-probes', default='0.1,0.5,0.8')
    p.add_argument('--level', type=float, default=0.95)
    p.add_argument('--test-n', type=int, default=1000)
    p.add_argument('--test-seed', type=int, default=12345)
    p.add_argument('--grid-n', type=int, default=1024)
    p.add_argument('--max-draws', type=int, default=250)
    p.add_argument('--out', default='-')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('prior-check', help='Monte Carlo checks of the priors')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--n-trees', type=int, default=100_000)
    p.add_argument('--n-scale', type=int, default=1_000_000)
    p.set_defaults(func=cmd_prior_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError('a subcommand is required (fit, density, quantile, simulate, evaluate, prior-check)')
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format='%(name)s: %(message)s')
        return args.func(args)
    except UsageError as exc:
        print(f'drbart: error: {exc}', file=sys.stderr)
        return EXIT_USAGE
    except (InputError, DrawFileError) as exc:
        print(f'drbart: error: {exc}', file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        msg = str(exc).replace('\n', ' ')
        print(f'drbart: error: {type(exc).__name__}: {msg}', file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
