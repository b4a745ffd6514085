"""
Command-line surface.

    itm run <config>
    itm sweep <config> --eps 0.2,0.1,0.05,0.025
    itm oracle <config> --levels 3
    itm refocus <config>
    itm jump-limit <config>
    itm uniformity <config>

Common flags: --out <dir>, --seed <n>, --threads <n>, --solver, --verbose.
Exit status: 0 ok, 2 known ITM error, 1 anything else.
"""
import argparse
import copy
import logging
import sys
from typing import List, Optional

import itm
from itm.services import geometry
from itm.services.data_manager import SOLVERS, config_from_dict, load_config
from itm.services.experiments import run_experiment
from itm.services.logger import log_exception
from itm.utils.errors import ItmError
from itm.utils.helpers import parse_float_list

logger = logging.getLogger(__name__)

COMMANDS = {
    'run': 'run',
    'sweep': 'sweep',
    'oracle': 'oracle-compare',
    'refocus': 'refocus',
    'jump-limit': 'jump-limit',
    'uniformity': 'uniformity',
}

# Where --eps lands for each experiment kind
EPS_SECTION = {'sweep': 'sweep', 'jump-limit': 'sweep', 'refocus': 'refocus', 'uniformity': 'uniformity'}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='itm', description="Wave equation with instantaneous time mirrors")
    parser.add_argument('--version', action='version', version=f"itm {itm.__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('config', help="experiment config (JSON)")
    common.add_argument('--out', help="output directory (default: <out_dir>/<name> from the config)")
    common.add_argument('--seed', type=int, help="seed for rough initial data")
    common.add_argument('--threads', type=int, help="parallel jobs and FFT workers")
    common.add_argument('--solver', choices=SOLVERS, help="force the oracle or the time-domain solver")
    common.add_argument('--verbose', '-v', action='store_true', help="debug logging")

    sub.add_parser('run', parents=[common], help="single evolution with snapshots")
    p = sub.add_parser('sweep', parents=[common], help="remainder norms against eps")
    p.add_argument('--eps', help="comma-separated eps values, e.g. 0.2,0.1,0.05,0.025")
    p = sub.add_parser('oracle', parents=[common], help="time-domain solver against the Fourier oracle")
    p.add_argument('--levels', type=int, help="number of dyadic refinement levels")
    for name, text in (('refocus', "refocused field at 2T"),
                       ('jump-limit', "finite windows against the jump condition"),
                       ('uniformity', "norm bounds across eps")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--eps', help="comma-separated eps values")
    return parser


def _apply_overrides(args: argparse.Namespace):
    config = load_config(args.config)
    raw = copy.deepcopy(config.raw)
    kind = COMMANDS[args.command]
    raw['kind'] = kind
    if args.seed is not None:
        raw['seed'] = args.seed
    if args.threads is not None:
        raw['threads'] = args.threads
    if args.solver is not None:
        raw['solver'] = args.solver
    if getattr(args, 'eps', None):
        raw.setdefault(EPS_SECTION[kind], {})['eps'] = parse_float_list(args.eps)
    if getattr(args, 'levels', None) is not None:
        raw.setdefault('oracle', {})['levels'] = args.levels
    return config_from_dict(raw, source=args.config, apply_env=False)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_overrides(args)
        out_dir = args.out
        itm.setup_logging(out_dir or config.out_dir, verbose=args.verbose)
        geometry.set_fft_workers(config.threads)
        result = run_experiment(config, out_dir=out_dir)
    except ItmError as e:
        log_exception(e, source=f"CLI/{args.command}")
        print(f"[{e.code}] {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log_exception(e, source=f"CLI/{args.command}")
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 1

    print(f"{result.kind}: wrote {len(result.outputs)} table(s) to {result.out_dir}")
    for key, value in result.summary.items():
        if not isinstance(value, (list, dict)):
            print(f"  {key}: {value}")
    return 0


if __name__ == '__main__':
    sys.exit(main())
