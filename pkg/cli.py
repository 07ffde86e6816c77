import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

import settings
from errors import EXIT_OK, ConfigError, SQLossError
from gamedistill import CLUSTER_METHODS, EMBED_MODES, OBSERVABILITY_MODES, ORACLE_OPTIMIZERS, DistillConfig
from game_envs import MATRIX_GAMES
from grid_envs import GRID_GAMES
from harness import (DistillRunConfig, ExperimentConfig, eval_oracles, report, run_distill, run_experiment,
                     run_exploitability, run_sweep)
from persistence import read_json

"""
Command-line entry point.

    python cli.py run-matrix --game ipd --learners sql,sql --seeds 20
    python cli.py run-braess --agents 4 --learners sl
    python cli.py distill --game coin --seed 0
    python cli.py run-visual --game coin --oracles runs/distill-coin-seed0
    python cli.py run-visual --game coin --direct
    python cli.py eval-oracle --game coin --oracles runs/distill-coin-seed0
    python cli.py sweep --game ipd --grid z=1,3,10
    python cli.py exploit --game ipd
    python cli.py report runs/ipd-sql-sql --publish

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 data-collection timeout.
"""

LEARNER_FLAGS = ('z', 'beta', 'alpha', 'gamma', 'batch', 'horizon', 'actor_lr', 'critic_lr')


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='JSON experiment config; flags override its values')
    parser.add_argument('--learners', help='comma-separated learner per agent (sl, sql, fixed-c, fixed-d)')
    parser.add_argument('--seeds', help='seed count N (0..N-1) or comma-separated list')
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--z', type=int, help='upper bound of the imagined-repeat length')
    parser.add_argument('--beta', type=float, help='status-quo loss weight (0 = selfish learner)')
    parser.add_argument('--alpha', type=float)
    parser.add_argument('--gamma', type=float)
    parser.add_argument('--batch', type=int)
    parser.add_argument('--horizon', type=int)
    parser.add_argument('--actor-lr', dest='actor_lr', type=float)
    parser.add_argument('--critic-lr', dest='critic_lr', type=float)
    parser.add_argument('--no-baseline', dest='use_baseline', action='store_false', default=None)
    parser.add_argument('--out', help=f'output root (default {settings.OUTPUT_ROOT})')
    parser.add_argument('--experiment-id')
    parser.add_argument('--workers', type=int)
    parser.add_argument('--log-every', type=int)
    parser.add_argument('--no-plots', dest='plots', action='store_false', default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='sqloss', description='Status-quo policy gradient and GameDistill lab')
    verbs = parser.add_subparsers(dest='verb', required=True)

    p = verbs.add_parser('run-matrix', help='iterated matrix games')
    p.add_argument('--game', choices=MATRIX_GAMES + ('custom',))
    p.add_argument('--payoff', help='JSON payoff document (game custom)')
    _add_common(p)

    p = verbs.add_parser('run-braess', help='n-player Braess congestion game')
    p.add_argument('--agents', type=int)
    p.add_argument('--observation', choices=('full', 'count'))
    _add_common(p)

    p = verbs.add_parser('run-visual', help='grid games on distilled oracles or raw pixels')
    p.add_argument('--game', choices=GRID_GAMES)
    p.add_argument('--oracles', help='directory written by the distill verb')
    p.add_argument('--observability', choices=OBSERVABILITY_MODES)
    p.add_argument('--direct', action='store_true', default=None, help='learn on raw observations')
    _add_common(p)

    p = verbs.add_parser('distill', help='GameDistill: collect, encode, cluster, distill oracles')
    p.add_argument('--game', choices=GRID_GAMES, default='coin')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--config', help='JSON object with DistillConfig fields')
    p.add_argument('--min-samples', dest='min_samples', type=int)
    p.add_argument('--look-back', dest='look_back', type=int)
    p.add_argument('--max-steps', dest='max_steps', type=int)
    p.add_argument('--encoder-epochs', dest='encoder_epochs', type=int)
    p.add_argument('--embed-dim', dest='embed_dim', type=int)
    p.add_argument('--embed-mode', dest='embed_mode', choices=EMBED_MODES)
    p.add_argument('--cluster-method', dest='cluster_method', choices=CLUSTER_METHODS)
    p.add_argument('--oracle-epochs', dest='oracle_epochs', type=int)
    p.add_argument('--oracle-optimizer', dest='oracle_optimizer', choices=ORACLE_OPTIMIZERS)
    p.add_argument('--eval-episodes', type=int, default=10)
    p.add_argument('--out')
    p.add_argument('--no-plots', dest='plots', action='store_false', default=True)

    p = verbs.add_parser('eval-oracle', help='solo statistics of distilled oracles')
    p.add_argument('--game', choices=GRID_GAMES, default='coin')
    p.add_argument('--oracles', required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--episodes', type=int, default=10)
    p.add_argument('--batch', type=int, default=100)

    p = verbs.add_parser('sweep', help='grid over learner settings with convergence epochs')
    p.add_argument('--game', choices=MATRIX_GAMES + ('braess',) + GRID_GAMES)
    p.add_argument('--grid', action='append', required=True, help='key=v1,v2,... (repeatable)')
    p.add_argument('--oracles')
    _add_common(p)

    p = verbs.add_parser('exploit', help='SQ learner against fixed opponents')
    p.add_argument('--game', choices=MATRIX_GAMES + GRID_GAMES)
    p.add_argument('--oracles')
    _add_common(p)

    p = verbs.add_parser('report', help='re-aggregate a run directory')
    p.add_argument('run_dir')
    p.add_argument('--no-plots', dest='plots', action='store_false', default=True)
    p.add_argument('--publish', action='store_true', help='upload the run to blob storage')
    return parser


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_grid(entries: List[str]) -> Dict[str, List[Any]]:
    grid = {}
    for entry in entries:
        if '=' not in entry:
            raise ConfigError(f'Grid entry "{entry}" must look like key=v1,v2')
        key, values = entry.split('=', 1)
        grid[key.strip().replace('-', '_')] = [_parse_value(v.strip()) for v in values.split(',') if v.strip()]
    return grid


def experiment_config(args: argparse.Namespace, **fixed) -> ExperimentConfig:
    document: Dict[str, Any] = read_json(args.config) if getattr(args, 'config', None) else {}
    learner = dict(document.get('learner', {}))
    for key in LEARNER_FLAGS + ('use_baseline',):
        value = getattr(args, key, None)
        if value is not None:
            learner[key] = value
    document['learner'] = learner

    flags = {
        'learners': args.learners.split(',') if args.learners else None,
        'seeds': args.seeds,
        'epochs': args.epochs,
        'output_dir': args.out,
        'experiment_id': args.experiment_id,
        'workers': args.workers,
        'log_every': args.log_every,
        'plots': args.plots,
        'game': getattr(args, 'game', None),
        'payoff_file': getattr(args, 'payoff', None),
        'n_agents': getattr(args, 'agents', None),
        'observation': getattr(args, 'observation', None),
        'oracles': getattr(args, 'oracles', None),
        'observability': getattr(args, 'observability', None),
        'direct': getattr(args, 'direct', None),
    }
    document.update({k: v for k, v in flags.items() if v is not None})
    document.update(fixed)
    return ExperimentConfig.from_dict(document)


def distill_config(args: argparse.Namespace) -> DistillRunConfig:
    document = read_json(args.config) if args.config else {}
    for key in ('min_samples', 'look_back', 'max_steps', 'encoder_epochs', 'embed_dim', 'embed_mode',
                'cluster_method', 'oracle_epochs', 'oracle_optimizer'):
        value = getattr(args, key)
        if value is not None:
            document[key] = value
    return DistillRunConfig(game=args.game, seed=args.seed, output_dir=args.out, distill=DistillConfig(**document),
                            eval_episodes=args.eval_episodes, plots=args.plots)


def dispatch(args: argparse.Namespace) -> Any:
    if args.verb == 'run-matrix':
        return run_experiment(experiment_config(args))
    if args.verb == 'run-braess':
        return run_experiment(experiment_config(args, game='braess'))
    if args.verb == 'run-visual':
        return run_experiment(experiment_config(args))
    if args.verb == 'distill':
        return run_distill(distill_config(args))
    if args.verb == 'eval-oracle':
        stats = eval_oracles(args.game, args.oracles, args.seed, args.episodes, args.batch)
        print(json.dumps(stats, indent=2))
        return stats
    if args.verb == 'sweep':
        return run_sweep(experiment_config(args), parse_grid(args.grid))
    if args.verb == 'exploit':
        result = run_exploitability(experiment_config(args))
        print(json.dumps(result, indent=2))
        return result
    if args.verb == 'report':
        return report(args.run_dir, plots=args.plots, publish=args.publish)
    raise ConfigError(f'Unknown verb {args.verb}')


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL.upper(), format='%(asctime)s %(levelname)s %(message)s')
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except SQLossError as e:
        logging.error(f'❌ {type(e).__name__}: {str(e)}')
        return e.exit_code
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
