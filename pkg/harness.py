import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import settings
from congestion_env import BraessConfig, BraessEnv, OBSERVATION_MODES
from errors import AlignmentError, ConfigError, NumericalError
from game_envs import (MATRIX_GAMES, ZERO_SUM_GAMES, IteratedMatrixEnv, PayoffMatrix, VecEnv, classify_dilemma,
                       load_payoff, normalize_for_training)
from gamedistill import (OBSERVABILITY_MODES, DistillConfig, OraclePair, classify_meta_payoff, distill_agent,
                         estimate_meta_payoff, make_meta_env, module_from_weights, module_to_weights,
                         samples_to_arrays, solo_oracle_stats)
from grid_envs import GRID_GAMES, make_grid_env
from metrics import (LOLA_PG_CITED, AggregateBand, MetricSeries, aggregate, convergence_epoch, late_mean,
                     summarize_band)
from persistence import (atomic_write_json, load_weights, read_csv, read_json, save_dataset, save_weights,
                         sha256_file, write_csv)
from plotting import plot_bands, plot_clusters
from publish import publish_run
from seeding import derive_rng
from sq_learner import LEARNER_KINDS, LearnerConfig, make_agent, train

"""
Experiment harness
==================

run_experiment      - train every seed, write results.csv / aggregate.csv /
                      summary.json / manifest.json (+ SVG plots, final policies)
run_distill         - GameDistill for both agents of a grid game
run_sweep           - one run_experiment per grid point, convergence table
run_exploitability  - SQ learner against fixed opponents and itself
report              - re-aggregate an existing run directory

Seeds run in a process pool of `workers` processes; each seed's randomness
comes from streams derived from (seed, component, index), so results do not
depend on the pool size or on the order of the seeds list.
"""

GAMES = MATRIX_GAMES + ('custom', 'braess') + GRID_GAMES
RESULT_FIELDS = ['experiment_id', 'game', 'learner', 'seed', 'agent', 'epoch', 'metric', 'value']
AGGREGATE_FIELDS = ['experiment_id', 'game', 'learner', 'agent', 'epoch', 'metric', 'mean', 'std', 'n_seeds']
PLOTTED_METRICS = {'ndr': 'NDR', 'p_cooperation': 'P(cooperation)', 'p_own_coin': 'P(own coin)'}
SUMMARY_METRICS = ('ndr', 'p_cooperation', 'p_own_coin')
SWEEP_KEYS = tuple(f.name for f in fields(LearnerConfig))


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def parse_seeds(value: Union[int, str, Sequence[int]]) -> List[int]:
    """`20` -> 0..19, `"3,5,8"` -> [3, 5, 8], lists pass through."""
    if isinstance(value, int):
        return list(range(value))
    if isinstance(value, str):
        parts = [p for p in value.split(',') if p.strip()]
        if len(parts) == 1:
            return list(range(int(parts[0])))
        return [int(p) for p in parts]
    return [int(s) for s in value]


@dataclass
class ExperimentConfig:
    game: str = 'ipd'
    learners: List[str] = field(default_factory=lambda: ['sql', 'sql'])
    seeds: List[int] = field(default_factory=lambda: [0])
    epochs: int = 1000
    learner: Dict[str, Any] = field(default_factory=dict)
    experiment_id: Optional[str] = None
    output_dir: Optional[str] = None
    payoff_file: Optional[str] = None
    n_agents: int = 4
    observation: str = 'full'
    oracles: Optional[str] = None
    observability: str = 'reveal'
    direct: bool = False
    plots: bool = True
    workers: int = settings.WORKERS
    log_every: int = 50

    def __post_init__(self):
        if self.game not in GAMES:
            raise ConfigError(f'Unknown game "{self.game}", expected one of {GAMES}')
        if self.game == 'custom' and not self.payoff_file:
            raise ConfigError('game "custom" needs payoff_file')
        self.seeds = parse_seeds(self.seeds)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f'seeds must be non-empty and distinct, got {self.seeds}')
        if isinstance(self.learners, str):
            self.learners = [self.learners]
        if len(self.learners) == 1:
            self.learners = self.learners * self.agent_count
        if len(self.learners) != self.agent_count:
            raise ConfigError(f'{self.game} needs {self.agent_count} learners, got {len(self.learners)}')
        unknown = [k for k in self.learners if k not in LEARNER_KINDS]
        if unknown:
            raise ConfigError(f'Unknown learners {unknown}, expected from {LEARNER_KINDS}')
        bad_keys = [k for k in self.learner if k not in SWEEP_KEYS]
        if bad_keys:
            raise ConfigError(f'Unknown learner settings {bad_keys}')
        if self.epochs < 1:
            raise ConfigError(f'epochs must be >= 1, got {self.epochs}')
        if self.observation not in OBSERVATION_MODES:
            raise ConfigError(f'Unknown Braess observation mode "{self.observation}"')
        if self.observability not in OBSERVABILITY_MODES:
            raise ConfigError(f'Unknown observability "{self.observability}"')
        if self.game in GRID_GAMES and not self.direct and not self.oracles:
            raise ConfigError(f'{self.game} needs oracle artifacts (oracles=<distill dir>) or direct=true')
        if self.direct and self.game not in GRID_GAMES:
            raise ConfigError('direct training only applies to grid games')
        if self.experiment_id is None:
            suffix = '-direct' if self.direct else ''
            self.experiment_id = f'{self.game}-{"-".join(self.learners)}{suffix}'

    @property
    def agent_count(self) -> int:
        return self.n_agents if self.game == 'braess' else 2

    @property
    def out_dir(self) -> Path:
        return Path(self.output_dir or settings.OUTPUT_ROOT) / self.experiment_id

    def learner_config(self) -> LearnerConfig:
        overrides = dict(self.learner)
        overrides.setdefault('epochs', self.epochs)
        if 'hidden' in overrides:
            overrides['hidden'] = tuple(overrides['hidden'])
        return LearnerConfig.for_game(self.game, **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> 'ExperimentConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(document) - known)
        if unknown:
            raise ConfigError(f'Unknown experiment config keys {unknown}')
        return cls(**document)

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides) -> 'ExperimentConfig':
        document = read_json(path)
        document.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(document)


@dataclass
class RunManifest:
    experiment_id: str
    config: Dict[str, Any]
    started_at: str
    finished_at: Optional[str] = None
    code_version: str = settings.CODE_VERSION
    artifacts: Dict[str, str] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    def record(self, out_dir: Path, path: Path):
        self.artifacts[Path(path).relative_to(out_dir).as_posix()] = sha256_file(path)

    def write(self, out_dir: Path) -> Path:
        self.artifacts = dict(sorted(self.artifacts.items()))
        return atomic_write_json(out_dir / 'manifest.json', asdict(self))

    @classmethod
    def load(cls, out_dir: Path) -> 'RunManifest':
        return cls(**read_json(Path(out_dir) / 'manifest.json'))

    def verify(self, out_dir: Path) -> List[str]:
        """Artifacts whose file is missing or whose checksum no longer matches."""
        bad = []
        for relative, digest in self.artifacts.items():
            path = Path(out_dir) / relative
            if not path.exists() or sha256_file(path) != digest:
                bad.append(relative)
        return bad


# ---------------------------------------------------------------------------
# Environments and per-seed training
# ---------------------------------------------------------------------------

def resolve_payoff(cfg: ExperimentConfig) -> Tuple[PayoffMatrix, PayoffMatrix, float]:
    raw = load_payoff(cfg.payoff_file if cfg.game == 'custom' else cfg.game)
    normalized, shift = normalize_for_training(raw)
    return raw, normalized, shift


def _matrix_env(payoff: PayoffMatrix, horizon: int, batch_size: int) -> VecEnv:
    return IteratedMatrixEnv(payoff, horizon, batch_size)


def _braess_env(braess: BraessConfig, batch_size: int) -> VecEnv:
    return BraessEnv(braess, batch_size)


def _grid_env(game: str, horizon: int, batch_size: int) -> VecEnv:
    return make_grid_env(game, horizon, batch_size)


def load_oracles(directory: Union[str, Path]) -> List[OraclePair]:
    directory = Path(directory)
    pairs = []
    for agent in range(2):
        paths = [directory / f'agent{agent}_{role}_oracle.json' for role in ('cooperation', 'defection')]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ConfigError(f'Missing oracle artifacts: {missing}')
        pairs.append(OraclePair(*(module_from_weights(load_weights(p)) for p in paths)))
    return pairs


def _meta_env(game: str, oracle_dir: str, observability: str, horizon: int, batch_size: int) -> VecEnv:
    return make_meta_env(game, load_oracles(oracle_dir), horizon, batch_size, observability)


def build_env_factory(cfg: ExperimentConfig, learner_cfg: LearnerConfig) -> Callable[[int], VecEnv]:
    """Picklable `batch_size -> VecEnv` callable for the configured game."""
    if cfg.game in MATRIX_GAMES or cfg.game == 'custom':
        return partial(_matrix_env, resolve_payoff(cfg)[1], learner_cfg.horizon)
    if cfg.game == 'braess':
        return partial(_braess_env, BraessConfig(cfg.n_agents, learner_cfg.horizon, cfg.observation))
    if cfg.direct:
        return partial(_grid_env, cfg.game, learner_cfg.horizon)
    return partial(_meta_env, cfg.game, cfg.oracles, cfg.observability, learner_cfg.horizon)


def train_seed(config: Dict[str, Any], seed: int) -> Dict[str, Any]:
    """Process-pool entry point: one seed, returned as plain picklable data."""
    cfg = ExperimentConfig.from_dict(config)
    learner_cfg = cfg.learner_config()
    factory = build_env_factory(cfg, learner_cfg)
    probe = factory(1)
    agents = [make_agent(kind, probe, learner_cfg, derive_rng(seed, 'init', i)) for i, kind in enumerate(cfg.learners)]
    try:
        history = train(factory, agents, cfg.epochs, seed, log_every=cfg.log_every)
    except NumericalError as e:
        return {'seed': seed, 'error': str(e), 'snapshot': e.snapshot}
    return {
        'seed': seed,
        'rows': history.to_rows(),
        'policies': [agent.policy.to_weights() for agent in history.agents],
    }


def _run_seeds(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    payload = cfg.to_dict()
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        logging.info(f'🚀 Running {len(cfg.seeds)} seeds on {cfg.workers} workers')
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(train_seed, [payload] * len(cfg.seeds), cfg.seeds))
    return [train_seed(payload, seed) for seed in cfg.seeds]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def bands_from_rows(rows: Sequence[Dict[str, Any]]) -> Dict[Tuple[int, str], AggregateBand]:
    """
    One band per (agent, metric). Seeds are aggregated in sorted order; a
    metric missing at some epochs for some seeds (p_own_coin with no picks) is
    restricted to the epochs every seed reports.
    """
    per_key: Dict[Tuple[int, str], Dict[int, List[Tuple[int, float]]]] = {}
    for row in rows:
        key = (int(row['agent']), row['metric'])
        per_key.setdefault(key, {}).setdefault(int(row['seed']), []).append((int(row['epoch']), float(row['value'])))

    bands = {}
    for key, by_seed in sorted(per_key.items()):
        series = []
        for seed in sorted(by_seed):
            epochs, values = zip(*sorted(by_seed[seed]))
            series.append(MetricSeries(key[1], np.array(epochs), np.array(values), seed, key[0]))
        try:
            bands[key] = aggregate(series)
        except AlignmentError:
            common = set(series[0].epochs.tolist())
            for s in series[1:]:
                common &= set(s.epochs.tolist())
            if not common:
                logging.warning(f'⚠️ No common epochs for agent {key[0]} {key[1]}; skipped')
                continue
            grid = np.array(sorted(common))
            trimmed = [MetricSeries(s.name, grid, s.values[np.isin(s.epochs, grid)], s.seed, s.agent) for s in series]
            bands[key] = aggregate(trimmed)
    return bands


def convergence_target(game: str) -> Optional[Tuple[str, float, bool]]:
    """(metric, threshold, above) for convergence epochs, or None when the game has no single target."""
    if game == 'ipd':
        return 'ndr', -1.1, True
    if game == 'ish':
        return 'ndr', -0.1, True
    if game in ('icg', 'braess'):
        return 'p_cooperation', 0.9, True
    if game == 'coin':
        return 'p_own_coin', 0.9, True
    if game == 'staghunt':
        return 'p_cooperation', 0.9, True
    return None


def band_convergence(bands: Dict[Tuple[int, str], AggregateBand], game: str, sustain: int = 10) -> Optional[int]:
    """Epoch from which every agent's mean curve holds the target; None if any agent never does."""
    target = convergence_target(game)
    if target is None:
        return None
    metric, threshold, above = target
    epochs = []
    for (agent, name), band in bands.items():
        if name != metric:
            continue
        hit = convergence_epoch(band.epochs, band.mean, threshold, sustain, above)
        if hit is None:
            return None
        epochs.append(hit)
    return max(epochs) if epochs else None


def summarize(cfg_game: str, bands: Dict[Tuple[int, str], AggregateBand], fraction: float = 0.1) -> Dict[str, Any]:
    agents: Dict[str, Dict[str, Any]] = {}
    for (agent, metric), band in bands.items():
        if metric in SUMMARY_METRICS or metric.startswith('pi0:'):
            agents.setdefault(str(agent), {})[metric] = summarize_band(band, fraction)
    summary: Dict[str, Any] = {'agents': agents, 'convergence_epoch': band_convergence(bands, cfg_game)}
    cited = {}
    if cfg_game == 'ipd':
        cited['lola_pg_ndr'] = {'value': LOLA_PG_CITED['ipd_ndr'], 'cited': True}
    if cfg_game == 'coin':
        cited['lola_pg_own_coin_rate'] = {'value': LOLA_PG_CITED['coin_own_coin_rate'], 'cited': True}
    if cited:
        summary['cited'] = cited
    return summary


def write_aggregates(out_dir: Path, experiment_id: str, game: str, learners: Sequence[str],
                     bands: Dict[Tuple[int, str], AggregateBand]) -> Path:
    rows = []
    for (agent, metric), band in bands.items():
        for epoch, mean, std in zip(band.epochs, band.mean, band.std):
            rows.append({'experiment_id': experiment_id, 'game': game, 'learner': learners[agent], 'agent': agent,
                         'epoch': int(epoch), 'metric': metric, 'mean': float(mean), 'std': float(std),
                         'n_seeds': band.n_seeds})
    return write_csv(out_dir / 'aggregate.csv', rows, AGGREGATE_FIELDS)


def write_plots(out_dir: Path, game: str, learners: Sequence[str],
                bands: Dict[Tuple[int, str], AggregateBand]) -> List[Path]:
    written = []
    for metric, label in PLOTTED_METRICS.items():
        selected = {f'agent {a} ({learners[a]})': b for (a, m), b in bands.items() if m == metric}
        if not selected:
            continue
        cited = None
        if metric == 'ndr' and game == 'ipd':
            cited = {'Lola-PG': LOLA_PG_CITED['ipd_ndr']}
        if metric == 'p_own_coin' and game == 'coin':
            cited = {'Lola-PG': LOLA_PG_CITED['coin_own_coin_rate']}
        written.append(plot_bands(selected, out_dir / f'{metric}.svg', label, title=game, cited=cited))
    return written


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    learner_cfg = cfg.learner_config()
    manifest = RunManifest(cfg.experiment_id, cfg.to_dict(), _utc_now())
    manifest.details['learner_config'] = learner_cfg.to_dict()

    shift = 0.0
    if cfg.game in MATRIX_GAMES or cfg.game == 'custom':
        raw, _, shift = resolve_payoff(cfg)
        manifest.details['payoff'] = raw.to_json()
        manifest.details['payoff_shift'] = shift
        if raw.name not in ZERO_SUM_GAMES:
            manifest.details['dilemma'] = asdict(classify_dilemma(*raw.dilemma_entries()))
    if cfg.game == 'braess':
        manifest.details['braess'] = {'n_agents': cfg.n_agents, 'horizon': learner_cfg.horizon,
                                      'observation': cfg.observation, 'base_reward': 1.25 * cfg.n_agents}

    logging.info(f'🚀 Experiment {cfg.experiment_id}: {cfg.learners} on {cfg.game}, seeds {cfg.seeds}')
    results = _run_seeds(cfg)
    failed = [r for r in results if 'error' in r]
    if failed:
        path = atomic_write_json(out_dir / 'diagnostic_snapshot.json', failed)
        logging.error(f'❌ {len(failed)} seed(s) failed numerically; snapshot written to {path}')
        raise NumericalError(failed[0]['error'], snapshot=failed[0]['snapshot'])

    # NDR is reported in the original payoff units
    ndr_offset = shift * (1.0 - learner_cfg.gamma ** learner_cfg.horizon)
    rows = []
    for result in results:
        for row in result['rows']:
            value = row['value'] + ndr_offset if row['metric'] == 'ndr' else row['value']
            rows.append({'experiment_id': cfg.experiment_id, 'game': cfg.game,
                         'learner': cfg.learners[row['agent']], **row, 'value': value})
    manifest.record(out_dir, write_csv(out_dir / 'results.csv', rows, RESULT_FIELDS))

    for result in results:
        for agent, weights in enumerate(result['policies']):
            path = save_weights(out_dir / 'policies' / f'seed{result["seed"]}_agent{agent}.json',
                                {**weights, 'metadata': {'seed': result['seed'], 'learner': cfg.learners[agent]}})
            manifest.record(out_dir, path)

    bands = bands_from_rows(rows)
    manifest.record(out_dir, write_aggregates(out_dir, cfg.experiment_id, cfg.game, cfg.learners, bands))
    summary = summarize(cfg.game, bands)
    manifest.record(out_dir, atomic_write_json(out_dir / 'summary.json', summary))
    if cfg.plots:
        for path in write_plots(out_dir, cfg.game, cfg.learners, bands):
            manifest.record(out_dir, path)

    manifest.finished_at = _utc_now()
    manifest.write(out_dir)
    logging.info(f'✅ Experiment {cfg.experiment_id} written to {out_dir}')
    return manifest


@dataclass
class DistillRunConfig:
    game: str = 'coin'
    seed: int = 0
    output_dir: Optional[str] = None
    experiment_id: Optional[str] = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval_episodes: int = 10
    eval_batch: int = 100
    plots: bool = True

    def __post_init__(self):
        if self.game not in GRID_GAMES:
            raise ConfigError(f'distill needs a grid game {GRID_GAMES}, got "{self.game}"')
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        if self.experiment_id is None:
            self.experiment_id = f'distill-{self.game}-seed{self.seed}'

    @property
    def out_dir(self) -> Path:
        return Path(self.output_dir or settings.OUTPUT_ROOT) / self.experiment_id


def evaluate_oracles(game: str, pair: OraclePair, seed: int, episodes: int, batch: int,
                     agent: int = 0) -> Dict[str, Dict[str, float]]:
    env = make_grid_env(game, batch_size=batch)
    return {role: solo_oracle_stats(env, oracle, derive_rng(seed, f'eval-{role}', agent), episodes, agent)
            for role, oracle in (('cooperation', pair.cooperation), ('defection', pair.defection))}


def run_distill(cfg: DistillRunConfig) -> RunManifest:
    """collect -> encode -> cluster -> label -> distill for each agent, plus solo and meta-game checks."""
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.experiment_id, asdict(cfg), _utc_now())
    reports = {}
    pairs = []
    for agent in range(2):
        result = distill_agent(cfg.game, agent, cfg.distill, cfg.seed)
        windows, rewards = samples_to_arrays(result.samples)
        prefix = f'agent{agent}'
        written = [
            save_dataset(out_dir / f'{prefix}_samples.npz', windows, rewards,
                         {'game': cfg.game, 'agent': agent, 'look_back': cfg.distill.look_back}),
            save_weights(out_dir / f'{prefix}_encoder.json',
                         module_to_weights(result.encoder_fit.encoder, 'encoder', {'seed': cfg.seed})),
            save_weights(out_dir / f'{prefix}_cooperation_oracle.json',
                         module_to_weights(result.cooperation_fit.oracle, 'oracle', {'role': 'cooperation'})),
            save_weights(out_dir / f'{prefix}_defection_oracle.json',
                         module_to_weights(result.defection_fit.oracle, 'oracle', {'role': 'defection'})),
        ]
        if cfg.plots:
            names = ['cooperation' if j == result.labels.cooperation else 'defection' for j in range(2)]
            written.append(plot_clusters(result.embeddings, result.clusters.assignments,
                                         out_dir / f'{prefix}_clusters.svg', names, f'{cfg.game} agent {agent}'))
        for path in written:
            manifest.record(out_dir, path)
        report = result.report()
        report['solo_evaluation'] = evaluate_oracles(cfg.game, result.oracles, cfg.seed, cfg.eval_episodes,
                                                     cfg.eval_batch, agent)
        reports[prefix] = report
        pairs.append(result.oracles)

    meta_env = make_meta_env(cfg.game, pairs, batch_size=cfg.eval_batch)
    meta_payoff = estimate_meta_payoff(meta_env, derive_rng(cfg.seed, 'meta-payoff'), cfg.eval_episodes)
    reports['meta_game'] = {'payoff': meta_payoff.to_json(), 'classification': classify_meta_payoff(meta_payoff)}
    manifest.record(out_dir, atomic_write_json(out_dir / 'cluster_report.json', reports))
    manifest.finished_at = _utc_now()
    manifest.write(out_dir)
    logging.info(f'✅ Distillation for {cfg.game} written to {out_dir}')
    return manifest


def eval_oracles(game: str, oracle_dir: Union[str, Path], seed: int = 0, episodes: int = 10,
                 batch: int = 100) -> Dict[str, Any]:
    pairs = load_oracles(oracle_dir)
    return {f'agent{agent}': evaluate_oracles(game, pair, seed, episodes, batch, agent)
            for agent, pair in enumerate(pairs)}


def run_sweep(base: ExperimentConfig, grid: Dict[str, Sequence[Any]]) -> Dict[str, Any]:
    """Cartesian product over learner settings; one experiment per point."""
    bad = [k for k in grid if k not in SWEEP_KEYS]
    if bad or not grid:
        raise ConfigError(f'Sweep keys must be learner settings {SWEEP_KEYS}, got {list(grid)}')
    keys = sorted(grid)
    sweep_id = f'{base.experiment_id}-sweep'
    root = Path(base.output_dir or settings.OUTPUT_ROOT) / sweep_id
    points = []
    for values in itertools.product(*(grid[k] for k in keys)):
        setting = dict(zip(keys, values))
        label = '-'.join(f'{k}{v}' for k, v in setting.items())
        cfg = ExperimentConfig.from_dict({**base.to_dict(), 'learner': {**base.learner, **setting},
                                          'experiment_id': label, 'output_dir': str(root)})
        run_experiment(cfg)
        bands = bands_from_rows(read_csv(cfg.out_dir / 'results.csv'))
        point = {**setting, 'experiment_id': label, 'convergence_epoch': band_convergence(bands, cfg.game)}
        for (agent, metric), band in bands.items():
            if metric in SUMMARY_METRICS:
                point[f'{metric}_agent{agent}'] = late_mean(band.mean)
        points.append(point)
        logging.info(f'📈 Sweep point {label}: convergence epoch {point["convergence_epoch"]}')

    columns = sorted({k for p in points for k in p}, key=lambda k: (k not in keys, k))
    write_csv(root / 'sweep.csv', points, columns)
    report = {'base': base.experiment_id, 'grid': {k: list(grid[k]) for k in keys}, 'points': points}
    atomic_write_json(root / 'sweep.json', report)
    logging.info(f'✅ Sweep of {len(points)} points written to {root}')
    return report


EXPLOIT_OPPONENTS = ('fixed-d', 'fixed-c', 'sql')


def run_exploitability(base: ExperimentConfig) -> Dict[str, Any]:
    """SQ learner (agent 0) against always-defect, always-cooperate and another SQ learner."""
    root = Path(base.output_dir or settings.OUTPUT_ROOT) / f'{base.game}-exploitability'
    pairings = {}
    for opponent in EXPLOIT_OPPONENTS:
        cfg = ExperimentConfig.from_dict({**base.to_dict(), 'learners': ['sql', opponent],
                                          'experiment_id': f'sql-vs-{opponent}', 'output_dir': str(root)})
        run_experiment(cfg)
        bands = bands_from_rows(read_csv(cfg.out_dir / 'results.csv'))
        coop = bands.get((0, 'p_cooperation'))
        pairings[opponent] = {
            'sql_defection_rate': None if coop is None else 1.0 - late_mean(coop.mean),
            'sql_ndr': late_mean(bands[(0, 'ndr')].mean),
        }
        logging.info(f'📊 SQ learner vs {opponent}: {pairings[opponent]}')
    report = {'game': base.game, 'pairings': pairings}
    atomic_write_json(root / 'exploitability.json', report)
    return report


def report(run_dir: Union[str, Path], plots: bool = True, publish: bool = False) -> Dict[str, Any]:
    """Rebuild aggregate.csv, summary.json and plots from results.csv; optionally upload the run."""
    run_dir = Path(run_dir)
    rows = read_csv(run_dir / 'results.csv')
    if not rows:
        raise ConfigError(f'{run_dir}/results.csv holds no rows')
    manifest = RunManifest.load(run_dir)
    game = rows[0]['game']
    n_agents = max(int(r['agent']) for r in rows) + 1
    learners = [''] * n_agents
    for r in rows:
        learners[int(r['agent'])] = r['learner']

    bands = bands_from_rows(rows)
    manifest.record(run_dir, write_aggregates(run_dir, manifest.experiment_id, game, learners, bands))
    summary = summarize(game, bands)
    manifest.record(run_dir, atomic_write_json(run_dir / 'summary.json', summary))
    if plots:
        for path in write_plots(run_dir, game, learners, bands):
            manifest.record(run_dir, path)
    manifest.details['reported_at'] = _utc_now()
    manifest.write(run_dir)

    if publish:
        summary['published'] = publish_run(run_dir, asdict(manifest))
    logging.info(f'✅ Report for {run_dir} regenerated')
    return summary
