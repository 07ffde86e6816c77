import numpy as np
import pytest

from game_envs import IteratedMatrixEnv, builtin_payoff
from harness import ExperimentConfig, DistillRunConfig, run_distill, run_experiment, run_exploitability, run_sweep
from persistence import read_json
from policy_engine import FixedPolicy, TabularSoftmax, finite_diff_objective_grad
from sq_learner import Agent, LearnerConfig, discounted_returns, imagined_return, reinforce_grad, rollout
from gamedistill import DistillConfig


def experiment(tmp_path, game, learners, seeds=3, epochs=1000, **extra):
    return ExperimentConfig.from_dict({'game': game, 'learners': learners, 'seeds': seeds, 'epochs': epochs,
                                       'output_dir': str(tmp_path), 'plots': False, 'log_every': 0, **extra})


def late(summary, agent, metric):
    return summary['agents'][str(agent)][metric]['final_mean']


def test_reinforce_matches_exact_gradient():
    gamma = 0.9
    rng = np.random.default_rng(0)
    policy = TabularSoftmax(5, 2, rng.normal(size=(5, 2)))
    r = builtin_payoff('ipd').rewards[:, 0, 0]

    def expected_return(p):
        probs = p.action_probs(np.eye(5))
        total = 0.0
        for a0 in range(2):
            s1 = 1 + 2 * a0
            for a1 in range(2):
                total += probs[0, a0] * probs[s1, a1] * (r[a0] + gamma * r[a1])
        return total

    env = IteratedMatrixEnv(builtin_payoff('ipd'), horizon=2, batch_size=100_000)
    opponent = Agent('fixed-c', FixedPolicy(0, 2, 5), LearnerConfig())
    played = rollout(env, [Agent('sql', policy, LearnerConfig()), opponent], rng)
    batch = played.batches[0]
    estimate = reinforce_grad(batch, policy, None, gamma)
    exact = finite_diff_objective_grad(expected_return, policy)

    # per-episode contributions, whose batch mean is the estimate
    B, T = batch.actions.shape
    weights = (gamma ** np.arange(T))[None, :] * discounted_returns(batch.rewards, gamma)
    score = np.eye(2)[batch.actions] - policy.table()[batch.states]
    per_episode = np.einsum('bts,bta->bsa', np.eye(5)[batch.states], weights[..., None] * score).reshape(B, -1)
    np.testing.assert_allclose(per_episode.mean(axis=0), estimate, atol=1e-10)
    stderr = per_episode.std(axis=0, ddof=1) / np.sqrt(B)
    assert np.all(np.abs(estimate - exact) <= 3 * stderr + 1e-9), (estimate, exact, stderr)


def test_imagined_return_monotone_in_previous_reward():
    rng = np.random.default_rng(1)
    for _ in range(200):
        rewards = -rng.random(6) * 3
        t = int(rng.integers(1, 6))
        kappa = int(rng.integers(1, 11))
        higher = rewards.copy()
        higher[t - 1] += rng.random() + 0.01
        assert imagined_return(higher, t, kappa, 0.96) > imagined_return(rewards, t, kappa, 0.96)


@pytest.mark.slow
def test_ipd_status_quo_learners_cooperate(tmp_path):
    run_experiment(experiment(tmp_path, 'ipd', ['sql']))
    summary = read_json(tmp_path / 'ipd-sql-sql' / 'summary.json')
    for agent in range(2):
        assert -1.10 <= late(summary, agent, 'ndr') <= -1.00


@pytest.mark.slow
def test_ipd_selfish_learners_defect(tmp_path):
    run_experiment(experiment(tmp_path, 'ipd', ['sl']))
    summary = read_json(tmp_path / 'ipd-sl-sl' / 'summary.json')
    for agent in range(2):
        assert -2.05 <= late(summary, agent, 'ndr') <= -1.90


@pytest.mark.slow
def test_matching_pennies_near_zero(tmp_path):
    run_experiment(experiment(tmp_path, 'imp', ['sql']))
    summary = read_json(tmp_path / 'imp-sql-sql' / 'summary.json')
    for agent in range(2):
        assert abs(late(summary, agent, 'ndr')) <= 0.10
        assert summary['agents'][str(agent)]['ndr']['final_std'] <= 0.10


@pytest.mark.slow
def test_chicken_status_quo_learners_cooperate(tmp_path):
    run_experiment(experiment(tmp_path, 'icg', ['sql']))
    summary = read_json(tmp_path / 'icg-sql-sql' / 'summary.json')
    assert late(summary, 0, 'p_cooperation') >= 0.90


@pytest.mark.slow
def test_braess_split(tmp_path):
    run_experiment(experiment(tmp_path, 'braess', ['sql'], n_agents=4))
    run_experiment(experiment(tmp_path, 'braess', ['sl'], n_agents=4))
    sql = read_json(tmp_path / 'braess-sql-sql-sql-sql' / 'summary.json')
    sl = read_json(tmp_path / 'braess-sl-sl-sl-sl' / 'summary.json')
    for agent in range(4):
        assert late(sql, agent, 'p_cooperation') >= 0.90
        assert late(sl, agent, 'p_cooperation') <= 0.10


@pytest.mark.slow
def test_braess_split_with_six_commuters(tmp_path):
    run_experiment(experiment(tmp_path, 'braess', ['sql'], n_agents=6))
    run_experiment(experiment(tmp_path, 'braess', ['sl'], n_agents=6))
    sql = read_json(tmp_path / 'braess-sql-sql-sql-sql-sql-sql' / 'summary.json')
    sl = read_json(tmp_path / 'braess-sl-sl-sl-sl-sl-sl' / 'summary.json')
    sql_coop = np.mean([late(sql, agent, 'p_cooperation') for agent in range(6)])
    sl_coop = np.mean([late(sl, agent, 'p_cooperation') for agent in range(6)])
    assert sql_coop >= 0.5 > sl_coop


@pytest.mark.slow
def test_status_quo_learner_is_not_exploited(tmp_path):
    result = run_exploitability(experiment(tmp_path, 'ipd', ['sql']))
    assert result['pairings']['fixed-d']['sql_defection_rate'] >= 0.90
    assert result['pairings']['fixed-c']['sql_defection_rate'] >= 0.90


@pytest.mark.slow
def test_longer_imagined_repeats_converge_no_later(tmp_path):
    result = run_sweep(experiment(tmp_path, 'ipd', ['sql']), {'z': [1, 3, 10]})
    epochs = {p['z']: p['convergence_epoch'] for p in result['points']}
    assert epochs[1] is None
    assert epochs[10] is not None
    assert epochs[3] is None or epochs[3] >= epochs[10]


@pytest.mark.slow
def test_coin_game_distillation(tmp_path):
    manifest = run_distill(DistillRunConfig(game='coin', seed=0, output_dir=str(tmp_path), plots=False,
                                            distill=DistillConfig(min_samples=2000)))
    out = tmp_path / manifest.experiment_id
    report = read_json(out / 'cluster_report.json')
    for agent in ('agent0', 'agent1'):
        assert report[agent]['purity'] >= 0.95
        solo = report[agent]['solo_evaluation']
        assert solo['cooperation']['other_pick_rate'] <= 0.15
        assert solo['defection']['other_pick_rate'] >= 0.90

    for learner in ('sql', 'sl'):
        run_experiment(experiment(tmp_path, 'coin', [learner], epochs=300, oracles=str(out)))
    sql = read_json(tmp_path / 'coin-sql-sql' / 'summary.json')
    sl = read_json(tmp_path / 'coin-sl-sl' / 'summary.json')
    for agent in range(2):
        assert late(sql, agent, 'p_own_coin') >= 0.90
        assert late(sl, agent, 'p_own_coin') <= 0.60
