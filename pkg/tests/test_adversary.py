import math

import pytest

from blocksim.adversary import (
    ACCEPT,
    MAJORITY_OVERTAKE,
    WAIT,
    AttackSpec,
    GreenAddressPolicy,
    accept_payment,
    run_attack,
    run_double_spend,
    run_grid,
    run_majority_overtake,
    wilson_interval,
    zero_conf_scenario,
)
from blocksim.config import ConfigError
from blocksim.ledger import generate_keypair
from oracles import double_spend_exact, gamblers_ruin_lead, race_walk


def within(rate, expected, n, sigmas=3.0):
    sd = math.sqrt(max(expected * (1 - expected), 1e-12) / n)
    return abs(rate - expected) <= sigmas * sd + 1e-12


# -- attack settings ------------------------------------------------------


def test_spec_validation_names_keys():
    with pytest.raises(ConfigError) as err:
        AttackSpec(attacker_share=1.2).validate()
    assert err.value.key == "attack.attacker_share"
    with pytest.raises(ConfigError):
        AttackSpec(confirmations=0).validate()
    with pytest.raises(ConfigError):
        AttackSpec(trials=0).validate()
    with pytest.raises(ConfigError) as err:
        AttackSpec.from_dict({"trails": 5})
    assert err.value.key == "attack.trails"
    with pytest.raises(ConfigError):
        run_double_spend(AttackSpec(kind=MAJORITY_OVERTAKE, attacker_share=0.5))


def test_wilson_interval_brackets_rate():
    lo, hi = wilson_interval(30, 100)
    assert lo < 0.3 < hi
    assert wilson_interval(0, 100)[0] == 0.0 and wilson_interval(100, 100)[1] == pytest.approx(1.0)


# -- double spend ---------------------------------------------------------


def test_zero_share_never_succeeds():
    out = run_double_spend(AttackSpec(attacker_share=0.0, confirmations=1, trials=500))
    assert out.success_count == 0 and out.success_rate == 0.0
    assert math.isnan(out.mean_blocks_to_success)


def test_majority_double_spend_succeeds_at_long_horizon():
    out = run_double_spend(AttackSpec(attacker_share=0.6, confirmations=6, horizon=200, trials=1000, seed=1))
    assert out.success_rate >= 0.99


def test_small_attacker_rarely_wins_against_six_confirmations():
    out = run_double_spend(AttackSpec(attacker_share=0.1, confirmations=6, trials=100_000, seed=2))
    exact = double_spend_exact(0.1, 6, 50)
    assert out.success_rate < 0.01
    assert within(out.success_rate, exact, out.trial_count)


@pytest.mark.parametrize("q,z", [(0.1, 1), (0.2, 2), (0.3, 4), (0.45, 3)])
def test_double_spend_matches_oracles(q, z):
    n = 20_000
    out = run_double_spend(AttackSpec(attacker_share=q, confirmations=z, trials=n, seed=7))
    exact = double_spend_exact(q, z, 50)
    walk = race_walk(q, z, 50, n, seed=7).mean()
    assert within(out.success_rate, exact, n)
    assert within(walk, exact, n)


def test_chain_backed_race_reproduces_counting_race():
    spec = AttackSpec(attacker_share=0.35, confirmations=2, trials=150, seed=3)
    plain = run_double_spend(spec)
    backed = run_double_spend(AttackSpec(**{**spec.to_dict(), "chain_backed": True}))
    assert [r.success for r in plain.records] == [r.success for r in backed.records]
    assert [(r.attacker_blocks, r.honest_blocks) for r in plain.records] == [
        (r.attacker_blocks, r.honest_blocks) for r in backed.records
    ]


def test_trials_are_reproducible_and_order_free():
    spec = AttackSpec(attacker_share=0.3, confirmations=2, trials=300, seed=5)
    a, b = run_attack(spec), run_attack(spec)
    assert a.records == b.records
    serial = run_grid(spec, [(0.3, 2), (0.2, 1)], jobs=1)
    parallel = run_grid(spec, [(0.3, 2), (0.2, 1)], jobs=2)
    assert [o.records for o in serial] == [o.records for o in parallel]
    assert serial[0].records == a.records


def test_success_decays_geometrically_in_z():
    rates = []
    for z in (1, 2, 3, 4, 5):
        rates.append(run_double_spend(AttackSpec(attacker_share=0.25, confirmations=z, trials=20_000, seed=11)).success_rate)
    logs = [math.log(r) for r in rates]
    steps = [b - a for a, b in zip(logs, logs[1:])]
    assert all(s < 0 for s in steps)
    # roughly linear: every step within a factor two of the mean step
    mean = sum(steps) / len(steps)
    assert all(2 * mean <= s <= 0.5 * mean for s in steps)


# -- majority overtake ----------------------------------------------------


def test_slight_majority_overtakes_within_long_horizon():
    out = run_majority_overtake(AttackSpec(kind=MAJORITY_OVERTAKE, attacker_share=0.55, confirmations=6,
                                           horizon=500, trials=2000, seed=4))
    assert out.success_rate >= 0.95
    assert all(t > 0 for t in out.overtake_times())


def test_minority_from_level_start_leads_with_q_over_p():
    q, n = 0.45, 100_000
    out = run_majority_overtake(AttackSpec(kind=MAJORITY_OVERTAKE, attacker_share=q, confirmations=0,
                                           horizon=50, trials=n, seed=8))
    expected = gamblers_ruin_lead(q, 0, 50)
    assert expected == pytest.approx(q / (1 - q), rel=1e-3)
    assert within(out.success_rate, expected, n)
    walk = race_walk(q, 0, 50, n, seed=8, mode="overtake").mean()
    assert within(walk, expected, n)


def test_premine_at_horizon_wins_immediately():
    out = run_majority_overtake(AttackSpec(kind=MAJORITY_OVERTAKE, attacker_share=0.3, confirmations=0,
                                           premine_lead=50, horizon=50, trials=50))
    assert out.success_rate == 1.0
    assert all(r.duration == 0.0 for r in out.records)


# -- green addresses ------------------------------------------------------


def test_accept_payment_rules():
    sender = generate_keypair(1).address
    other = generate_keypair(2).address
    green = GreenAddressPolicy({sender})
    plain = GreenAddressPolicy()
    assert accept_payment(green, None, [sender], 0, 6) == ACCEPT
    assert accept_payment(green, None, [sender, other], 0, 6) == WAIT
    assert accept_payment(plain, None, [other], 6, 6) == ACCEPT
    assert accept_payment(plain, None, [other], 5, 6) == WAIT


@pytest.mark.parametrize("seed", range(3))
def test_green_address_trust_assumption(seed):
    honest = zero_conf_scenario(policy_whitelisted=True, sender_honest=True, seed=seed)
    assert honest.decision == ACCEPT and not honest.merchant_lost and honest.payment_confirmations >= 1
    cheat = zero_conf_scenario(policy_whitelisted=True, sender_honest=False, seed=seed)
    assert cheat.decision == ACCEPT and cheat.merchant_lost and cheat.conflict_confirmations >= 1
    careful = zero_conf_scenario(policy_whitelisted=False, sender_honest=False, seed=seed)
    assert not careful.merchant_lost
