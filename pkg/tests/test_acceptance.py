"""End-to-end acceptance checks, one test per criterion.

The outcome of each criterion is printed in the "acceptance criteria"
section of the pytest terminal summary.
"""

import itertools
import json

import numpy as np
import pytest

from tandem_rl import cli
from tandem_rl.data import WorldConfig, build_trials, generate_world
from tandem_rl.experiment import BASELINE_METHODS, REWARD_METHODS, load_config
from tandem_rl.metrics import CostModel, DegenerateTrialsError, TrialClass, min_norm_tdcf
from tandem_rl.policy import (LayerSpec, PolicyNet, backward, forward, grad_bce,
                              grad_log_bernoulli, init_network)
from tandem_rl.rewards import GroundTruth, RewardKind, RewardModel, reward, reward_table
from tandem_rl.tandem import TandemSystem, evaluate, reinforce_logit_grads

from conftest import criterion
from oracles import extended_log_prob, finite_difference, min_norm_tdcf_sweep, random_trial_set

SPEC = LayerSpec(input_dim=6, hidden_dims=(8, 5), head_dims=(6, 1))


def perturbed_net(spec, seed, rng, scale=0.3):
    net = init_network(spec, seed)
    return PolicyNet(spec, [p + rng.normal(0, scale, p.shape) for p in net.params])


def flat(grads):
    return np.concatenate([g.ravel() for g in grads])


def test_unbiased_gradient():
    with criterion(1, "REINFORCE update is unbiased (20 enumerated instances)") as detail:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for case in range(20):
            asv = perturbed_net(SPEC, 10 + case, rng)
            cm = perturbed_net(SPEC, 50 + case, rng)
            x = rng.normal(size=(4, 6))
            truth = GroundTruth.from_class(TrialClass(case % 3))
            model = RewardModel(list(RewardKind)[case % 4])
            _, ca = forward(asv, x[0], x[1])
            _, cc = forward(cm, x[2], x[3])
            pa, pc = ca.prob[0], cc.prob[0]
            got_a = np.zeros(asv.num_parameters())
            got_c = np.zeros(cm.num_parameters())
            for a_asv, a_cm in itertools.product((0, 1), repeat=2):
                weight = (pa if a_asv else 1 - pa) * (pc if a_cm else 1 - pc)
                a_t = a_asv & a_cm
                da, dc = reinforce_logit_grads(ca.logit, cc.logit, [a_t],
                                               [reward(model, a_t, truth)], 1)
                got_a += weight * flat(backward(asv, ca, da))
                got_c += weight * flat(backward(cm, cc, dc))
            # E[r] = pa pc r(accept) + (1 - pa pc) r(reject)
            dr = reward(model, 1, truth) - reward(model, 0, truth)
            want_a = flat(backward(asv, ca, [dr * pc * pa * (1 - pa)]))
            want_c = flat(backward(cm, cc, [dr * pa * pc * (1 - pc)]))
            for got, want in ((got_a, want_a), (got_c, want_c)):
                if np.linalg.norm(want) == 0:
                    assert np.linalg.norm(got) == 0
                    continue
                rel = np.linalg.norm(got - want) / np.linalg.norm(want)
                worst = max(worst, rel)
                assert rel < 1e-6
        detail.append(f"max relative error {worst:.1e}")


def test_gradients_match_finite_differences():
    with criterion(2, "analytic gradients match central differences (50 cases each)") as detail:
        rng = np.random.default_rng(7)
        worst = 0.0
        for case in range(50):
            for kind in ("log_bernoulli", "bce"):
                net = perturbed_net(SPEC, 1000 + case, rng)
                a, b = rng.normal(size=(2, 6))
                label = int(rng.integers(0, 2))
                _, cache = forward(net, a, b)
                if kind == "log_bernoulli":
                    analytic = grad_log_bernoulli(net, cache, label)
                    numeric = finite_difference(net, a, b, lambda z: extended_log_prob(z, label))
                else:
                    analytic = grad_bce(net, cache, label)
                    numeric = finite_difference(net, a, b, lambda z: -extended_log_prob(z, label))
                ga, gn = flat(analytic), flat(numeric)
                mask = np.abs(ga) > 1e-8
                rel = np.abs(ga[mask] - gn[mask]) / np.abs(ga[mask])
                worst = max(worst, float(rel.max(initial=0.0)))
        detail.append(f"max relative error {worst:.1e}")
        assert worst < 1e-5


def test_min_tdcf_matches_brute_force():
    with criterion(3, "min normalized t-DCF equals exhaustive sweep (1000 sets)") as detail:
        rng = np.random.default_rng(3)
        cost = CostModel()
        checked = degenerate = 0
        for i in range(1000):
            asv, cm, classes = random_trial_set(rng, 200, ties=i % 2 == 1)
            ref = min_norm_tdcf_sweep(asv, cm, classes, cost)
            if np.isnan(ref[0]):
                with pytest.raises(DegenerateTrialsError):
                    min_norm_tdcf(asv, cm, classes, cost)
                degenerate += 1
                continue
            got = min_norm_tdcf(asv, cm, classes, cost)
            assert abs(got.value - ref[0]) <= 1e-12
            assert got.cm_threshold == ref[1]
            assert got.asv_threshold == ref[2]
            checked += 1
        detail.append(f"{checked} sets agree, {degenerate} degenerate sets rejected, "
                      "half with tied scores")
        assert checked >= 900


def test_reward_table():
    with criterion(4, "reward matrix reproduces the 12 cost-table cells"):
        c = CostModel()
        model = RewardModel(RewardKind.TDCF, c)
        expected = {TrialClass.TARGET: (0.0, -c.c_miss * c.rho_tar),
                    TrialClass.NONTARGET: (-c.c_fa * c.rho_non, 0.0),
                    TrialClass.SPOOF: (-c.c_fa_spoof * c.rho_spoof, 0.0)}
        cells = 0
        # three decision rows per class: both accept, ASV rejects, CM rejects
        for cls, (a_asv, a_cm) in itertools.product(TrialClass, [(1, 1), (0, 1), (1, 0)]):
            accept_value, reject_value = expected[cls]
            want = accept_value if a_asv and a_cm else reject_value
            assert reward(model, a_asv & a_cm, GroundTruth.from_class(cls)) == want
            cells += 1
        # the fourth decision pair (both reject) shares the reject column
        for cls in TrialClass:
            assert reward(model, 0, GroundTruth.from_class(cls)) == expected[cls][1]
            cells += 1
        assert cells == 12
        assert reward(model, 1, GroundTruth(1, 0)) == pytest.approx(-0.5, abs=1e-15)
        assert reward(model, 0, GroundTruth(1, 1)) == pytest.approx(-0.9405, abs=1e-15)
        assert np.all(reward_table(model) <= 0)


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    """Two independent runs of the shipped default configuration."""
    dirs = [tmp_path_factory.mktemp(f"run{i}") for i in range(2)]
    codes = [cli.main(["run", "--output-dir", str(d)]) for d in dirs]
    return codes, dirs


def test_reinforce_reduces_tdcf(default_runs):
    codes, dirs = default_runs
    title = "REINFORCE lowers eval t-DCF in every run, mean reduction >= 10%"
    with criterion(5, title) as detail:
        assert codes[0] == 0
        summary = json.loads((dirs[0] / "summary.json").read_text())
        for seed, ev in summary["pretrained"].items():
            asv_eer, cm_eer = ev["eval"]["asv_eer"], ev["eval"]["cm_eer"]
            detail.append(f"seed {seed} pretrained EER asv {100 * asv_eer:.1f}% "
                          f"cm {100 * cm_eer:.1f}%")
            assert 0.05 <= asv_eer <= 0.15 and 0.05 <= cm_eer <= 0.15
        for method in REWARD_METHODS:
            entry = summary["methods"][method]
            assert entry["completed"] == 3
            rel = entry["eval_rel_pct"]
            detail.append(f"{method} {rel['mean']:+.1f}%")
            assert all(v < 0 for v in rel["values"])
            assert rel["mean"] <= -10.0


def test_baselines_can_degrade(default_runs):
    codes, dirs = default_runs
    with criterion(6, "a cross-entropy baseline raises eval t-DCF in some repetition") as detail:
        summary = json.loads((dirs[0] / "summary.json").read_text())
        worse = []
        for method in BASELINE_METHODS:
            entry = summary["methods"][method]
            for seed, v in zip(entry["seeds"], entry["eval_rel_pct"]["values"]):
                if v > 0:
                    worse.append(f"{method} seed {seed} {v:+.1f}%")
        if worse:
            detail.extend(worse)
        else:
            seeds = summary["methods"][BASELINE_METHODS[0]]["seeds"]
            detail.append(f"documented deviation: all baseline runs improved (seeds {seeds})")


def test_run_is_deterministic(default_runs):
    codes, dirs = default_runs
    with criterion(7, "rerunning the default config gives identical summaries") as detail:
        assert codes == [0, 0]
        texts = []
        for d in dirs:
            data = json.loads((d / "summary.json").read_text())
            data.pop("metadata")
            texts.append(json.dumps(data, sort_keys=True))
        assert texts[0] == texts[1]
        detail.append("summary.json equal apart from metadata")


def test_evaluation_uses_no_randomness(monkeypatch):
    with criterion(8, "evaluation consumes no random draws"):
        world = generate_world(WorldConfig(train_speakers=20, dev_speakers=10, eval_speakers=10))
        trials = build_trials(world, (30, 30, 60), "eval", 0)
        spec = LayerSpec()
        system = TandemSystem(init_network(spec, 0), init_network(spec, 1))
        rng = np.random.default_rng(123)
        before = (rng.bit_generator.state, np.random.get_state())
        created = []
        real = np.random.default_rng
        monkeypatch.setattr(np.random, "default_rng",
                            lambda *a, **k: created.append(a) or real(*a, **k))
        first = evaluate(system, trials, CostModel())
        second = evaluate(system, trials, CostModel())
        after = (rng.bit_generator.state, np.random.get_state())
        assert not created
        assert before[0] == after[0]
        assert before[1][0] == after[1][0] and np.array_equal(before[1][1], after[1][1])
        assert first == second


def test_shipped_config_is_default_protocol():
    config = load_config()
    assert config.repetitions == 3
    assert set(REWARD_METHODS) | set(BASELINE_METHODS) == set(config.methods)
