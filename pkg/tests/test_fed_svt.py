import math

import numpy as np
import pytest

from fedexperts.adversaries import gen_oblivious_realizable, gen_stochastic_linear
from fedexperts.core import InputError, ParameterError, ProtocolError, RandomSource, ShapeError
from fedexperts.fed_svt import (
    SvtConfig,
    SvtServerState,
    client_phase_report,
    derive_svt_params,
    expected_comm,
    run_fed_svt,
    server_phase_step,
    switching_budget,
)


def zero_noise_config(**kw):
    base = dict(m=1, d=3, T=10, N=1, epsilon=1.0, noiseless=True, kappa=5, eta_svt=1.0, L=1.0)
    base.update(kw)
    return SvtConfig(**base)


class TestDeriveSvtParams:
    def test_kappa(self):
        assert switching_budget(100, 0.05) == 93

    def test_eta_pure(self):
        params = derive_svt_params(100, 0.05, 10.0, 0.0, 512, 1, 0.0, 10)
        assert params.kappa == 93
        assert params.eta_svt == pytest.approx(10 / 186)
        assert params.eta_svt == pytest.approx(0.0538, abs=1e-4)

    def test_threshold(self):
        params = derive_svt_params(100, 0.05, 10.0, 0.0, 512, 1, 0.0, 10)
        hand = 8 * math.log(2 * 512 ** 2 / 0.05) / 10 + 4 / (10 / 186)
        assert params.L == pytest.approx(hand)
        assert params.L == pytest.approx(87.3, abs=0.1)

    def test_eta_approx(self):
        params = derive_svt_params(100, 0.05, 10.0, 1e-5, 512, 1, 0.0, 10)
        assert params.eta_svt == pytest.approx(10 / math.sqrt(93 * math.log(1e5)))

    def test_threshold_grows_with_L_star(self):
        a = derive_svt_params(10, 0.1, 1.0, 0.0, 100, 5, 0.0, 4)
        b = derive_svt_params(10, 0.1, 1.0, 0.0, 100, 5, 2.0, 4)
        assert b.L - a.L == pytest.approx(8.0)

    @pytest.mark.parametrize("rho", [0.0, 0.5, 0.7, -0.1])
    def test_rho_range(self, rho):
        with pytest.raises(ParameterError):
            derive_svt_params(10, rho, 1.0, 0.0, 100, 1, 0.0, 1)


class TestClientPhaseReport:
    def test_sum(self):
        np.testing.assert_allclose(client_phase_report([[0.1, 0.9], [0.2, 0.3]]), [0.3, 1.2])

    def test_zero(self):
        np.testing.assert_array_equal(client_phase_report(np.zeros((4, 3))), np.zeros(3))

    def test_single_round(self):
        np.testing.assert_array_equal(client_phase_report([[0.4, 0.6]]), [0.4, 0.6])

    def test_wrong_length(self):
        with pytest.raises(ProtocolError):
            client_phase_report(np.zeros((3, 2)), expected_length=4)

    def test_not_a_block(self):
        with pytest.raises(ShapeError):
            client_phase_report([0.1, 0.2])


class TestServerPhaseStep:
    def test_below_keeps_expert(self):
        cfg = zero_noise_config(L=10.0)
        state = SvtServerState(cfg, 2)
        assert server_phase_step(state, [[1.0, 2.0, 3.0]], cfg, 1) == 2
        assert state.k == 0 and state.since_switch == 2.0

    def test_above_switches_to_zero_loss_expert(self):
        # huge eta makes the sampler pick the lowest score almost surely
        cfg = zero_noise_config(L=1.0, eta_svt=200.0)
        state = SvtServerState(cfg, 2)
        new = server_phase_step(state, [[3.0, 5.0, 0.0]], cfg, 1, None, np.random.default_rng(0))
        assert new == 3 and state.k == 1 and state.tau == 1
        assert state.since_switch == 0.0 and not state.threshold.halted

    def test_optimum_has_top_weight(self):
        from fedexperts.dp_mechanisms import exponential_probabilities
        tallies = np.array([4.0, 0.0, 2.5])
        scores = np.maximum(tallies, 1 * 0.0)
        probs = exponential_probabilities(scores, 0.5)
        assert scores[1] == 0.0 and np.argmax(probs) == 1

    def test_budget_freezes_expert(self):
        cfg = zero_noise_config(L=0.0, kappa=2, eta_svt=0.01)
        state = SvtServerState(cfg, 1)
        rng = np.random.default_rng(0)
        for t in range(1, 50):
            server_phase_step(state, [[1.0, 1.0, 1.0]], cfg, t, None, rng)
        assert state.k == 2
        frozen = state.expert
        for t in range(50, 80):
            assert server_phase_step(state, [[9.0, 9.0, 9.0]], cfg, t, None, rng) == frozen

    def test_out_of_order(self):
        cfg = zero_noise_config()
        state = SvtServerState(cfg, 1)
        with pytest.raises(ProtocolError):
            server_phase_step(state, [[0.0, 0.0, 0.0]], cfg, 1, phase=2)

    def test_wrong_report_shape(self):
        cfg = zero_noise_config(m=2)
        with pytest.raises(ProtocolError):
            server_phase_step(SvtServerState(cfg, 1), [[0.0, 0.0, 0.0]], cfg, 1)

    def test_tallies_and_since_switch_oracle(self):
        rng = np.random.default_rng(4)
        cfg = zero_noise_config(m=3, d=4, L=2.0, kappa=100, eta_svt=1.0)
        state = SvtServerState(cfg, 1)
        total = np.zeros(4)
        played = 0.0
        for t in range(1, 60):
            reports = rng.random((3, 4))
            before = state.expert
            k_before = state.k
            server_phase_step(state, reports, cfg, t, None, rng)
            total += reports.sum(axis=0)
            played += reports[:, before - 1].sum()
            if state.k > k_before:
                played = 0.0
            np.testing.assert_allclose(state.tallies, total)
            assert state.since_switch == pytest.approx(played)


class TestRunFedSvt:
    def run(self, m=3, d=6, T=40, N=1, seed=0, **kw):
        rng = RandomSource(seed)
        stream = gen_oblivious_realizable(m, T, d, rng)
        return run_fed_svt(SvtConfig(m=m, d=d, T=T, N=N, **kw), stream, rng, seed), stream

    @pytest.mark.parametrize("T,N", [(40, 1), (40, 7), (41, 10), (5, 50)])
    def test_comm(self, T, N):
        tr, _ = self.run(T=T, N=N)
        assert tr.comm.total_by("up") == 3 * 6 * math.ceil(T / N)
        assert tr.comm.total_by("down") == 3 * math.ceil(T / N)
        assert tr.comm.total == expected_comm(3, 6, T, N)

    def test_realizable_trace(self):
        # zero noise, threshold crossed once, then the optimum drawn with a sharp sampler
        switched = 0
        for seed in range(8):
            tr, stream = self.run(m=2, d=5, T=60, seed=seed, noiseless=True, L=3.0,
                                  eta_svt=500.0, kappa=10)
            best = stream.meta["best_expert"]
            assert len(tr.switches) <= 1
            if tr.switches:
                switched += 1
                t_switch, expert = tr.switches[0]
                assert expert == best
                assert not tr.incurred[:, t_switch:].any()
            else:
                assert tr.info["initial_expert"] == best
        assert switched > 0

    def test_realizable_regret_is_mean_incurred(self):
        tr, _ = self.run(m=2, d=5, T=60)
        assert tr.final_regret == pytest.approx(tr.incurred.sum() / 2)

    def test_actions_constant_within_phase(self):
        tr, _ = self.run(T=45, N=10)
        for start in range(0, 45, 10):
            assert len(set(tr.actions[start:start + 10])) == 1

    def test_switch_count_bounded(self):
        rng = RandomSource(1)
        losses = rng.stream("x").random((2, 300, 8))
        tr = run_fed_svt(SvtConfig(m=2, d=8, T=300, kappa=4, L=0.5), losses, rng)
        assert len(tr.switches) <= 4

    def test_determinism(self):
        a, _ = self.run(seed=5)
        b, _ = self.run(seed=5)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.regret, b.regret)
        assert a.switches == b.switches

    def test_accepts_plain_tensor(self):
        losses = np.zeros((1, 5, 3))
        tr = run_fed_svt(SvtConfig(m=1, d=3, T=5), losses, RandomSource(0))
        assert tr.final_regret == 0.0

    def test_rejects_stochastic_stream(self):
        rng = RandomSource(0)
        with pytest.raises(InputError):
            run_fed_svt(SvtConfig(m=1, d=3, T=5), gen_stochastic_linear(1, 5, 3, rng), rng)

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            run_fed_svt(SvtConfig(m=2, d=3, T=5), np.zeros((1, 5, 3)), RandomSource(0))
