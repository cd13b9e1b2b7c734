import numpy as np
import pytest

import stalepipe as sp
from stalepipe.data import epoch_stream
from stalepipe.optim import lr_at, sgd_step
from stalepipe.pipeline import (
    ConfigError,
    RuntimeStraggler,
    TrainEngine,
    bp_gradient,
    grad_deviation,
    stale_gradient,
    staleness_of,
    validate_config,
)
from stalepipe.rng import SeededRng


def toy_dataset(seed=3, n=400, d=12, c=4):
    return sp.gen_teacher_dataset(sp.TeacherSpec(dims=(d, 8, c), n=n, seed=seed))


def toy_layers():
    return [sp.dense(12, 16), sp.relu(), sp.dense(16, 12), sp.relu(), sp.dense(12, 4)]


def toy_model(seed=11, boundaries=(2, 4)):
    m = sp.build_model(toy_layers(), list(boundaries))
    sp.init_params(m, seed)
    return m


class TestValidateConfig:
    @pytest.mark.parametrize(
        "p,m,q",
        [
            ((1, 1, 0), (4, 2, 0), (0, 1, 1)),
            ((2, 2, 0), (6, 3, 0), (0, 1, 1)),
            ((3, 3, 0), (10, 5, 0), (0, 2, 2)),
        ],
    )
    def test_reference_configs_accepted(self, p, m, q):
        cfg = validate_config(p, m)
        assert cfg.q == q

    def test_rejects_negative_q(self):
        with pytest.raises(ConfigError) as err:
            validate_config((1, 1, 0), (2, 2, 0))
        assert err.value.constraint == "q_positive"
        assert err.value.index == 1
        assert "2-1-2 = -1" in str(err.value)

    def test_rejects_nonzero_p_last(self):
        with pytest.raises(ConfigError) as err:
            validate_config((1, 1, 1), (4, 2, 0))
        assert err.value.constraint == "p_last_zero"

    def test_rejects_nonpositive_p(self):
        with pytest.raises(ConfigError) as err:
            validate_config((0, 1, 0), (4, 2, 0))
        assert err.value.constraint == "p_positive" and err.value.index == 0

    def test_rejects_nonpositive_m(self):
        with pytest.raises(ConfigError) as err:
            validate_config((1, 1, 0), (4, 0, 0), warmup="discard_warmup_updates")
        assert err.value.constraint == "m_positive" and err.value.index == 1

    def test_k1_degenerate_allowed(self):
        cfg = validate_config((0,), (0,))
        assert cfg.k == 1 and cfg.q == (0,)

    def test_staleness_profile(self):
        assert staleness_of(validate_config((1, 1, 0), (4, 2, 0))) == sp.StalenessProfile((4, 2, 0), 4)
        assert staleness_of(validate_config((2, 2, 0), (6, 3, 0))) == sp.StalenessProfile((6, 3, 0), 6)
        assert staleness_of(validate_config((0,), (0,))).max == 0


class TestStaleGradientOperator:
    def test_equal_snapshots_reduce_to_bp_bitwise(self):
        for seed in range(10):
            model = toy_model(seed)
            rng = SeededRng(100 + seed)
            x = rng.normal(4 * 12).reshape(4, 12)
            labels = (rng.uniform(4) * 4).astype(np.int64)
            snap = model.param_snapshot()
            got, loss_got = stale_gradient(model, snap, snap, x, labels)
            want, loss_want = bp_gradient(model, x, labels)
            assert loss_got == loss_want
            for g, w in zip(got, want):
                assert (g == w).all()

    def test_zero_upstream_gives_zero_grads(self):
        model = toy_model(1)
        rng = SeededRng(5)
        x = rng.normal(2 * 12).reshape(2, 12)
        labels = np.array([0, 1])

        def zero_loss(logits, _labels):
            return 0.0, np.zeros_like(logits)

        snapshots = model.param_snapshot()
        perturbed = [s + 0.1 for s in snapshots]
        grads, _ = stale_gradient(model, snapshots, perturbed, x, labels, loss_and_grad=zero_loss)
        assert all((g == 0.0).all() for g in grads)

    def test_three_block_hand_transcription(self):
        # explicit per-equation evaluation with mixed snapshots, bias-free dense blocks
        layers = [sp.dense(2, 3, bias=False), sp.dense(3, 3, bias=False), sp.tanh(),
                  sp.dense(3, 2, bias=False)]
        model = sp.build_model(layers, [1, 3])
        rng = SeededRng(21)
        w0f = rng.normal(6).reshape(2, 3)
        w1f = rng.normal(9).reshape(3, 3)
        w2f = rng.normal(6).reshape(3, 2)
        w0b = w0f + 0.2 * rng.normal(6).reshape(2, 3)
        w1b = w1f + 0.2 * rng.normal(9).reshape(3, 3)
        w2b = w2f + 0.2 * rng.normal(6).reshape(3, 2)
        x = rng.normal(4).reshape(2, 2)
        labels = np.array([0, 1])

        fwd = [w0f.reshape(-1), w1f.reshape(-1), w2f.reshape(-1)]
        bwd = [w0b.reshape(-1), w1b.reshape(-1), w2b.reshape(-1)]
        grads, _ = stale_gradient(model, fwd, bwd, x, labels)

        # forward chain under forward snapshots
        h1 = x @ w0f
        h2 = np.tanh(h1 @ w1f)
        # last block recomputed with backward snapshot; softmax written out by hand
        top = h2 @ w2b
        z = top - top.max(axis=1, keepdims=True)
        prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.zeros_like(prob)
        onehot[np.arange(2), labels] = 1.0
        g_h3 = (prob - onehot) / 2.0
        g_w2 = h2.T @ g_h3
        g_h2 = g_h3 @ w2b.T
        # middle block recomputed with backward snapshot
        z1 = h1 @ w1b
        g_z1 = g_h2 * (1.0 - np.tanh(z1) ** 2)
        g_w1 = h1.T @ g_z1
        g_h1 = g_z1 @ w1b.T
        # bottom block: raw input, backward snapshot
        g_w0 = x.T @ g_h1

        assert np.abs(grads[2] - g_w2.reshape(-1)).max() <= 1e-12
        assert np.abs(grads[1] - g_w1.reshape(-1)).max() <= 1e-12
        assert np.abs(grads[0] - g_w0.reshape(-1)).max() <= 1e-12


class TestSerialRuntime:
    def test_k1_bitwise_equals_plain_bp(self):
        ds = toy_dataset()
        sched = sp.LrSchedule(base=0.05)
        model = sp.build_model(toy_layers(), [])
        sp.init_params(model, 4)
        engine = TrainEngine(model, validate_config((0,), (0,)),
                             epoch_stream(ds, 16, 5), sched)
        engine.run(50)

        ref = sp.build_model(toy_layers(), [])
        sp.init_params(ref, 4)
        for n, (xb, yb) in enumerate(epoch_stream(ds, 16, 5)):
            if n >= 50:
                break
            grads, _ = bp_gradient(ref, xb, yb)
            ref.blocks[0].params = sgd_step(ref.blocks[0].params, grads[0], lr_at(sched, n))
        assert (model.flat_params() == ref.flat_params()).all()

    def test_warmup_consumes_zero_packets(self):
        ds = toy_dataset()
        model = sp.build_model([sp.dense(12, 8), sp.relu(), sp.dense(8, 4)], [2])
        sp.init_params(model, 2)
        cfg = validate_config((1, 0), (3, 1))
        engine = TrainEngine(model, cfg, epoch_stream(ds, 8, 5), sp.LrSchedule(0.05))
        engine.run(4)
        recs = {(r.block, r.step): r.batch_index for r in engine.log.records}
        # block 0 backprops batch n - m0 = n - 3; block 1 batch n - p0 - m1 = n - 2
        assert [recs[(0, n)] for n in range(4)] == [-3, -2, -1, 0]
        assert [recs[(1, n)] for n in range(4)] == [-2, -1, 0, 1]

    def test_discard_warmup_keeps_params_at_init(self):
        ds = toy_dataset()
        layers = [sp.dense(12, 8), sp.relu(), sp.dense(8, 4)]
        cfg = validate_config((1, 0), (3, 1), warmup="discard_warmup_updates")

        def fresh_engine():
            model = sp.build_model(layers, [2])
            sp.init_params(model, 2)
            return TrainEngine(model, cfg, epoch_stream(ds, 8, 5), sp.LrSchedule(0.05)), model

        engine, model = fresh_engine()
        init = model.param_snapshot()
        engine.run(2)  # block 0 first real batch at n=3, block 1 at n=2
        assert (model.blocks[0].params == init[0]).all()
        assert (model.blocks[1].params == init[1]).all()
        engine.run(1)
        assert (model.blocks[0].params == init[0]).all()
        assert not (model.blocks[1].params == init[1]).all()
        engine.run(1)
        assert not (model.blocks[0].params == init[0]).all()

    def test_faithful_warmup_updates_last_block_first(self):
        ds = toy_dataset()
        model = sp.build_model([sp.dense(12, 8), sp.relu(), sp.dense(8, 4)], [2])
        sp.init_params(model, 2)
        init = model.param_snapshot()
        cfg = validate_config((1, 0), (3, 1))
        engine = TrainEngine(model, cfg, epoch_stream(ds, 8, 5), sp.LrSchedule(0.05))
        engine.run(1)
        # prefilled zero gradients make block 0's warmup update a no-op,
        # while the last block trains against the zero packet's dummy labels
        assert (model.blocks[0].params == init[0]).all()
        assert not (model.blocks[1].params == init[1]).all()

    def test_checksum_stable_across_runs(self):
        def one_run():
            model = toy_model(11)
            engine = TrainEngine(model, validate_config((1, 1, 0), (4, 2, 0)),
                                 epoch_stream(toy_dataset(), 16, 5),
                                 sp.LrSchedule(0.05), rule="sum", beta=0.9)
            engine.run(200)
            return engine.log.checksum()

        assert one_run() == one_run()

    def test_realized_staleness_equals_m(self):
        model = toy_model(11)
        cfg = validate_config((1, 1, 0), (4, 2, 0))
        engine = TrainEngine(model, cfg, epoch_stream(toy_dataset(), 16, 5), sp.LrSchedule(0.05))
        engine.run(40)
        assert engine.realized_staleness() == list(cfg.m)

    def test_log_shape(self):
        model = toy_model(1)
        engine = TrainEngine(model, validate_config((1, 1, 0), (4, 2, 0)),
                             epoch_stream(toy_dataset(), 16, 5), sp.LrSchedule(0.05))
        engine.run(10)
        log = engine.log
        assert len(log.records) == 10 * 3
        last_block = [r for r in log.records if r.block == 2]
        assert all(r.loss is not None for r in last_block)
        assert all(r.loss is None for r in log.records if r.block != 2)


class TestParallelRuntime:
    def test_bitwise_equals_serial(self):
        ds = toy_dataset()
        finals = []
        for backend in ("serial", "parallel"):
            model = toy_model(11)
            engine = TrainEngine(model, validate_config((2, 2, 0), (6, 3, 0)),
                                 epoch_stream(ds, 16, 5), sp.LrSchedule(0.05),
                                 rule="sum", beta=0.9, backend=backend)
            engine.run(120)
            finals.append(model.flat_params())
        assert (finals[0] == finals[1]).all()

    def test_straggler_injection_changes_timing_only(self):
        ds = toy_dataset()
        logs = []
        for straggler in (None, RuntimeStraggler(prob=0.6, delay_s=0.0005, seed=7)):
            model = toy_model(11)
            engine = TrainEngine(model, validate_config((1, 1, 0), (4, 2, 0)),
                                 epoch_stream(ds, 16, 5), sp.LrSchedule(0.05),
                                 backend="parallel", straggler=straggler)
            engine.run(50)
            logs.append(engine.log)
        # identical trajectories modulo wall-clock timestamps
        assert logs[0].checksum() == logs[1].checksum()

    def test_queue_safety_under_scheduling_stress(self):
        ds = toy_dataset()
        reference = None
        for seed in (1, 2, 3):
            model = toy_model(11)
            engine = TrainEngine(model, validate_config((1, 1, 0), (4, 2, 0)),
                                 epoch_stream(ds, 16, 5), sp.LrSchedule(0.05),
                                 backend="parallel",
                                 straggler=RuntimeStraggler(prob=0.8, delay_s=0.0008, seed=seed),
                                 watchdog_s=60.0)
            engine.run(60)
            final = model.flat_params()
            if reference is None:
                reference = final
            assert (final == reference).all()

    def test_n_zero_immediate_shutdown(self):
        model = toy_model(3)
        before = model.flat_params().copy()
        engine = TrainEngine(model, validate_config((1, 1, 0), (4, 2, 0)),
                             epoch_stream(toy_dataset(), 16, 5), sp.LrSchedule(0.05),
                             backend="parallel")
        engine.run(0)
        assert (model.flat_params() == before).all()
        assert engine.log.records == []

    def test_worker_failure_propagates(self):
        def poisoned_stream():
            src = epoch_stream(toy_dataset(), 16, 5)
            for i, batch in enumerate(src):
                if i == 10:
                    raise RuntimeError("data source failed")
                yield batch

        model = toy_model(3)
        engine = TrainEngine(model, validate_config((1, 1, 0), (4, 2, 0)),
                             poisoned_stream(), sp.LrSchedule(0.05),
                             backend="parallel", watchdog_s=30.0)
        with pytest.raises(RuntimeError, match="block 0 failed"):
            engine.run(50)


class TestDeviation:
    def test_zero_staleness_deviation_exactly_zero(self):
        model = sp.build_model(toy_layers(), [])
        sp.init_params(model, 6)
        engine = TrainEngine(model, validate_config((0,), (0,)),
                             epoch_stream(toy_dataset(), 16, 5),
                             sp.LrSchedule(0.05), deviation_every=3)
        engine.run(30)
        rows = engine.deviation_rows()
        assert rows
        for row in rows:
            assert row.raw == [0.0]
            assert row.raw_fwd == [0.0]
            assert row.diffs == [0.0]

    def test_runtime_gradients_match_operator_bitwise(self):
        # the queued runtime must realize exactly the standalone operator:
        # capture each sampled batch's snapshots and replay them through it
        template = sp.build_model(toy_layers(), [2, 4])
        engine = TrainEngine(toy_model(11), validate_config((1, 1, 0), (4, 2, 0)),
                             epoch_stream(toy_dataset(), 16, 5),
                             sp.LrSchedule(0.05), deviation_every=5)
        captured = []
        original = engine.tracker._score

        def capture(sample):
            captured.append(sample)
            return original(sample)

        engine.tracker._score = capture
        engine.run(60)
        assert len(captured) >= 6
        for s in captured[:6]:
            fwd = [s.fwd[k] for k in range(3)]
            bwd = [s.bwd[k] for k in range(3)]
            grads, _ = stale_gradient(template, fwd, bwd, s.x, s.labels)
            for k in range(3):
                assert (grads[k] == s.grads[k]).all()

    def test_deviation_shrinks_near_convergence(self):
        # train a tiny model hard; late-run deviations collapse with the gradients
        ds = sp.gen_teacher_dataset(sp.TeacherSpec(dims=(6, 4, 3), n=64, seed=9))
        layers = [sp.dense(6, 16), sp.relu(), sp.dense(16, 8), sp.relu(), sp.dense(8, 3)]
        model = sp.build_model(layers, [2, 4])
        sp.init_params(model, 8)
        engine = TrainEngine(model, validate_config((1, 1, 0), (4, 2, 0)),
                             epoch_stream(ds, 32, 5), sp.LrSchedule(0.1),
                             rule="sum", beta=0.9, deviation_every=10)
        engine.run(800)
        rows = engine.deviation_rows()
        early = np.median([max(r.raw) for r in rows[1:8]])
        late = np.median([max(r.raw) for r in rows[-8:]])
        assert late < early / 10

    def test_grad_deviation_op_zero_for_bp_grads(self):
        model = toy_model(2)
        rng = SeededRng(15)
        x = rng.normal(4 * 12).reshape(4, 12)
        labels = (rng.uniform(4) * 4).astype(np.int64)
        grads, _ = bp_gradient(model, x, labels)
        rows = grad_deviation(model, model.param_snapshot(), x, labels, grads)
        assert all(r["raw"] == 0.0 for r in rows)
