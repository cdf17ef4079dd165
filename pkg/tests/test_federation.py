import numpy as np
import pytest

import fedcluster.federation as federation
from fedcluster.datasets import EmbeddingDataset, PartitionSpec, partition, synth_blobs
from fedcluster.exceptions import FederatedRunError, InvalidInputError
from fedcluster.federation import (
    GlobalCenters,
    RunSettings,
    aggregate_global_centers,
    average_models,
    client_update,
    compute_local_centers,
    decode_center_message,
    encode_center_message,
    init_clients,
    pseudo_label_schedule,
    server_run,
)
from fedcluster.model import init_model_params
from fedcluster.numerics import Rng


def blob_shards(m=2, n=400, k=3, d=4, seed=0, mode="iid", rho=0):
    ds = synth_blobs(k, n, d, separation=8.0, noise=1.0, rng=Rng(seed).child("blobs"))
    return partition(ds, PartitionSpec(mode=mode, m=m, rho=rho, seed=seed))


class TestComputeLocalCenters:
    def test_mean_of_assigned_rows(self):
        e = np.array([[0.0, 2.0], [2.0, 0.0]])
        q = np.array([[0.9, 0.1], [0.8, 0.2]])
        centers, counts = compute_local_centers(e, q)
        assert np.allclose(centers[0], [1.0, 1.0], atol=1e-15)
        assert counts.tolist() == [2, 0]

    def test_one_hot_rows_give_exact_blob_means(self):
        rng = np.random.default_rng(0)
        e = rng.standard_normal((30, 3))
        labels = rng.integers(0, 4, 30)
        q = np.zeros((30, 4))
        q[np.arange(30), labels] = 1.0
        centers, counts = compute_local_centers(e, q)
        for j in range(4):
            if counts[j]:
                assert np.allclose(centers[j], e[labels == j].mean(axis=0), atol=1e-14)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        e = rng.standard_normal((30, 5))
        q = rng.uniform(0, 1, (30, 4))
        centers, counts = compute_local_centers(e, q)
        for j in range(4):
            members = [e[i] for i in range(30) if int(np.argmax(q[i])) == j]
            assert counts[j] == len(members)
            if members:
                assert np.allclose(centers[j], np.mean(members, axis=0), atol=1e-12)

    def test_empty_cluster_takes_fallback(self):
        e = np.ones((3, 2))
        q = np.zeros((3, 3))
        q[:, 0] = 1.0
        fallback = np.full((3, 2), 7.0)
        centers, counts = compute_local_centers(e, q, fallback=fallback)
        assert counts.tolist() == [3, 0, 0]
        assert np.array_equal(centers[1], [7.0, 7.0])
        assert np.array_equal(centers[2], [7.0, 7.0])

    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(2)
        q = rng.uniform(0, 1, (17, 5))
        _, counts = compute_local_centers(rng.standard_normal((17, 2)), q)
        assert counts.sum() == 17


class TestAggregateGlobalCenters:
    def test_weighted_mean_example(self):
        a = (np.array([[0.0, 0.0]]), np.array([1]))
        b = (np.array([[3.0, 3.0]]), np.array([2]))
        out = aggregate_global_centers([a, b])
        assert np.allclose(out.c, [[2.0, 2.0]], atol=1e-15)

    def test_single_client_identity(self):
        c = np.random.default_rng(3).standard_normal((4, 3))
        counts = np.array([5, 0, 2, 1])
        out = aggregate_global_centers([(c, counts)], previous=GlobalCenters(np.ones((4, 3))))
        occupied = counts > 0
        assert np.array_equal(out.c[occupied], c[occupied])

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(4)
        locals_ = [
            (rng.standard_normal((3, 2)), rng.integers(0, 10, 3)) for _ in range(3)
        ]
        out = aggregate_global_centers(locals_)
        for j in range(3):
            total = sum(counts[j] for _, counts in locals_)
            if total == 0:
                continue
            expected = sum(counts[j] * c[j] for c, counts in locals_) / total
            assert np.allclose(out.c[j], expected, atol=1e-12)

    def test_cluster_empty_everywhere_keeps_previous(self):
        previous = GlobalCenters(c=np.array([[1.0, 1.0], [9.0, 9.0]]), round=3)
        locals_ = [
            (np.array([[2.0, 2.0], [0.0, 0.0]]), np.array([4, 0])),
            (np.array([[4.0, 4.0], [0.0, 0.0]]), np.array([4, 0])),
        ]
        out = aggregate_global_centers(locals_, previous=previous, round_index=4)
        assert np.allclose(out.c[0], [3.0, 3.0], atol=1e-15)
        assert np.array_equal(out.c[1], [9.0, 9.0])
        assert out.round == 4

    def test_conservation_when_all_clients_agree(self):
        rng = np.random.default_rng(5)
        c = rng.standard_normal((4, 3))
        locals_ = [(c.copy(), np.array([3, 1, 2, 5])) for _ in range(4)]
        out = aggregate_global_centers(locals_)
        assert np.allclose(out.c, c, atol=1e-12)

    def test_order_insensitive_within_tolerance(self):
        rng = np.random.default_rng(6)
        locals_ = [
            (rng.standard_normal((3, 2)), rng.integers(1, 10, 3)) for _ in range(5)
        ]
        a = aggregate_global_centers(locals_)
        b = aggregate_global_centers(list(reversed(locals_)))
        assert np.allclose(a.c, b.c, atol=1e-12)

    def test_empty_list_rejected(self):
        with pytest.raises(InvalidInputError):
            aggregate_global_centers([])


class TestAverageModels:
    def test_identical_models_fixed_point(self):
        params = init_model_params(4, 2, Rng(0))
        out = average_models([params, params.copy()], [0.3, 0.7])
        for (_, a), (_, b) in zip(out.named_params(), params.named_params()):
            assert np.allclose(a, b, atol=1e-15)

    def test_quarter_three_quarter_combination(self):
        a = init_model_params(3, 2, Rng(1))
        b = init_model_params(3, 2, Rng(2))
        b.w2 = b.w2 + 1.0
        out = average_models([a, b], [0.25, 0.75])
        ta, tb, to = dict(a.named_params()), dict(b.named_params()), dict(out.named_params())
        for name in to:
            expected = 0.25 * ta[name] + 0.75 * tb[name]
            assert np.max(np.abs(to[name] - expected)) <= 1e-15

    def test_matches_scalar_loop_oracle(self):
        models = [init_model_params(3, 2, Rng(10 + i)) for i in range(3)]
        for i, m in enumerate(models):
            m.w1 = m.w1 + i
        alphas = [0.2, 0.5, 0.3]
        out = average_models(models, alphas)
        for name, tensor in out.named_params():
            flat = tensor.reshape(-1)
            parts = [dict(m.named_params())[name].reshape(-1) for m in models]
            for idx in range(flat.size):
                expected = sum(a * p[idx] for a, p in zip(alphas, parts))
                assert abs(flat[idx] - expected) <= 1e-15

    def test_alpha_constraints_enforced(self):
        models = [init_model_params(2, 2, Rng(20)), init_model_params(2, 2, Rng(21))]
        with pytest.raises(InvalidInputError):
            average_models(models, [0.5, 0.6])
        with pytest.raises(InvalidInputError):
            average_models(models, [-0.5, 1.5])


class TestPseudoLabelSchedule:
    def test_single_update_lands_at_end(self):
        assert pseudo_label_schedule(100, 1) == [100]

    def test_paper_shape_四_updates(self):
        assert pseudo_label_schedule(100, 4) == [3, 10, 32, 100]

    def test_strictly_increasing_and_bounded(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            total = int(rng.integers(1, 500))
            updates = int(rng.integers(1, 20))
            sched = pseudo_label_schedule(total, updates)
            assert all(b > a for a, b in zip(sched, sched[1:]))
            assert sched[0] >= 1
            assert sched[-1] <= total

    def test_rejects_bad_counts(self):
        with pytest.raises(InvalidInputError):
            pseudo_label_schedule(0, 1)


class TestClientUpdate:
    def test_frozen_client_keeps_init_centers(self):
        shards = blob_shards(m=1)
        settings = RunSettings(k=3, adapter_lr=0.0, head_lr=0.0, seed=0)
        clients, global_c = init_clients(shards, settings)
        client = clients[0]
        init_centers = client.c_local.copy()
        init_counts = client.counts.copy()
        result = client_update(
            client, global_c, schedule=(), local_iters=1, tau=3, lam=0.0,
            batch_size=100,
        )
        assert np.array_equal(result.c_local, init_centers)
        assert np.array_equal(result.counts, init_counts)

    def test_identical_clients_identical_results(self):
        shards = blob_shards(m=1, n=200)
        settings = RunSettings(k=3, seed=4)
        outputs = []
        for _ in range(2):
            clients, global_c = init_clients(shards, settings)
            outputs.append(
                client_update(
                    clients[0], global_c, schedule=[2, 5], local_iters=6,
                    tau=3, lam=1.0, batch_size=50, round_index=1,
                )
            )
        assert np.array_equal(outputs[0].c_local, outputs[1].c_local)
        assert np.array_equal(outputs[0].counts, outputs[1].counts)
        assert outputs[0].mean_l_c == outputs[1].mean_l_c

    def test_blob_shard_counts_roughly_balanced(self):
        ds = synth_blobs(4, 400, 16, separation=10.0, noise=1.0, rng=Rng(11).child("blobs"))
        shards = [ds]
        settings = RunSettings(k=4, seed=11)
        clients, global_c = init_clients(shards, settings)
        result = client_update(
            clients[0], global_c, schedule=pseudo_label_schedule(100, 4),
            local_iters=100, tau=3, lam=1.0, batch_size=100, round_index=1,
        )
        expected = 400 / 4
        assert result.counts.min() >= expected * 0.8
        assert result.counts.max() <= expected * 1.2


class TestServerRun:
    def test_single_client_global_model_is_client_model(self):
        shards = blob_shards(m=1, n=150)
        settings = RunSettings(
            k=3, rounds=1, local_iters=5, batch_size=50, seed=1
        )
        clients, global_c = init_clients(shards, settings)
        outcome = server_run(shards, settings)
        # rerun the same single client by hand and compare parameters
        manual_clients, manual_global = init_clients(shards, settings)
        client_update(
            manual_clients[0], manual_global,
            federation.pseudo_label_schedule(5, federation._auto_updates(settings, 150)),
            settings.local_iters, settings.tau, settings.lam,
            batch_size=settings.batch_size, round_index=1,
        )
        for (_, a), (_, b) in zip(
            outcome.global_model.named_params(), manual_clients[0].model.named_params()
        ):
            assert np.array_equal(a, b)

    def test_identical_shards_agree_with_global_centers(self):
        base = blob_shards(m=1, n=120, seed=6)[0]
        shards = [base, EmbeddingDataset(x=base.x.copy(), labels=base.labels.copy())]
        settings = RunSettings(k=3, rounds=1, local_iters=4, batch_size=40, seed=6)
        clients, global_c = init_clients(shards, settings)
        # force identical client streams: same data + same rng seed
        clients[1].rng = Rng(clients[0].rng.seed)
        schedule = [2, 4]
        results = [
            client_update(c, global_c, schedule, 4, 3, 1.0, batch_size=40, round_index=1)
            for c in clients
        ]
        agg = aggregate_global_centers(
            [(r.c_local, r.counts) for r in results], previous=global_c, round_index=1
        )
        for r in results:
            occupied = r.counts > 0
            assert np.allclose(agg.c[occupied], r.c_local[occupied], atol=1e-12)

    def test_thread_count_invariance_bitwise(self):
        shards = blob_shards(m=3, n=240, seed=7)
        base = dict(k=3, rounds=2, local_iters=5, batch_size=40, seed=7)
        seq = server_run(shards, RunSettings(**base, workers=1))
        par = server_run(shards, RunSettings(**base, workers=3))
        for (_, a), (_, b) in zip(
            seq.global_model.named_params(), par.global_model.named_params()
        ):
            assert np.array_equal(a, b)
        assert seq.acc == par.acc
        for ra, rb in zip(seq.reports, par.reports):
            assert ra.to_json() == rb.to_json()

    def test_round_reports_structure(self):
        shards = blob_shards(m=2, n=160, seed=8)
        outcome = server_run(
            shards, RunSettings(k=3, rounds=3, local_iters=4, batch_size=40, seed=8)
        )
        assert len(outcome.reports) == 3
        for i, report in enumerate(outcome.reports, start=1):
            assert report.round == i
            assert len(report.l_c) == 2
            assert len(report.kept_fraction) == 2
            assert all(0.0 <= f <= 1.0 for f in report.kept_fraction)
            assert report.acc is not None
            payload = report.to_json()
            assert '"round"' in payload and '"kept_fraction"' in payload

    def test_alpha_weights_are_shard_proportions(self):
        shards = blob_shards(m=2, n=300, seed=9, mode="skew", rho=2)
        sizes = np.array([s.n for s in shards], dtype=float)
        assert sizes.tolist() == [210.0, 90.0]
        settings = RunSettings(k=3, rounds=1, local_iters=3, batch_size=64, seed=9)
        outcome = server_run(shards, settings)
        clients, gc = init_clients(shards, settings)
        for c in clients:
            client_update(
                c, gc,
                federation.pseudo_label_schedule(
                    3, federation._auto_updates(settings, c.shard.n)
                ),
                3, settings.tau, settings.lam,
                batch_size=64, round_index=1,
            )
        expected = average_models([c.model for c in clients], sizes / sizes.sum())
        for (_, a), (_, b) in zip(
            outcome.global_model.named_params(), expected.named_params()
        ):
            assert np.array_equal(a, b)

    def test_client_failure_preserves_partial_reports(self, monkeypatch):
        shards = blob_shards(m=2, n=160, seed=10)
        settings = RunSettings(k=3, rounds=3, local_iters=3, batch_size=40, seed=10)
        calls = {"count": 0}
        real_fit = federation.gum.fit

        def failing_fit(*args, **kwargs):
            calls["count"] += 1
            if calls["count"] > 8:  # let round 1 finish, then blow up
                raise RuntimeError("injected failure")
            return real_fit(*args, **kwargs)

        monkeypatch.setattr(federation.gum, "fit", failing_fit)
        with pytest.raises(FederatedRunError) as err:
            server_run(shards, settings)
        assert len(err.value.reports) == 1

    def test_requires_at_least_one_round(self):
        with pytest.raises(InvalidInputError):
            server_run(blob_shards(m=1), RunSettings(k=3, rounds=0))


class TestCenterMessages:
    def test_round_trip(self):
        rng = np.random.default_rng(11)
        centers = rng.standard_normal((3, 4))
        counts = np.array([5, 0, 9])
        payload = encode_center_message(7, 12, centers, counts)
        cid, rnd, c_out, n_out = decode_center_message(payload, 3, 4)
        assert (cid, rnd) == (7, 12)
        assert np.array_equal(c_out, centers)
        assert np.array_equal(n_out, counts)

    def test_wrong_size_rejected(self):
        with pytest.raises(InvalidInputError):
            decode_center_message(b"\x00" * 10, 3, 4)
