import math

import numpy as np
import pytest

from gram import model as M
from gram.ehr import PatientRecord, split_dataset
from gram.ontology import OntologyDag, ancestor_map, ancestors
from gram.synth import SynthConfig, generate
from gram.training import (
    MODEL_KINDS,
    TrainConfig,
    TrainingDiverged,
    build_model,
    code_frequencies,
    count_parameters,
    make_random_dag,
    matched_embedding_dim,
    num_outputs_for,
    read_config,
    rollup_rare,
    rollup_simple,
    train,
)


@pytest.fixture(scope="module")
def tiny():
    ds = generate(SynthConfig(num_leaves=60, branching=(3, 4, 5), num_patients=80, seed=1))
    return ds, split_dataset(ds.records, (0.75, 0.10, 0.15), 0)


def small_config(**kw):
    base = dict(m=6, r=5, l=4, max_epochs=2, batch_size=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def vocabulary(records):
    return set().union(*(v for r in records for v in r.visits))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.patience, c.rho, c.epsilon) == (100, 5, 0.95, 1e-6)

    @pytest.mark.parametrize(
        "kw",
        [dict(m=0), dict(batch_size=0), dict(dropout_rate=1.0), dict(model_kind="lstm"),
         dict(init_mode="word2vec"), dict(task="regression"), dict(model_kind="rnn", init_mode="glove_augmented")],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_from_mapping_casts(self):
        c = TrainConfig.from_mapping({"m": "8", "l2_coeff": "1e-3", "model_kind": "rnn", "seed": 4})
        assert c.m == 8 and c.l2_coeff == 0.001 and c.model_kind == "rnn" and c.seed == 4

    def test_from_mapping_unknown(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_mapping({"learning_rate": "1"})

    def test_read_config(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# comment\nm = 10\n\nmodel_kind = rnn  # inline\n", encoding="utf-8")
        assert read_config(tmp_path / "c.cfg") == {"m": "10", "model_kind": "rnn"}
        (tmp_path / "bad.cfg").write_text("m 10\n", encoding="utf-8")
        with pytest.raises(ValueError, match="bad.cfg:1"):
            read_config(tmp_path / "bad.cfg")


class TestRandomDag:
    def test_six_per_leaf(self, tiny):
        ds, _ = tiny
        rdag = make_random_dag(ds.dag, seed=3)
        assert all(len(a) == 6 for a in ancestor_map(rdag))

    def test_seeded(self, tiny):
        ds, _ = tiny
        assert make_random_dag(ds.dag, 5).parents == make_random_dag(ds.dag, 5).parents
        assert make_random_dag(ds.dag, 5).parents != make_random_dag(ds.dag, 6).parents

    def test_subset_of_internals(self, tiny):
        ds, _ = tiny
        rdag = make_random_dag(ds.dag, 0)
        internal = set(range(ds.dag.num_leaves, ds.dag.num_nodes))
        for leaf in range(rdag.num_leaves):
            assert set(ancestors(rdag, leaf)[1:]) <= internal
            assert rdag.root in ancestors(rdag, leaf)

    def test_too_few_internals(self, fig1):
        small = OntologyDag.from_edges([("x", "p"), ("p", "q"), ("q", "r")])
        with pytest.raises(ValueError, match="internal"):
            make_random_dag(small)
        assert all(len(a) == 6 for a in ancestor_map(make_random_dag(fig1)))


class TestRollup:
    def test_siblings_merge(self, fig1):
        rec = PatientRecord("p", (frozenset({fig1.index("d"), fig1.index("e")}),))
        assert rollup_simple([rec], fig1)[0].visits == (frozenset({fig1.index("b")}),)

    def test_vocabulary_is_parent_set(self, tiny):
        ds, split = tiny
        rolled = rollup_simple(split.train, ds.dag)
        parents = {min(ds.dag.parents[c]) for c in vocabulary(split.train)}
        assert vocabulary(rolled) == parents
        assert len(vocabulary(rolled)) <= len(vocabulary(split.train))

    def test_twice_climbs(self, fig1):
        rec = PatientRecord("p", (frozenset({fig1.index("d")}),))
        twice = rollup_simple(rollup_simple([rec], fig1), fig1)
        assert twice[0].visits == (frozenset({fig1.index("a")}),)

    def test_threshold_zero_identity(self, tiny):
        _, split = tiny
        assert rollup_rare(split.train, tiny[0].dag, 0) == split.train

    def test_threshold_inf_is_simple(self, tiny):
        ds, split = tiny
        assert rollup_rare(split.train, ds.dag, math.inf) == rollup_simple(split.train, ds.dag)

    def test_mixed_toy(self, fig1):
        d, e, h, i = (fig1.index(n) for n in "dehi")
        recs = [
            PatientRecord("p0", (frozenset({d}), frozenset({d, h}))),
            PatientRecord("p1", (frozenset({d, e}), frozenset({i}))),
            PatientRecord("p2", (frozenset({d}), frozenset({h}))),
        ]
        # visit counts: d 4, h 2, e 1, i 1
        freq = {}
        for r in recs:
            for v in r.visits:
                for c in v:
                    freq[c] = freq.get(c, 0) + 1
        assert code_frequencies(recs, fig1.num_nodes)[[d, h, e, i]].tolist() == [freq[d], freq[h], freq[e], freq[i]]
        out = rollup_rare(recs, fig1, threshold=2)
        b, g = fig1.index("b"), fig1.index("g")
        assert out[1].visits == (frozenset({d, b}), frozenset({g}))
        assert vocabulary(out) == {d, h, b, g}

    def test_negative_threshold(self, fig1):
        with pytest.raises(ValueError):
            rollup_rare([], fig1, -1)


class TestParameterBudget:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_count_matches_built_model(self, tiny, kind):
        ds, split = tiny
        config = small_config(model_kind=kind)
        state, spec = build_model(config, ds.dag, ds.group_map, split.train)
        expected = count_parameters(kind, num_nodes=spec.num_nodes, num_inputs=spec.num_inputs,
                                    num_outputs=num_outputs_for(config, ds.group_map), m=6, r=5, l=4)
        assert state.num_parameters() == expected

    def test_matched_dim_is_closest(self):
        target = count_parameters("gram", num_nodes=446, num_inputs=400, num_outputs=40, m=32, r=32, l=32)
        k = matched_embedding_dim(target, num_inputs=400, num_outputs=40, r=32)
        gap = lambda m: abs(count_parameters("rnn", num_nodes=400, num_inputs=400, num_outputs=40, m=m, r=32) - target)
        assert gap(k) <= min(gap(k - 1), gap(k + 1))


class TestTrain:
    def test_one_epoch(self, tiny):
        ds, split = tiny
        _, report = train(small_config(patience=0, max_epochs=1), split, ds.dag, ds.group_map)
        assert report.epochs_run == 1 and report.best_epoch == 1

    @pytest.mark.parametrize("dropout", [0.0, 0.3])
    def test_deterministic(self, tiny, dropout):
        ds, split = tiny
        config = small_config(dropout_rate=dropout, init_mode="glove_augmented", glove_epochs=3)
        a_state, a = train(config, split, ds.dag, ds.group_map)
        b_state, b = train(config, split, ds.dag, ds.group_map)
        assert a.train_loss == b.train_loss and a.valid_loss == b.valid_loss
        for k in a_state.params:
            assert np.array_equal(a_state.params[k], b_state.params[k])

    def test_returns_best_validation_epoch(self, tiny):
        ds, split = tiny
        config = small_config(max_epochs=6, patience=10, m=4, r=4, l=3)
        state, report = train(config, split, ds.dag, ds.group_map)
        assert report.best_epoch == int(np.argmin(report.valid_loss)) + 1
        assert state.epoch == report.best_epoch
        assert report.best_epoch <= report.epochs_run

    def test_early_stop(self, tiny, monkeypatch):
        ds, split = tiny
        import gram.training as T

        calls = iter([1.0, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1])
        monkeypatch.setattr(T, "evaluate_loss", lambda *a, **k: next(calls))
        _, report = train(small_config(max_epochs=8, patience=2), split, ds.dag, ds.group_map)
        assert report.best_epoch == 2 and report.epochs_run == 5

    @pytest.mark.parametrize("kind", MODEL_KINDS)
    @pytest.mark.parametrize("task", ["sequential", "binary"])
    def test_every_kind_trains(self, tiny, kind, task):
        ds, split = tiny
        config = small_config(model_kind=kind, task=task, rollup_threshold=3,
                              init_mode="glove_leaf_only", glove_epochs=2)
        state, report = train(config, split, ds.dag, ds.group_map, ds.flags)
        assert all(np.isfinite(report.train_loss)) and all(np.isfinite(report.valid_loss))
        assert state.use_attention == (kind in ("gram", "random_dag"))

    def test_divergence_keeps_last_good(self, tiny, monkeypatch):
        ds, split = tiny
        real = M.forward
        count = {"n": 0}

        def flaky(state, batch, **kw):
            count["n"] += 1
            loss, yhat, cache = real(state, batch, **kw)
            return (float("nan") if count["n"] > 6 else loss), yhat, cache

        monkeypatch.setattr(M, "forward", flaky)
        with pytest.raises(TrainingDiverged) as err:
            train(small_config(max_epochs=5), split, ds.dag, ds.group_map)
        assert err.value.state is not None and err.value.report.epochs_run >= 1

    def test_log_format(self, tiny, tmp_path):
        ds, split = tiny
        _, report = train(small_config(), split, ds.dag, ds.group_map)
        report.write_log(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,valid_loss,seconds"
        epoch, tl, vl, _ = lines[1].split(",")
        assert int(epoch) == 1 and float(tl) == report.train_loss[0] and float(vl) == report.valid_loss[0]

    def test_attention_kind_needs_dag(self, tiny):
        ds, split = tiny
        with pytest.raises(ValueError, match="ontology"):
            train(small_config(), split, None, ds.group_map)


@pytest.mark.slow
def test_gram_plus_validation_loss_beats_rnn(directional_results):
    wins = sum(r["gram+"]["best_valid_loss"] <= r["rnn"]["best_valid_loss"] for r in directional_results)
    assert wins >= 2, directional_results
