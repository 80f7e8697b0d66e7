"""
Multi-round simulations over the tiny synthetic corpus
"""

import numpy as np
import pytest

from engine.python.config import Method
from engine.python.errors import ContractError
from engine.python.federated import POOLED_CLIENT, FederatedSimulation

COMPARED_FIELDS = ("t", "sampled", "train_loss_mean", "test_mae_mean", "test_rmse_mean", "params_transferred")


def _comparable(record):
    return tuple(getattr(record, name) for name in COMPARED_FIELDS)


class TestFedPawReduction:
    """With warm-up covering every round FedPAW is FedAvg"""

    def test_identical_to_fedavg(self, tiny_datasets, tiny_model_config, fl_config):
        fedavg = FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(Method.FEDAVG, rho=0.67), seed=11)
        fedpaw = FederatedSimulation(
            tiny_datasets, tiny_model_config, fl_config(Method.FEDPAW, rho=0.67, warmup_rounds=4), seed=11,
        )
        avg_result = fedavg.run()
        paw_result = fedpaw.run()

        assert [_comparable(r) for r in avg_result.rounds] == [_comparable(r) for r in paw_result.rounds]
        assert avg_result.final_state.global_model.bitwise_equal(paw_result.final_state.global_model)
        assert paw_result.final_state.personalized == {}
        assert all(w["max"] == 0.0 for r in paw_result.rounds for w in r.weights)


class TestDeterminism:
    """Results do not depend on the number of workers"""

    def test_worker_count(self, tiny_datasets, tiny_model_config, fl_config):
        serial = FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(Method.FEDPAW, rounds=2), seed=5)
        threaded = FederatedSimulation(
            tiny_datasets, tiny_model_config, fl_config(Method.FEDPAW, rounds=2, workers=3), seed=5,
        )
        first = serial.run().final_state
        second = threaded.run().final_state
        assert first.global_model.bitwise_equal(second.global_model)
        assert sorted(first.personalized) == sorted(second.personalized)
        for cid, params in first.personalized.items():
            assert params.bitwise_equal(second.personalized[cid])

    def test_same_seed_same_curve(self, tiny_datasets, tiny_model_config, fl_config):
        config = fl_config(Method.FEDPROX, rounds=2, rho=0.34)
        first = FederatedSimulation(tiny_datasets, tiny_model_config, config, seed=2).run()
        second = FederatedSimulation(tiny_datasets, tiny_model_config, config, seed=2).run()
        assert [_comparable(r) for r in first.rounds] == [_comparable(r) for r in second.rounds]


class TestSimulation:
    """Round records, accounting and reference trainers"""

    def test_fedpaw_records(self, tiny_datasets, tiny_model_config, fl_config):
        sim = FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(Method.FEDPAW, rounds=2), seed=0)
        result = sim.run()
        assert [r.t for r in result.rounds] == [1, 2]
        assert len(result.reports) == 2
        for record in result.rounds:
            assert record.params_transferred == 2 * result.parameter_count * len(record.sampled)
            assert record.params_per_client == 2 * result.parameter_count
            assert all(0.0 <= w["min"] <= w["max"] <= 1.0 for w in record.weights)
            assert np.isfinite(record.test_mae_mean)
        assert result.best_report is not None
        assert 1 <= result.tracker.best_round <= 2

    def test_shared_initial_model(self, tiny_datasets, tiny_model_config, fl_config):
        sim = FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(), seed=9)
        initial = sim.state.global_model
        assert all(c.model.params is initial for c in sim.clients)
        other = FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(), seed=9)
        assert other.state.global_model.bitwise_equal(initial)

    def test_local(self, tiny_datasets, tiny_model_config, fl_config):
        sim = FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(Method.LOCAL, rounds=2), seed=1)
        result = sim.run()
        assert all(r.params_transferred == 0 and r.params_per_client == 0 for r in result.rounds)
        models = sim.evaluation_models(result.final_state)
        ids = sorted(models)
        assert not models[ids[0]].bitwise_equal(models[ids[1]])

    def test_cloud(self, tiny_datasets, tiny_model_config, fl_config):
        sim = FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(Method.CLOUD, rounds=1), seed=1)
        assert [c.client_id for c in sim.clients] == [POOLED_CLIENT]
        assert sim.clients[0].dataset.num_train == sum(d.num_train for d in tiny_datasets)
        result = sim.run()
        assert result.rounds[0].sampled == [POOLED_CLIENT]
        assert sorted(result.reports[0].per_client) == sorted(d.client_id for d in tiny_datasets)

    def test_pa_layers_checked(self, tiny_datasets, tiny_model_config, fl_config):
        with pytest.raises(ContractError):
            FederatedSimulation(tiny_datasets, tiny_model_config, fl_config(Method.FEDPAW, pa_layers=9), seed=0)
