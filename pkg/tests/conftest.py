"""Shared fixtures. The micro stack is a fully trained pipeline at toy
dimensions, shared session-wide so individual tests stay fast."""

import pytest

from legofeat.appshell.config import RunConfig
from legofeat.harness import TrainedStack


def micro_config() -> RunConfig:
    cfg = RunConfig()
    cfg.vocab = 6
    cfg.d_in = 4
    cfg.d1_min_labels, cfg.d1_max_labels = 2, 5
    cfg.d2_min_labels, cfg.d2_max_labels = 3, 6
    cfg.n_train_per_domain = 24
    cfg.n_test = 8
    cfg.u_max = 12
    cfg.d_model = 8
    cfg.heads = 2
    cfg.d_emb = 4
    cfg.d_state = 8
    cfg.d_joint = 6
    cfg.d_att = 8
    cfg.k_top = 2
    cfg.e2 = 4
    cfg.e1 = 8
    cfg.batch_size = 8
    cfg.base_steps = 150
    cfg.exporter_steps = 80
    cfg.downstream_steps = 100
    cfg.first_pass_steps = 80
    cfg.delib_steps = 100
    cfg.nbest_n = 2
    cfg.beam_size = 4
    return cfg.validate()


@pytest.fixture(scope="session")
def micro_cfg() -> RunConfig:
    return micro_config()


@pytest.fixture(scope="session")
def micro_stack(micro_cfg) -> TrainedStack:
    return TrainedStack(micro_cfg)
