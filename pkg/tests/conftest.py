"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from crossdiff.data import SyntheticConfig, filter_and_split, generate_synthetic
from crossdiff.diffusion import build_schedule
from crossdiff.network import ModelConfig


def make_split(n_users=12, n_items=40, noise=0.1, seed=7, n_shared=3, n_specific=1):
    """Small filtered split backed by the synthetic generator."""
    events, truth = generate_synthetic(SyntheticConfig(
        n_users=n_users, n_items_x=n_items, n_items_y=n_items,
        n_shared_interests=n_shared, n_specific_interests=n_specific,
        noise_rate=noise, seq_len_range=(10, 15), rng_seed=seed))
    return filter_and_split(events), truth


def tiny_model_cfg(split, d=8, n_heads=2, enc_layers=1, dec_layers=1, T=6):
    return ModelConfig(d=d, n_heads=n_heads, enc_layers=enc_layers,
                       dec_layers=dec_layers, max_seq_len=15, T=T,
                       vocab_x_size=split.vocab_x.size,
                       vocab_y_size=split.vocab_y.size)


@pytest.fixture(scope="session")
def small_split():
    split, _ = make_split()
    return split


@pytest.fixture(scope="session")
def small_sched():
    return build_schedule(6)


def rel_err(a, b):
    a, b = float(a), float(b)
    scale = max(abs(a), abs(b))
    if scale < 1e-8:
        return abs(a - b)
    return abs(a - b) / scale


@pytest.fixture(name="rel_err", scope="session")
def rel_err_fixture():
    return rel_err


def assert_allclose(a, b, tol, msg=""):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = np.max(np.abs(a - b)) if a.size else 0.0
    assert err <= tol, "%smax abs err %.3e > %.3e" % (msg and msg + ": ", err, tol)
